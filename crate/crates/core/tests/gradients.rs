use malaria_core::gradcheck::{check_op, GradOp};

const SEEDS: u64 = 20;
const TOLERANCE: f64 = 1e-5;

#[test]
fn every_op_matches_central_differences() {
    for op in GradOp::ALL {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let report = check_op(op, seed).unwrap();
            assert!(report.checked > 0);
            worst = worst.max(report.max_rel_err);
            assert!(
                report.max_rel_err <= TOLERANCE,
                "{} seed {seed}: rel err {:e} (abs {:e})",
                op.name(),
                report.max_rel_err,
                report.max_abs_err
            );
        }
        println!("{:<22} worst rel err {worst:.3e}", op.name());
    }
}
