use malaria_core::checkpoint::*;
use malaria_core::data::Batch;
use malaria_core::train::{train_step, Adam};
use malaria_core::{Architecture, DType, ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn narrow(seed: u64) -> ModelGraph<f32> {
    ModelGraph::with_architecture(Architecture::narrow(16), seed).unwrap()
}

fn probe(n: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    Tensor::from_fn(&[n, 3, 224, 224], |_| rng.random::<f32>())
}

/// Train one step so running statistics and weights differ from their init.
fn trained(seed: u64) -> ModelGraph<f32> {
    let mut model = narrow(seed);
    let mut adam = Adam::new(model.params());
    let batch = Batch {
        images: probe(2),
        labels: vec![0, 1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_step(&mut model, &mut adam, &batch, 0.001, &mut rng).unwrap();
    model
}

/// Independent writer for the documented layout.
fn encode(meta_json: &[u8], table: &[RawTensor]) -> Vec<u8> {
    let mut t = Vec::new();
    t.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for e in table {
        t.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        t.extend_from_slice(e.name.as_bytes());
        t.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            t.extend_from_slice(&(d as u32).to_le_bytes());
        }
        t.push(e.dtype as u8);
        t.extend_from_slice(&e.bytes);
    }
    let mut out = b"MCKP".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_json);
    out.extend_from_slice(&t);
    out
}

fn reencode(meta: &Metadata, table: &[RawTensor]) -> Vec<u8> {
    let mut meta = meta.clone();
    let provisional = encode(b"{}", table);
    let table_start = 12 + 2;
    meta.tensor_sha256 = hex::encode(Sha256::digest(&provisional[table_start..]));
    encode(&serde_json::to_vec(&meta).unwrap(), table)
}

#[test]
fn save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let model = trained(seed);
        let mut ck = Checkpoint::new(model.clone());
        ck.config = serde_json::json!({"train": {"lr": 0.001, "epochs": 30}, "seed": seed});
        let a = tmp.path().join(format!("a{seed}.mckp"));
        let b = tmp.path().join(format!("b{seed}.mckp"));
        ck.save(&a).unwrap();
        let loaded = Checkpoint::<f32>::load(&a).unwrap();
        assert_eq!(loaded.config, ck.config);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        for ((_, x), (_, y)) in model.params().iter().zip(loaded.model.params().iter()) {
            assert_eq!(x.name, y.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value), "{}", x.name);
        }
    }
}

#[test]
fn reference_model_round_trip_logits_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let model = ModelGraph::<f32>::build(3);
    let path = tmp.path().join("full.mckp");
    save(&model, &path).unwrap();
    let loaded: ModelGraph<f32> = load(&path).unwrap();
    let x = probe(2);
    let before = model.infer_logits(&x).unwrap();
    let after = loaded.infer_logits(&x).unwrap();
    assert_eq!(before.max_abs_diff(&after), 0.0);
    assert_eq!(before, after);
    assert_eq!(loaded.architecture(), model.architecture());
    assert_eq!(loaded.seed(), 3);
}

#[test]
fn double_precision_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = ModelGraph::<f64>::with_architecture(Architecture::narrow(32), 4).unwrap();
    let path = tmp.path().join("f64.mckp");
    save(&model, &path).unwrap();
    let loaded: ModelGraph<f64> = load(&path).unwrap();
    assert_eq!(loaded.params(), model.params());
    match load::<f32>(&path) {
        Err(CheckpointError::DtypeMismatch {
            expected: DType::F32,
            found: DType::F64,
            ..
        }) => {}
        other => panic!("expected dtype mismatch, got {other:?}"),
    }
}

#[test]
fn layout_matches_documented_format() {
    let model = narrow(5);
    let bytes = Checkpoint::new(model.clone()).to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"MCKP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
    assert_eq!(
        meta["class_names"],
        serde_json::json!(["parasitized", "uninfected"])
    );
    assert_eq!(meta["input_shape"], serde_json::json!([3, 224, 224]));
    assert_eq!(meta["seed"], 5);

    let mut at = 12 + meta_len;
    let u32_at = |at: &mut usize| {
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
        *at += 4;
        v as usize
    };
    assert_eq!(u32_at(&mut at), model.params().len());
    let name_len = u32_at(&mut at);
    assert_eq!(&bytes[at..at + name_len], b"stem.conv.weight");
    at += name_len;
    assert_eq!(u32_at(&mut at), 4);
    let dims: Vec<usize> = (0..4).map(|_| u32_at(&mut at)).collect();
    assert_eq!(dims, vec![4, 3, 7, 7]);
    assert_eq!(bytes[at], 0);
    at += 1;
    let first = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    assert_eq!(
        first,
        model.params().iter().next().unwrap().1.value.data()[0]
    );

    let (_, table) = parse(&bytes).unwrap();
    let meta = parse(&bytes).unwrap().0;
    assert_eq!(reencode(&meta, &table), bytes);
}

#[test]
fn corruption_is_always_detected() {
    let bytes = Checkpoint::new(narrow(6)).to_bytes().unwrap();
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let table_start = 12 + meta_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut positions: Vec<usize> = (0..200)
        .map(|_| rng.random_range(table_start..bytes.len()))
        .collect();
    positions.extend([table_start, table_start + 4, bytes.len() - 1]);
    for pos in positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(
            Checkpoint::<f32>::from_bytes(&bad).is_err(),
            "flip at {pos} went unnoticed"
        );
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(CheckpointError::BadMagic(_))
    ));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(CheckpointError::Version { found: 2 })
    ));
    for cut in [3, 10, table_start + 2, bytes.len() - 1] {
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..cut]),
            Err(CheckpointError::Truncated { .. })
        ));
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&longer),
        Err(CheckpointError::TrailingBytes(1))
    ));
}

#[test]
fn name_and_shape_mismatches_are_reported() {
    let bytes = Checkpoint::new(narrow(7)).to_bytes().unwrap();
    let (meta, table) = parse(&bytes).unwrap();

    let without: Vec<RawTensor> = table
        .iter()
        .filter(|t| t.name != "conv3_x.1.conv2.bn.running_var")
        .cloned()
        .collect();
    match Checkpoint::<f32>::from_bytes(&reencode(&meta, &without)) {
        Err(e @ CheckpointError::MissingTensors(_)) => {
            assert!(
                e.to_string().contains("conv3_x.1.conv2.bn.running_var"),
                "{e}"
            );
        }
        other => panic!("expected missing tensor, got {other:?}"),
    }

    let mut renamed = table.clone();
    renamed[0].name = "stem.conv.kernel".into();
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&reencode(&meta, &renamed)),
        Err(CheckpointError::MissingTensors(_))
    ));

    let mut reshaped = table.clone();
    let last = reshaped.last_mut().unwrap();
    last.dims = vec![1, last.dims[0]];
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&reencode(&meta, &reshaped)),
        Err(CheckpointError::ShapeMismatch { .. })
    ));

    let mut dup = table.clone();
    dup.push(table[0].clone());
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&reencode(&meta, &dup)),
        Err(CheckpointError::DuplicateName(_))
    ));

    let mut wider = meta.clone();
    wider.architecture.head_units *= 2;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&reencode(&wider, &table)),
        Err(CheckpointError::ShapeMismatch { .. })
    ));
}

#[test]
fn model_version_tracks_content() {
    let a = Checkpoint::new(narrow(8)).to_bytes().unwrap();
    let b = Checkpoint::new(narrow(9)).to_bytes().unwrap();
    assert_eq!(model_version(&a).len(), 12);
    assert_eq!(model_version(&a), model_version(&a.clone()));
    assert_ne!(model_version(&a), model_version(&b));
}
