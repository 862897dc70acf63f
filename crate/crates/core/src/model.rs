//! The bottleneck-residual classifier.
//!
//! Stem (7×7/64 stride-2 conv, BN, ReLU, 3×3 stride-2 max pool), four stages
//! of bottleneck blocks, and a GAP → dense → ReLU → dropout → dense → softmax
//! head. Every block computes
//! `relu(bn3(conv1x1(relu(bn2(conv3x3(relu(bn1(conv1x1(x))))))) + shortcut(x))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::{Mode, Padding, Tensor, TensorError};

pub const CLASS_NAMES: [&str; 2] = ["parasitized", "uninfected"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected input [N, 3, {size}, {size}], got {got:?}")]
    InputShape { size: usize, got: Vec<usize> },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Layer widths and depths. [`Architecture::resnet50`] is the reference network;
/// narrower variants keep the same topology for fast experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub expansion: usize,
    pub head_units: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::resnet50()
    }
}

impl Architecture {
    pub fn resnet50() -> Self {
        Architecture {
            input_size: 224,
            in_channels: 3,
            stem_width: 64,
            stage_widths: vec![64, 128, 256, 512],
            stage_blocks: vec![3, 4, 6, 3],
            expansion: 4,
            head_units: 512,
            dropout: 0.5,
            num_classes: 2,
        }
    }

    /// Same depth and input size with every width divided by `divisor`.
    pub fn narrow(divisor: usize) -> Self {
        let base = Self::resnet50();
        let d = divisor.max(1);
        Architecture {
            stem_width: (base.stem_width / d).max(1),
            stage_widths: base.stage_widths.iter().map(|w| (w / d).max(1)).collect(),
            head_units: (base.head_units / d).max(1),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_blocks.len() {
            return fail("stage widths and block counts must be non-empty and equal length");
        }
        if self.stage_blocks.contains(&0) || self.stage_widths.contains(&0) {
            return fail("every stage needs at least one block of positive width");
        }
        if self.input_size == 0 || self.in_channels == 0 || self.stem_width == 0 {
            return fail("input size, input channels and stem width must be positive");
        }
        if self.expansion == 0 || self.head_units == 0 {
            return fail("expansion and head units must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.num_classes < 2 {
            return fail("need at least two classes");
        }
        Ok(())
    }

    /// Channels entering the head.
    pub fn feature_width(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(0) * self.expansion
    }
}

/// Convolution (no bias) followed by batch norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    Projection(ConvBn),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottleneckBlock {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Shortcut,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<BottleneckBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Named stage output shapes produced by [`ModelGraph::shape_trace`].
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

type StatUpdates<T> = Vec<(ParamId, Tensor<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    arch: Architecture,
    seed: u64,
    params: ParamStore<T>,
    stem: ConvBn,
    stages: Vec<Stage>,
    hidden: DenseLayer,
    output: DenseLayer,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv_bn(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> ConvBn {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(&[cout, cin, k, k], |_| {
            T::from_f64_lossy(normal.sample(&mut self.rng))
        });
        ConvBn {
            weight: self.params.add(format!("{prefix}.weight"), weight, true),
            gamma: self
                .params
                .add(format!("{prefix}.bn.gamma"), Tensor::ones(&[cout]), true),
            beta: self
                .params
                .add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]), true),
            running_mean: self.params.add(
                format!("{prefix}.bn.running_mean"),
                Tensor::zeros(&[cout]),
                false,
            ),
            running_var: self.params.add(
                format!("{prefix}.bn.running_var"),
                Tensor::ones(&[cout]),
                false,
            ),
            stride,
        }
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> DenseLayer {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| {
            T::from_f64_lossy(uniform.sample(&mut self.rng))
        });
        DenseLayer {
            weight: self.params.add(format!("{prefix}.weight"), weight, true),
            bias: self
                .params
                .add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), true),
        }
    }

    fn classifier(&mut self, prefix: &str, fan_in: usize, classes: usize) -> DenseLayer {
        let normal = Normal::new(0.0, OUTPUT_INIT_STD).expect("positive std");
        let weight = Tensor::from_fn(&[fan_in, classes], |_| {
            T::from_f64_lossy(normal.sample(&mut self.rng))
        });
        DenseLayer {
            weight: self.params.add(format!("{prefix}.weight"), weight, true),
            bias: self
                .params
                .add(format!("{prefix}.bias"), Tensor::zeros(&[classes]), true),
        }
    }
}

/// Std of the logits-layer weights; keeps initial predictions near uniform.
pub const OUTPUT_INIT_STD: f64 = 0.01;

impl<T: Scalar> ModelGraph<T> {
    /// Builds the reference network with weights drawn from `seed`.
    pub fn build(seed: u64) -> Self {
        Self::with_architecture(Architecture::resnet50(), seed)
            .expect("reference architecture is valid")
    }

    pub fn with_architecture(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stem = b.conv_bn("stem.conv", arch.in_channels, arch.stem_width, 7, 2);
        let mut channels = arch.stem_width;
        let mut stages = Vec::new();
        for (s, (&width, &count)) in arch.stage_widths.iter().zip(&arch.stage_blocks).enumerate() {
            let name = format!("conv{}_x", s + 2);
            let out = width * arch.expansion;
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let p = format!("{name}.{i}");
                let reduce = b.conv_bn(&format!("{p}.conv1"), channels, width, 1, 1);
                let spatial = b.conv_bn(&format!("{p}.conv2"), width, width, 3, stride);
                let expand = b.conv_bn(&format!("{p}.conv3"), width, out, 1, 1);
                let shortcut = if channels != out || stride != 1 {
                    Shortcut::Projection(b.conv_bn(
                        &format!("{p}.shortcut"),
                        channels,
                        out,
                        1,
                        stride,
                    ))
                } else {
                    Shortcut::Identity
                };
                blocks.push(BottleneckBlock {
                    in_channels: channels,
                    width,
                    out_channels: out,
                    stride,
                    reduce,
                    spatial,
                    expand,
                    shortcut,
                });
                channels = out;
            }
            stages.push(Stage { name, blocks });
        }
        let hidden = b.dense("head.fc1", channels, arch.head_units);
        let output = b.classifier("head.fc2", arch.head_units, arch.num_classes);
        Ok(ModelGraph {
            arch,
            seed,
            params,
            stem,
            stages,
            hidden,
            output,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_names(&self) -> [&'static str; 2] {
        CLASS_NAMES
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stem(&self) -> &ConvBn {
        &self.stem
    }

    pub fn head(&self) -> (&DenseLayer, &DenseLayer) {
        (&self.hidden, &self.output)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.arch.input_size;
        match *shape {
            [n, c, h, w] if n >= 1 && c == self.arch.in_channels && h == s && w == s => Ok(()),
            _ => Err(ModelError::InputShape {
                size: s,
                got: shape.to_vec(),
            }),
        }
    }

    fn conv_bn(
        &self,
        tape: &mut GradTape<T>,
        x: Var,
        unit: &ConvBn,
        mode: Mode,
        relu: bool,
        updates: &mut StatUpdates<T>,
    ) -> Result<Var> {
        let w = tape.param(&self.params, unit.weight);
        let y = tape.conv2d(x, w, None, unit.stride, Padding::Same)?;
        let gamma = tape.param(&self.params, unit.gamma);
        let beta = tape.param(&self.params, unit.beta);
        let mut mean = self.params.value(unit.running_mean).clone();
        let mut var = self.params.value(unit.running_var).clone();
        let z = tape.batchnorm2d(y, gamma, beta, &mut mean, &mut var, mode)?;
        tape.release(y);
        if mode == Mode::Train {
            updates.push((unit.running_mean, mean));
            updates.push((unit.running_var, var));
        }
        if relu {
            let r = tape.relu(z);
            tape.release(z);
            Ok(r)
        } else {
            Ok(z)
        }
    }

    fn block(
        &self,
        tape: &mut GradTape<T>,
        block: &BottleneckBlock,
        x: Var,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<Var> {
        let channels = tape.value(x).shape().get(1).copied();
        if channels != Some(block.in_channels) {
            return Err(TensorError::Shape {
                op: "bottleneck",
                left: tape.value(x).shape().to_vec(),
                right: vec![block.in_channels],
            }
            .into());
        }
        let h1 = self.conv_bn(tape, x, &block.reduce, mode, true, updates)?;
        let h2 = self.conv_bn(tape, h1, &block.spatial, mode, true, updates)?;
        tape.release(h1);
        let h3 = self.conv_bn(tape, h2, &block.expand, mode, false, updates)?;
        tape.release(h2);
        let sum = match &block.shortcut {
            Shortcut::Identity => tape.add(h3, x)?,
            Shortcut::Projection(unit) => {
                let s = self.conv_bn(tape, x, unit, mode, false, updates)?;
                let sum = tape.add(h3, s)?;
                tape.release(s);
                sum
            }
        };
        tape.release(h3);
        let out = tape.relu(sum);
        tape.release(sum);
        Ok(out)
    }

    fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
        mut trace: Option<&mut ShapeTrace>,
        updates: &mut StatUpdates<T>,
    ) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let mut note = |tape: &GradTape<T>, name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), tape.value(v).shape().to_vec()));
            }
        };
        let stem = self.conv_bn(tape, input, &self.stem, mode, true, updates)?;
        note(tape, "stem", stem);
        let mut x = tape.maxpool2d(stem, 3, 2)?;
        tape.release(stem);
        note(tape, "maxpool", x);
        for stage in &self.stages {
            for block in &stage.blocks {
                let y = self.block(tape, block, x, mode, updates)?;
                tape.release(x);
                x = y;
            }
            note(tape, &stage.name, x);
        }
        let pooled = tape.global_avg_pool(x)?;
        tape.release(x);
        note(tape, "gap", pooled);
        let w1 = tape.param(&self.params, self.hidden.weight);
        let b1 = tape.param(&self.params, self.hidden.bias);
        let h = tape.dense(pooled, w1, b1)?;
        let h = {
            let r = tape.relu(h);
            tape.release(h);
            r
        };
        note(tape, "fc1", h);
        let d = tape.dropout(h, self.arch.dropout, mode, rng)?;
        let w2 = tape.param(&self.params, self.output.weight);
        let b2 = tape.param(&self.params, self.output.bias);
        let logits = tape.dense(d, w2, b2)?;
        note(tape, "logits", logits);
        Ok(logits)
    }

    fn commit(&mut self, updates: StatUpdates<T>) {
        for (id, value) in updates {
            self.params.get_mut(id).value = value;
        }
    }

    /// Records the network on `tape` and returns the logits. In train mode the
    /// batch-norm running statistics are updated.
    pub fn logits_on_tape<R: Rng + ?Sized>(
        &mut self,
        tape: &mut GradTape<T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let mut updates = Vec::new();
        let logits = self.record(tape, input, mode, rng, None, &mut updates)?;
        self.commit(updates);
        Ok(logits)
    }

    /// Class probabilities for a batch. Train mode uses batch statistics,
    /// updates running statistics and applies dropout.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            return self.predict_proba(batch);
        }
        let mut tape = GradTape::inference();
        let x = tape.constant(batch.clone());
        let logits = self.logits_on_tape(&mut tape, x, mode, rng)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Inference-mode logits; the model is not modified.
    pub fn infer_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::inference();
        let x = tape.constant(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.record(&mut tape, x, Mode::Infer, &mut rng, None, &mut Vec::new())?;
        Ok(tape.value(logits).clone())
    }

    /// Inference-mode class probabilities, one row per image.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = GradTape::inference();
        let x = tape.constant(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.record(&mut tape, x, Mode::Infer, &mut rng, None, &mut Vec::new())?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Output shape after the stem, the pool, every stage, GAP, the hidden layer and the logits.
    pub fn shape_trace(&self, batch: &Tensor<T>) -> Result<ShapeTrace> {
        let mut tape = GradTape::inference();
        let x = tape.constant(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut trace = Vec::new();
        let logits = self.record(
            &mut tape,
            x,
            Mode::Infer,
            &mut rng,
            Some(&mut trace),
            &mut Vec::new(),
        )?;
        let probs = tape.softmax(logits)?;
        trace.push(("softmax".into(), tape.value(probs).shape().to_vec()));
        Ok(trace)
    }

    /// Runs one bottleneck block on its own.
    pub fn bottleneck_forward(
        &mut self,
        tape: &mut GradTape<T>,
        stage: usize,
        index: usize,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let block = self.stages[stage].blocks[index].clone();
        let mut updates = Vec::new();
        let y = self.block(tape, &block, x, mode, &mut updates)?;
        self.commit(updates);
        Ok(y)
    }
}
