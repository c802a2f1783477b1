//! Distillation of a small ReLU student from a frozen parent by matching
//! CLS embeddings through a learned linear projection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelSpectrogram, Preprocessing};
use crate::error::{bail, Result};
use crate::model::{save_backbone, Backbone, ModelConfig};
use crate::nn::loss::mse;
use crate::nn::{Activation, Adam, AdamConfig, Linear, Param, Parameters, Prng, Tensor};

/// Linear map from the student width to the parent width. Training-only.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub linear: Linear<f32>,
}

impl ProjectionHead {
    pub fn new(student_dim: usize, parent_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self { linear: Linear::new("proj", student_dim, parent_dim, &mut Prng::new(seed))? })
    }

    /// Identity weights and zero bias (requires equal widths).
    pub fn identity(dim: usize) -> Result<Self> {
        let mut p = Self::new(dim, dim, 0)?;
        let w = p.linear.weight.value.data_mut();
        w.fill(0.0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Ok(p)
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.linear.forward(x)
    }
}

impl Parameters<f32> for ProjectionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f32>)) {
        self.linear.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.linear.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student: ModelConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { student: ModelConfig::child(64, 2, 1), epochs: 30, max_steps: None, batch_size: 8, lr: 1e-3 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        if self.student.activation != Activation::Relu {
            bail!(Config, "student activation must be ReLU");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be ≥ 1");
        }
        if !(self.lr >= 0.0) {
            bail!(Config, "learning rate must be non-negative");
        }
        Ok(())
    }
}

/// Refuses to distill across differing front ends.
pub fn check_preprocessing(parent: &Preprocessing, student: &Preprocessing) -> Result<()> {
    if parent != student {
        bail!(Config, "parent and student preprocessing settings differ");
    }
    Ok(())
}

fn inputs_of<'a>(specs: &'a [LogMelSpectrogram], idx: &[usize]) -> Vec<&'a [f32]> {
    idx.iter().map(|&i| specs[i].values.as_slice()).collect()
}

/// Parent CLS embeddings `[n × d_parent]`, computed in chunks.
pub fn parent_embeddings(parent: &Backbone<f32>, specs: &[LogMelSpectrogram]) -> Result<Tensor<f32>> {
    if specs.is_empty() {
        bail!(EmptyInput, "no spectrograms to embed");
    }
    let d = parent.embed_dim();
    let mut out = Tensor::zeros(&[specs.len(), d]);
    for (c, chunk) in specs.chunks(16).enumerate() {
        let inputs: Vec<&[f32]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let e = parent.cls_embeddings(&inputs)?;
        out.data_mut()[c * 16 * d..c * 16 * d + e.len()].copy_from_slice(e.data());
    }
    Ok(out)
}

/// One optimizer step against precomputed parent embeddings; returns the
/// element-wise MSE before the update.
pub fn distill_step_with_targets(
    student: &mut Backbone<f32>,
    proj: &mut ProjectionHead,
    adam: &mut Adam<f32>,
    inputs: &[&[f32]],
    targets: &Tensor<f32>,
) -> Result<f32> {
    if inputs.is_empty() {
        bail!(EmptyInput, "empty distillation batch");
    }
    student.zero_grad();
    proj.zero_grad();
    let (out, cache) = student.forward(inputs, None, false)?;
    let ds = student.embed_dim();
    let mut cls = Tensor::zeros(&[inputs.len(), ds]);
    for b in 0..inputs.len() {
        cls.row_mut(b).copy_from_slice(out.cls(b));
    }
    let pred = proj.forward(&cls)?;
    let (loss, grad) = mse(pred.data(), targets.data())?;
    let d_pred = Tensor::from_vec(pred.dims(), grad)?;
    let d_cls = proj.linear.backward(&cls, &d_pred);
    let mut d_tokens = Tensor::zeros(out.tokens.dims());
    for b in 0..inputs.len() {
        d_tokens.row_mut(b * out.seq).copy_from_slice(d_cls.row(b));
    }
    student.backward(&cache, &d_tokens);
    adam.step(&mut [student, proj]);
    Ok(loss)
}

/// One step that first runs the frozen parent on the same batch.
pub fn distill_step(
    student: &mut Backbone<f32>,
    proj: &mut ProjectionHead,
    parent: &Backbone<f32>,
    adam: &mut Adam<f32>,
    inputs: &[&[f32]],
) -> Result<f32> {
    let targets = parent.cls_embeddings(inputs)?;
    distill_step_with_targets(student, proj, adam, inputs, &targets)
}

/// Element-wise MSE and mean cosine similarity between projected student
/// CLS and parent CLS.
pub fn projection_agreement(
    student: &Backbone<f32>,
    proj: &ProjectionHead,
    specs: &[LogMelSpectrogram],
    targets: &Tensor<f32>,
) -> Result<(f64, f64)> {
    let dp = targets.cols();
    let (mut se, mut cos) = (0.0f64, 0.0f64);
    for (c, chunk) in specs.chunks(16).enumerate() {
        let inputs: Vec<&[f32]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let pred = proj.forward(&student.cls_embeddings(&inputs)?)?;
        for b in 0..chunk.len() {
            let p = pred.row(b);
            let t = targets.row(c * 16 + b);
            let (mut dot, mut np, mut nt) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &y) in p.iter().zip(t) {
                let (a, y) = (a as f64, y as f64);
                se += (a - y) * (a - y);
                dot += a * y;
                np += a * a;
                nt += y * y;
            }
            cos += dot / (np.sqrt() * nt.sqrt()).max(1e-12);
        }
    }
    let n = specs.len() as f64;
    Ok((se / (n * dp as f64), cos / n))
}

/// Held-out agreement after each epoch; epoch 0 is the untrained state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub heldout_cosine: f64,
}

pub struct DistillOutcome {
    pub student: Backbone<f32>,
    pub proj: ProjectionHead,
    pub curve: Vec<DistillEpoch>,
}

/// Distills a fresh student from `parent` over shuffled batches of `train`.
pub fn distill_run(
    parent: &Backbone<f32>,
    train: &[LogMelSpectrogram],
    heldout: &[LogMelSpectrogram],
    cfg: &DistillConfig,
    prng: &mut Prng,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        bail!(EmptyInput, "distillation needs training and held-out clips");
    }
    let mut student = Backbone::new(cfg.student, prng.next_u64())?;
    let mut proj = ProjectionHead::new(cfg.student.embed_dim, parent.embed_dim(), prng.next_u64())?;
    let train_targets = parent_embeddings(parent, train)?;
    let held_targets = parent_embeddings(parent, heldout)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let (mse0, cos0) = projection_agreement(&student, &proj, heldout, &held_targets)?;
    let mut curve = vec![DistillEpoch { epoch: 0, steps: 0, train_mse: f64::NAN, heldout_mse: mse0, heldout_cosine: cos0 }];
    let dp = parent.embed_dim();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 1..=cfg.epochs {
        if steps >= budget {
            break;
        }
        prng.shuffle(&mut order);
        let (mut sum, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= budget {
                break;
            }
            let mut t = Tensor::zeros(&[chunk.len(), dp]);
            for (r, &i) in chunk.iter().enumerate() {
                t.row_mut(r).copy_from_slice(train_targets.row(i));
            }
            let loss = distill_step_with_targets(&mut student, &mut proj, &mut adam, &inputs_of(train, chunk), &t)?;
            sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        let (m, c) = projection_agreement(&student, &proj, heldout, &held_targets)?;
        log::info!("distill epoch {epoch} ({steps} steps): held-out mse {m:.6} cosine {c:.4}");
        curve.push(DistillEpoch { epoch, steps, train_mse: sum / seen.max(1) as f64, heldout_mse: m, heldout_cosine: c });
    }
    Ok(DistillOutcome { student, proj, curve })
}

/// Saves the student alone; the projection head is left behind.
pub fn export_student(student: &Backbone<f32>, preprocessing: &Preprocessing, path: impl AsRef<Path>) -> Result<()> {
    save_backbone(student, preprocessing, path)
}

pub fn write_curve_csv<W: std::io::Write>(out: W, curve: &[DistillEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
