//! Masked student–teacher pretraining.
//!
//! The student sees 30% of the patches and regresses two targets produced by
//! a teacher that sees everything: a layer-averaged, normalized patch summary
//! (compared with the student's CLS token) and the decoder's reconstruction
//! of the teacher's tokens, standardized per clip. The teacher is a plain copy of the student,
//! refreshed at every epoch boundary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dsp::LogMelSpectrogram;
use crate::error::{bail, Result};
use crate::model::{Backbone, CnnDecoder, ModelConfig, NUM_PATCHES};
use crate::model::config::{INPUT_SIZE, PATCH, GRID};
use crate::nn::layers::{normalize_rows, LN_EPS};
use crate::nn::loss::huber;
use crate::nn::{Adam, AdamConfig, Parameters, Prng, Tensor};

pub const MASK_RATIO: f64 = 0.70;
pub const LAMBDA: f64 = 0.1;

/// Masked patch indices, sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    masked: Vec<usize>,
}

impl MaskSet {
    pub fn new(mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&p| p >= NUM_PATCHES) {
            bail!(Config, "mask index out of range");
        }
        if masked.len() >= NUM_PATCHES {
            bail!(Config, "mask leaves no visible patch");
        }
        Ok(Self { masked })
    }

    pub fn empty() -> Self {
        Self { masked: Vec::new() }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, p: usize) -> bool {
        self.masked.binary_search(&p).is_ok()
    }

    /// Complement of the mask, ascending.
    pub fn visible(&self) -> Vec<usize> {
        (0..NUM_PATCHES).filter(|&p| !self.contains(p)).collect()
    }
}

/// Number of masked patches for a ratio: `round(ratio · 64)`.
pub fn masked_count(ratio: f64) -> usize {
    (ratio * NUM_PATCHES as f64).round() as usize
}

/// Uniform draw without replacement of `round(ratio · 64)` patches.
pub fn sample_mask_with_ratio(prng: &mut Prng, ratio: f64) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "mask ratio must lie in (0, 1), got {ratio}");
    }
    MaskSet::new(prng.sample_indices(NUM_PATCHES, masked_count(ratio)))
}

/// 45 of 64 patches.
pub fn sample_mask(prng: &mut Prng) -> MaskSet {
    sample_mask_with_ratio(prng, MASK_RATIO).expect("default ratio is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub huber_delta: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Restrict the reconstruction loss to masked patches.
    pub global_masked_only: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda: LAMBDA,
            huber_delta: 1.0,
            mask_ratio: MASK_RATIO,
            epochs: 20,
            batch_size: 8,
            lr: 5e-4,
            global_masked_only: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(Config, "lambda must be non-negative, got {}", self.lambda);
        }
        if !(self.huber_delta > 0.0) {
            bail!(Config, "huber delta must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || masked_count(self.mask_ratio) >= NUM_PATCHES {
            bail!(Config, "mask ratio {} leaves no visible patch or is out of range", self.mask_ratio);
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

/// `λ·local + global`.
pub fn total_loss(local: f64, global: f64, lambda: f64) -> f64 {
    lambda * local + global
}

/// Huber distance between a student CLS vector and its target.
pub fn local_loss(student_cls: &[f32], target: &[f32], delta: f64) -> Result<f32> {
    Ok(huber(student_cls, target, delta)?.0)
}

/// Trainable student, frozen teacher and the shared reconstruction decoder.
#[derive(Clone, Debug)]
pub struct StudentTeacherPair {
    pub student: Backbone<f32>,
    pub teacher: Backbone<f32>,
    pub decoder: CnnDecoder<f32>,
}

impl StudentTeacherPair {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let student = Backbone::new(config, seed)?;
        let decoder = CnnDecoder::new(config.embed_dim, Prng::new(seed).derive(0xdec0de).next_u64())?;
        Ok(Self::from_parts(student, decoder))
    }

    pub fn from_parts(student: Backbone<f32>, decoder: CnnDecoder<f32>) -> Self {
        let teacher = student.clone();
        Self { student, teacher, decoder }
    }

    /// Copies student weights into the teacher.
    pub fn sync_teacher(&mut self) -> Result<()> {
        if self.student.config != self.teacher.config {
            bail!(Internal, "student and teacher configs differ");
        }
        self.teacher.copy_values_from(&self.student);
        Ok(())
    }

    pub fn teacher_matches_student(&self) -> bool {
        self.teacher.value_bytes() == self.student.value_bytes()
    }

    /// Largest absolute gradient held by any teacher parameter.
    pub fn teacher_grad_max_abs(&self) -> f32 {
        let mut m = 0.0f32;
        self.teacher.visit(&mut |p| m = m.max(p.grad.max_abs()));
        m
    }
}

/// Regression targets `[batch × d]`: block outputs averaged over layers, then
/// over the 64 patch tokens, then normalized without parameters.
pub fn teacher_targets(teacher: &Backbone<f32>, inputs: &[&[f32]]) -> Result<Tensor<f32>> {
    let out = teacher.forward(inputs, None, true)?.0;
    Ok(targets_from_blocks(&out.block_outputs, out.batch, out.seq))
}

fn targets_from_blocks(blocks: &[Tensor<f32>], batch: usize, seq: usize) -> Tensor<f32> {
    let d = blocks[0].cols();
    let scale = 1.0 / (blocks.len() * (seq - 1)) as f32;
    let mut pooled = Tensor::zeros(&[batch, d]);
    for b in 0..batch {
        let acc = pooled.row_mut(b);
        for blk in blocks {
            for t in 1..seq {
                for (a, &v) in acc.iter_mut().zip(blk.row(b * seq + t)) {
                    *a += v;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a *= scale);
    }
    normalize_rows(&pooled, LN_EPS).xhat
}

/// Reconstruction target: the teacher's decoded map standardized over its
/// pixels, which pins the target scale independently of the decoder's gain.
pub fn map_target(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let flat = map.clone().reshape(&[1, INPUT_SIZE * INPUT_SIZE])?;
    normalize_rows(&flat, LN_EPS).xhat.reshape(&[INPUT_SIZE, INPUT_SIZE])
}

/// Losses of one optimisation step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub local: f64,
    pub global: f64,
}

/// Per-epoch mean losses, one CSV row each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub local: f64,
    pub global: f64,
}

fn masked_pixel_weights(mask: &MaskSet) -> Vec<bool> {
    let mut w = vec![false; INPUT_SIZE * INPUT_SIZE];
    for &p in mask.masked() {
        let (pr, pc) = (p / GRID, p % GRID);
        for i in 0..PATCH {
            let row = (pr * PATCH + i) * INPUT_SIZE + pc * PATCH;
            w[row..row + PATCH].iter_mut().for_each(|x| *x = true);
        }
    }
    w
}

/// Forward and backward for one batch. Gradients accumulate into the
/// student and decoder; the caller zeroes and applies them.
pub fn pretrain_losses(
    pair: &mut StudentTeacherPair,
    inputs: &[&[f32]],
    masks: &[MaskSet],
    cfg: &PretrainConfig,
) -> Result<StepLosses> {
    if inputs.is_empty() {
        bail!(EmptyInput, "empty pretraining batch");
    }
    let batch = inputs.len();
    let d = pair.student.embed_dim();
    let t_out = pair.teacher.forward(inputs, None, true)?.0;
    let targets = targets_from_blocks(&t_out.block_outputs, batch, t_out.seq);
    let all: Vec<usize> = (0..NUM_PATCHES).collect();

    let visible: Vec<Vec<usize>> = masks.iter().map(MaskSet::visible).collect();
    let (s_out, s_cache) = pair.student.forward(inputs, Some(&visible), false)?;
    let seq = s_out.seq;
    let mut d_tokens = Tensor::zeros(&[batch * seq, d]);

    let mut cls = Tensor::zeros(&[batch, d]);
    for b in 0..batch {
        cls.row_mut(b).copy_from_slice(s_out.cls(b));
    }
    let (local, g_local) = huber(cls.data(), targets.data(), cfg.huber_delta)?;
    let lam = cfg.lambda as f32;
    for b in 0..batch {
        for (o, &g) in d_tokens.row_mut(b * seq).iter_mut().zip(&g_local[b * d..(b + 1) * d]) {
            *o = lam * g;
        }
    }

    let mut global = 0.0f64;
    let mut d_mask_token = vec![0.0f32; d];
    let inv_b = 1.0 / batch as f32;
    for b in 0..batch {
        let t_map = map_target(&pair.decoder.decode_map(&pair.teacher, t_out.sample(b), &all)?.0)?;
        let (s_map, s_dec) = pair.decoder.decode_map(&pair.student, s_out.sample(b), &visible[b])?;
        let (loss, grad) = if cfg.global_masked_only {
            let keep = masked_pixel_weights(&masks[b]);
            let sp: Vec<f32> = s_map.data().iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
            let tp: Vec<f32> = t_map.data().iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
            if sp.is_empty() {
                (0.0, vec![0.0; s_map.len()])
            } else {
                let (l, g) = huber(&sp, &tp, cfg.huber_delta)?;
                let mut full = vec![0.0; s_map.len()];
                let mut it = g.into_iter();
                for (f, &k) in full.iter_mut().zip(&keep) {
                    if k {
                        *f = it.next().unwrap();
                    }
                }
                (l, full)
            }
        } else {
            huber(s_map.data(), t_map.data(), cfg.huber_delta)?
        };
        global += loss as f64 / batch as f64;
        let d_map = Tensor::from_vec(&[INPUT_SIZE, INPUT_SIZE], grad.into_iter().map(|g| g * inv_b).collect())?;
        let (dt, dm) = pair.decoder.backward(&s_dec, &d_map);
        for (j, row) in dt.chunks(d).enumerate().skip(1) {
            for (o, &g) in d_tokens.row_mut(b * seq + j).iter_mut().zip(row) {
                *o += g;
            }
        }
        for (a, g) in d_mask_token.iter_mut().zip(dm) {
            *a += g;
        }
    }
    pair.student.backward(&s_cache, &d_tokens);
    for (a, g) in pair.student.mask_token.grad.data_mut().iter_mut().zip(d_mask_token) {
        *a += g;
    }
    let local = local as f64;
    Ok(StepLosses { total: total_loss(local, global, cfg.lambda), local, global })
}

/// Progress notifications from [`pretrain_run_observed`].
pub enum PretrainEvent<'a> {
    Step { epoch: usize, masks: &'a [MaskSet], losses: StepLosses },
    EpochEnd { losses: &'a EpochLosses, pair: &'a StudentTeacherPair },
}

/// Trains `pair` on `corpus`, syncing the teacher after every epoch.
pub fn pretrain_run(
    pair: &mut StudentTeacherPair,
    corpus: &[LogMelSpectrogram],
    cfg: &PretrainConfig,
    prng: &mut Prng,
) -> Result<Vec<EpochLosses>> {
    pretrain_run_observed(pair, corpus, cfg, prng, &mut |_| {})
}

pub fn pretrain_run_observed(
    pair: &mut StudentTeacherPair,
    corpus: &[LogMelSpectrogram],
    cfg: &PretrainConfig,
    prng: &mut Prng,
    observer: &mut dyn FnMut(PretrainEvent<'_>),
) -> Result<Vec<EpochLosses>> {
    cfg.validate()?;
    if corpus.is_empty() {
        bail!(EmptyInput, "pretraining corpus is empty");
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        prng.shuffle(&mut order);
        let mut sums = StepLosses::default();
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| corpus[i].values.as_slice()).collect();
            let masks = chunk
                .iter()
                .map(|_| sample_mask_with_ratio(prng, cfg.mask_ratio))
                .collect::<Result<Vec<_>>>()?;
            pair.student.zero_grad();
            pair.decoder.zero_grad();
            let losses = pretrain_losses(pair, &inputs, &masks, cfg)?;
            adam.step(&mut [&mut pair.student, &mut pair.decoder]);
            let w = chunk.len() as f64;
            sums.total += losses.total * w;
            sums.local += losses.local * w;
            sums.global += losses.global * w;
            observer(PretrainEvent::Step { epoch, masks: &masks, losses });
        }
        pair.sync_teacher()?;
        let n = corpus.len() as f64;
        let row = EpochLosses { epoch, total: sums.total / n, local: sums.local / n, global: sums.global / n };
        log::info!("pretrain epoch {epoch}: total {:.5} local {:.5} global {:.5}", row.total, row.local, row.global);
        curve.push(row);
        observer(PretrainEvent::EpochEnd { losses: curve.last().unwrap(), pair });
    }
    Ok(curve)
}

/// Writes `epoch,total,local,global` rows.
pub fn write_loss_csv<W: Write>(out: W, curve: &[EpochLosses]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
