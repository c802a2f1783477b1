//! Supervised fine-tuning of a backbone plus classification head, and
//! macro-F1 evaluation.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, resample, AudioBuffer, AudioClip, ClipOrigin, FrontEnd, LogMelSpectrogram, SAMPLE_RATE};
use crate::error::{bail, Result};
use crate::model::Classifier;
use crate::nn::loss::cross_entropy;
use crate::nn::{Adam, AdamConfig, Parameters, Prng, Tensor};

/// A one-second clip with its operating-mode label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub mode: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeInfo {
    pub id: usize,
    pub name: String,
    pub axial_depth: String,
    pub spindle_speed: String,
}

/// Class ids `0..C` with human-readable descriptors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeTaxonomy {
    pub modes: Vec<ModeInfo>,
}

impl ModeTaxonomy {
    pub fn new(modes: Vec<ModeInfo>) -> Result<Self> {
        for (i, m) in modes.iter().enumerate() {
            if m.id != i {
                bail!(Config, "mode ids must be dense from 0; entry {i} has id {}", m.id);
            }
        }
        Ok(Self { modes })
    }

    /// Machine off, spindle idling, then {1, 3} mm depth × {6000..12000} rpm.
    pub fn cnc() -> Self {
        let mut modes = vec![
            ModeInfo { id: 0, name: "Mode 0".into(), axial_depth: "Off".into(), spindle_speed: "Off".into() },
            ModeInfo { id: 1, name: "Mode 1".into(), axial_depth: "On".into(), spindle_speed: "On".into() },
        ];
        for depth in [1, 3] {
            for rpm in [6000, 8000, 10000, 12000] {
                let id = modes.len();
                modes.push(ModeInfo {
                    id,
                    name: format!("Mode {id}"),
                    axial_depth: format!("{depth} mm"),
                    spindle_speed: format!("{rpm} rpm"),
                });
            }
        }
        Self { modes }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.modes
            .iter()
            .map(|m| format!("{} (depth {}, spindle {})", m.name, m.axial_depth, m.spindle_speed))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Train the head only, on embeddings computed once up front.
    pub freeze_backbone: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-3, batch_size: 16, freeze_backbone: false }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be ≥ 1");
        }
        if !(self.lr >= 0.0) {
            bail!(Config, "learning rate must be non-negative");
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        bail!(Domain, "label {bad} out of range for {classes} classes");
    }
    Ok(())
}

/// Trains `classifier` with cross-entropy and Adam; returns the mean train
/// loss of every epoch.
pub fn finetune(
    classifier: &mut Classifier,
    inputs: &[LogMelSpectrogram],
    labels: &[usize],
    cfg: &FinetuneConfig,
    prng: &mut Prng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.is_empty() {
        bail!(EmptyInput, "fine-tuning set is empty");
    }
    if inputs.len() != labels.len() {
        bail!(Shape, "{} inputs but {} labels", inputs.len(), labels.len());
    }
    let classes = classifier.num_classes();
    check_labels(labels, classes)?;
    if cfg.freeze_backbone {
        let rows: Vec<&[f32]> = inputs.iter().map(|s| s.values.as_slice()).collect();
        let mut emb = Tensor::zeros(&[rows.len(), classifier.backbone.embed_dim()]);
        let d = emb.cols();
        for (c, chunk) in rows.chunks(32).enumerate() {
            let e = classifier.backbone.cls_embeddings(chunk)?;
            emb.data_mut()[c * 32 * d..c * 32 * d + e.len()].copy_from_slice(e.data());
        }
        return train_head(&mut classifier.head, &emb, labels, cfg, prng);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        prng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f32]> = chunk.iter().map(|&i| inputs[i].values.as_slice()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let Classifier { backbone, head, .. } = classifier;
            backbone.zero_grad();
            head.zero_grad();
            let (out, cache) = backbone.forward(&batch, None, false)?;
            let mut cls = Tensor::zeros(&[batch.len(), backbone.embed_dim()]);
            for b in 0..batch.len() {
                cls.row_mut(b).copy_from_slice(out.cls(b));
            }
            let (logits, hc) = head.forward(&cls)?;
            let (loss, grad) = cross_entropy(logits.data(), classes, &y)?;
            let d_cls = head.backward(&hc, &Tensor::from_vec(logits.dims(), grad)?);
            let mut d_tokens = Tensor::zeros(out.tokens.dims());
            for b in 0..batch.len() {
                d_tokens.row_mut(b * out.seq).copy_from_slice(d_cls.row(b));
            }
            backbone.backward(&cache, &d_tokens);
            adam.step(&mut [backbone, head]);
            sum += loss as f64 * chunk.len() as f64;
        }
        let mean = sum / inputs.len() as f64;
        log::debug!("fine-tune epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Head-only training on fixed embeddings `[n × d]`.
pub fn train_head(
    head: &mut crate::model::MlpHead<f32>,
    embeddings: &Tensor<f32>,
    labels: &[usize],
    cfg: &FinetuneConfig,
    prng: &mut Prng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = embeddings.rows();
    if n == 0 || n != labels.len() {
        bail!(Shape, "{n} embeddings for {} labels", labels.len());
    }
    let classes = head.num_classes();
    check_labels(labels, classes)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        prng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| embeddings.row(i)).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            head.zero_grad();
            let (logits, hc) = head.forward(&Tensor::from_rows(&rows))?;
            let (loss, grad) = cross_entropy(logits.data(), classes, &y)?;
            head.backward(&hc, &Tensor::from_vec(logits.dims(), grad)?);
            adam.step(&mut [head]);
            sum += loss as f64 * chunk.len() as f64;
        }
        curve.push(sum / n as f64);
    }
    Ok(curve)
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        bail!(Shape, "{} predictions for {} labels", preds.len(), labels.len());
    }
    check_labels(preds, classes)?;
    check_labels(labels, classes)?;
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Precision, recall and F1 of one class; `None` when it has no true instances.
pub fn class_scores(cm: &ConfusionMatrix, class: usize) -> Option<(f64, f64, f64)> {
    let support: u64 = cm.counts[class].iter().sum();
    if support == 0 {
        return None;
    }
    let tp = cm.counts[class][class] as f64;
    let predicted: u64 = cm.counts.iter().map(|r| r[class]).sum();
    let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
    let recall = tp / support as f64;
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Some((precision, recall, f1))
}

/// Unweighted mean F1 over classes that occur among the true labels.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let scores: Vec<f64> = (0..cm.classes()).filter_map(|c| class_scores(cm, c)).map(|s| s.2).collect();
    if scores.is_empty() {
        bail!(UndefinedMetric, "macro F1 of an empty confusion matrix");
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub mode: usize,
    pub label: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Always "macro": unweighted over classes present in the labels.
    pub averaging: String,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
}

/// Predicts every input and scores the predictions.
pub fn evaluate(classifier: &Classifier, inputs: &[LogMelSpectrogram], labels: &[usize]) -> Result<F1Report> {
    if inputs.is_empty() {
        bail!(EmptyInput, "evaluation set is empty");
    }
    let preds = inputs.iter().map(|s| classifier.predict(s).map(|p| p.mode)).collect::<Result<Vec<_>>>()?;
    report(classifier, &preds, labels)
}

pub fn report(classifier: &Classifier, preds: &[usize], labels: &[usize]) -> Result<F1Report> {
    let cm = confusion(preds, labels, classifier.num_classes())?;
    let macro_f1 = macro_f1(&cm)?;
    let per_class = (0..cm.classes())
        .filter_map(|c| {
            class_scores(&cm, c).map(|(precision, recall, f1)| ClassReport {
                mode: c,
                label: classifier.label(c),
                support: cm.counts[c].iter().sum(),
                precision,
                recall,
                f1,
            })
        })
        .collect();
    Ok(F1Report { averaging: "macro".into(), macro_f1, per_class, confusion: cm })
}

/// Seeded partition of `0..n` into (train, test) with `test` elements in the second part.
pub fn seeded_split(n: usize, test: usize, prng: &mut Prng) -> Result<(Vec<usize>, Vec<usize>)> {
    if test > n {
        bail!(Config, "cannot hold out {test} of {n} items");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    prng.shuffle(&mut idx);
    let test_idx = idx.split_off(n - test);
    idx.sort_unstable();
    let mut test_idx = test_idx;
    test_idx.sort_unstable();
    Ok((idx, test_idx))
}

/// Computes spectrograms for labelled clips.
pub fn spectrograms(front: &FrontEnd, clips: &[LabeledClip]) -> Result<(Vec<LogMelSpectrogram>, Vec<usize>)> {
    let specs = clips.iter().map(|c| front.clip_to_spectrogram(&c.clip)).collect::<Result<Vec<_>>>()?;
    Ok((specs, clips.iter().map(|c| c.mode).collect()))
}

/// One line of a labelled-corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub offset_s: u64,
    pub mode: usize,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Loads every manifest clip; relative paths resolve against `base`.
pub fn load_manifest_clips(entries: &[ManifestEntry], base: &Path) -> Result<Vec<LabeledClip>> {
    let mut cache: HashMap<&str, AudioBuffer> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if !cache.contains_key(e.path.as_str()) {
            let buf = load_wav(base.join(&e.path))?;
            let buf = if buf.sample_rate == SAMPLE_RATE { buf } else { resample(&buf, SAMPLE_RATE)? };
            cache.insert(&e.path, buf);
        }
        let buf = &cache[e.path.as_str()];
        let n = SAMPLE_RATE as usize;
        let start = e.offset_s as usize * n;
        if start + n > buf.samples.len() {
            bail!(Config, "{}: offset {} s lies past the end of the recording", e.path, e.offset_s);
        }
        let clip = AudioClip::new(
            buf.samples[start..start + n].to_vec(),
            SAMPLE_RATE,
            ClipOrigin { source: e.path.clone(), index: e.offset_s as usize },
        )?;
        out.push(LabeledClip { clip, mode: e.mode });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, MlpHead, ModelConfig};

    #[test]
    fn reference_two_class_matrix() {
        let cm = ConfusionMatrix { counts: vec![vec![8, 2], vec![3, 7]] };
        let f0 = class_scores(&cm, 0).unwrap().2;
        let f1 = class_scores(&cm, 1).unwrap().2;
        assert!((f0 - 16.0 / 21.0).abs() < 1e-12);
        assert!((f1 - 14.0 / 19.0).abs() < 1e-12);
        let m = macro_f1(&cm).unwrap();
        assert!((m - (16.0 / 21.0 + 14.0 / 19.0) / 2.0).abs() < 1e-12);
        assert!((m - 0.7494).abs() < 1e-4);
    }

    #[test]
    fn degenerate_matrices() {
        assert!(matches!(macro_f1(&ConfusionMatrix::zeros(3)), Err(crate::Error::UndefinedMetric(_))));
        let diag = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(macro_f1(&diag).unwrap(), 1.0);
        let single = confusion(&[1, 1], &[1, 1], 4).unwrap();
        assert_eq!(macro_f1(&single).unwrap(), 1.0);
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(confusion(&[0], &[], 3).is_err());
    }

    #[test]
    fn split_is_partition() {
        let (a, b) = seeded_split(25, 7, &mut Prng::new(3)).unwrap();
        assert_eq!(b.len(), 7);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn separable_embeddings_train_to_low_loss() {
        let mut head = MlpHead::<f32>::new(8, 4, 1).unwrap();
        let mut p = Prng::new(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 4;
            let mut r: Vec<f32> = (0..8).map(|_| 0.1 * p.normal() as f32).collect();
            r[c] += 2.0;
            rows.push(r);
            labels.push(c);
        }
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let emb = Tensor::from_rows(&refs);
        let curve = train_head(&mut head, &emb, &labels, &FinetuneConfig::default(), &mut p).unwrap();
        assert!(*curve.last().unwrap() < 0.01, "{curve:?}");
    }

    #[test]
    fn zero_lr_leaves_weights_and_frozen_backbone_untouched() {
        let bb = Backbone::<f32>::new(ModelConfig::child(16, 1, 1), 1).unwrap();
        let head = MlpHead::<f32>::new(16, 3, 2).unwrap();
        let mut c = Classifier::new(bb, head, Default::default()).unwrap();
        let specs: Vec<LogMelSpectrogram> = (0..3)
            .map(|i| {
                let mut p = Prng::new(i);
                LogMelSpectrogram {
                    values: (0..128 * 128).map(|_| p.normal() as f32).collect(),
                    n_mels: 128,
                    n_frames: 128,
                    origin: Default::default(),
                }
            })
            .collect();
        let before = (c.backbone.value_bytes(), c.head.value_bytes());
        let cfg = FinetuneConfig { epochs: 2, lr: 0.0, ..Default::default() };
        finetune(&mut c, &specs, &[0, 1, 2], &cfg, &mut Prng::new(0)).unwrap();
        assert_eq!((c.backbone.value_bytes(), c.head.value_bytes()), before);

        let cfg = FinetuneConfig { epochs: 2, freeze_backbone: true, ..Default::default() };
        finetune(&mut c, &specs, &[0, 1, 2], &cfg, &mut Prng::new(0)).unwrap();
        assert_eq!(c.backbone.value_bytes(), before.0);
        assert_ne!(c.head.value_bytes(), before.1);
        assert!(matches!(finetune(&mut c, &specs, &[0, 1, 5], &cfg, &mut Prng::new(0)), Err(crate::Error::Domain(_))));
    }
}
