use std::path::Path;

use serde::Serialize;

use crate::dsp::{FrontEnd, LogMelSpectrogram, Preprocessing};
use crate::error::{bail, Result};
use crate::nn::layers::softmax_rows;
use crate::nn::{Parameters, Tensor};

use super::backbone::Backbone;
use super::checkpoint::{Checkpoint, CheckpointConfig, CheckpointKind};
use super::config::{CountScope, INPUT_SIZE};
use super::head::MlpHead;

/// Argmax class with its softmax probability.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub mode: usize,
    pub confidence: f32,
}

impl Prediction {
    /// Ties go to the lowest class id.
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        if logits.is_empty() {
            bail!(Shape, "no logits");
        }
        let mut mode = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[mode] {
                mode = i;
            }
        }
        let mut probs = logits.to_vec();
        softmax_rows(&mut probs, logits.len());
        Ok(Self { mode, confidence: probs[mode] })
    }
}

/// Backbone, head and the preprocessing the pair was trained with.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone<f32>,
    pub head: MlpHead<f32>,
    pub preprocessing: Preprocessing,
    /// Human-readable class names; may be empty.
    pub labels: Vec<String>,
}

impl Classifier {
    pub fn new(backbone: Backbone<f32>, head: MlpHead<f32>, preprocessing: Preprocessing) -> Result<Self> {
        if head.embed_dim() != backbone.embed_dim() {
            bail!(Config, "head width {} does not match backbone width {}", head.embed_dim(), backbone.embed_dim());
        }
        Ok(Self { backbone, head, preprocessing, labels: Vec::new() })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn label(&self, mode: usize) -> String {
        self.labels.get(mode).cloned().unwrap_or_else(|| format!("mode {mode}"))
    }

    pub fn count_params(&self, scope: CountScope) -> usize {
        match scope {
            CountScope::Blocks => self.backbone.count_params(CountScope::Blocks),
            CountScope::Full => self.backbone.num_params() + self.head.num_params(),
        }
    }

    /// Logits `[batch × classes]` for standardized 128×128 inputs.
    pub fn logits(&self, inputs: &[&[f32]]) -> Result<Tensor<f32>> {
        let emb = self.backbone.cls_embeddings(inputs)?;
        self.head.logits(&emb)
    }

    pub fn predict(&self, spec: &LogMelSpectrogram) -> Result<Prediction> {
        if spec.n_mels != INPUT_SIZE || spec.n_frames != INPUT_SIZE {
            bail!(Config, "classifier expects {INPUT_SIZE}×{INPUT_SIZE}, got {}×{}", spec.n_mels, spec.n_frames);
        }
        let logits = self.logits(&[&spec.values])?;
        Prediction::from_logits(logits.row(0))
    }

    /// Refuses a front end whose settings differ from the training ones.
    pub fn check_front_end(&self, front: &FrontEnd) -> Result<()> {
        if front.settings() != &self.preprocessing {
            bail!(Config, "preprocessing settings differ from the checkpoint's");
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cfg = CheckpointConfig::new(CheckpointKind::Classifier, self.backbone.config, self.preprocessing.clone());
        cfg.num_classes = Some(self.num_classes());
        cfg.labels = self.labels.clone();
        Checkpoint::capture(cfg, &[&self.backbone, &self.head])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.config;
        if cfg.kind != CheckpointKind::Classifier {
            bail!(Config, "expected a classifier checkpoint, found {:?}", cfg.kind);
        }
        let Some(classes) = cfg.num_classes else {
            bail!(Config, "classifier checkpoint lacks num_classes");
        };
        let mut backbone = Backbone::new(cfg.model, 0)?;
        let mut head = MlpHead::new(cfg.model.embed_dim, classes, 0)?;
        ck.restore(&mut [&mut backbone, &mut head])?;
        let mut c = Self::new(backbone, head, cfg.preprocessing.clone())?;
        c.labels = cfg.labels.clone();
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Loads a bare backbone from any checkpoint kind, ignoring extra modules.
pub fn load_backbone(path: impl AsRef<Path>) -> Result<(Backbone<f32>, Preprocessing)> {
    let ck = Checkpoint::load(path)?;
    backbone_from_checkpoint(&ck)
}

pub fn backbone_from_checkpoint(ck: &Checkpoint) -> Result<(Backbone<f32>, Preprocessing)> {
    let mut bb = Backbone::new(ck.config.model, 0)?;
    let names: Vec<String> = bb.params().iter().map(|p| p.name.clone()).collect();
    let sub = Checkpoint {
        config: ck.config.clone(),
        tensors: ck.tensors.iter().filter(|(n, _)| names.contains(n)).cloned().collect(),
    };
    sub.restore(&mut [&mut bb])?;
    Ok((bb, ck.config.preprocessing.clone()))
}

pub fn save_backbone(bb: &Backbone<f32>, preprocessing: &Preprocessing, path: impl AsRef<Path>) -> Result<()> {
    let cfg = CheckpointConfig::new(CheckpointKind::Backbone, bb.config, preprocessing.clone());
    Checkpoint::capture(cfg, &[bb]).save(path)
}
