use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::audio::{AudioClip, ClipOrigin};
use crate::dsp::mel::MelFilterbank;
use crate::error::{bail, Result};

pub const SAMPLE_RATE: u32 = 48_000;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = 128;

/// Short-time Fourier transform settings. The window is always a periodic Hann.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    /// Reflect-pad `n_fft/2` samples on both sides before framing.
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 2048, win_length: 2048, hop_length: 376, center: true }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            bail!(Config, "hop length must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            bail!(Config, "window length {} must be in 1..={}", self.win_length, self.n_fft);
        }
        Ok(())
    }

    pub fn frames(&self, samples: usize) -> usize {
        if self.center {
            1 + samples / self.hop_length
        } else if samples < self.n_fft {
            0
        } else {
            1 + (samples - self.n_fft) / self.hop_length
        }
    }
}

/// Everything needed to turn a clip into model input. Stored in checkpoints
/// so inference reproduces training-time preprocessing exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub mel_scale: String,
    pub mel_norm: String,
    pub top_db: f64,
    pub amin: f64,
    /// Per-clip zero-mean/unit-variance after the dB transform.
    pub standardize: bool,
    pub var_floor: f64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            stft: StftConfig::default(),
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: SAMPLE_RATE as f64 / 2.0,
            mel_scale: "slaney".into(),
            mel_norm: "slaney".into(),
            top_db: 80.0,
            amin: 1e-10,
            standardize: true,
            var_floor: 1e-8,
        }
    }
}

/// `n_mels × n_frames` log-mel image, row-major by mel band.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub origin: ClipOrigin,
}

impl LogMelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }
}

/// Precomputed window, filterbank and FFT plan. Immutable and shareable.
pub struct FrontEnd {
    settings: Preprocessing,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrontEnd").field("settings", &self.settings).finish_non_exhaustive()
    }
}

/// Periodic Hann window of length `win`, centred inside `n_fft` samples.
fn padded_hann(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win) / 2;
    for i in 0..win {
        w[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos();
    }
    w
}

impl FrontEnd {
    pub fn new(settings: Preprocessing) -> Result<Self> {
        settings.stft.validate()?;
        if settings.mel_scale != "slaney" || settings.mel_norm != "slaney" {
            bail!(Config, "only the slaney mel scale and normalisation are implemented");
        }
        if !(settings.top_db > 0.0) || !(settings.amin > 0.0) {
            bail!(Config, "top_db and amin must be positive");
        }
        let filterbank = MelFilterbank::with_range(
            settings.sample_rate,
            settings.stft.n_fft,
            settings.n_mels,
            settings.f_min,
            settings.f_max,
        )?;
        let window = padded_hann(settings.stft.win_length, settings.stft.n_fft);
        let fft = FftPlanner::new().plan_fft_forward(settings.stft.n_fft);
        Ok(Self { settings, filterbank, window, fft })
    }

    pub fn standard() -> Self {
        Self::new(Preprocessing::default()).expect("default preprocessing is valid")
    }

    pub fn settings(&self) -> &Preprocessing {
        &self.settings
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != self.settings.sample_rate {
            bail!(
                Precondition,
                "clip is {} Hz but the front end expects {} Hz; resample first",
                clip.sample_rate,
                self.settings.sample_rate
            );
        }
        Ok(())
    }

    /// Mel power `|X|²·W` as `[n_mels × frames]`.
    pub fn mel_power(&self, samples: &[f32]) -> Result<(Vec<f64>, usize)> {
        let cfg = self.settings.stft;
        let n_fft = cfg.n_fft;
        let pad = if cfg.center { n_fft / 2 } else { 0 };
        if cfg.center && samples.len() <= pad {
            bail!(Precondition, "signal of {} samples too short for reflect padding of {pad}", samples.len());
        }
        let n = samples.len();
        let padded_at = |i: usize| -> f64 {
            // Reflect without repeating the edge sample.
            let j = i as isize - pad as isize;
            let k = if j < 0 {
                (-j) as usize
            } else if j as usize >= n {
                2 * (n - 1) - j as usize
            } else {
                j as usize
            };
            samples[k] as f64
        };
        let frames = cfg.frames(n);
        let n_mels = self.filterbank.n_mels();
        let n_bins = n_fft / 2 + 1;
        let mut out = vec![0.0; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut mel = vec![0.0; n_mels];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded_at(start + i) * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            for (m, &v) in mel.iter().enumerate() {
                out[m * frames + t] = v;
            }
        }
        Ok((out, frames))
    }

    /// Clamped decibel image before standardisation: `max − min ≤ top_db`.
    pub fn clip_to_db(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        let (power, _) = self.mel_power(&clip.samples)?;
        let amin = self.settings.amin;
        let mut db: Vec<f64> = power.iter().map(|&s| 10.0 * s.max(amin).log10()).collect();
        let peak = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = peak - self.settings.top_db;
        db.iter_mut().for_each(|v| *v = v.max(floor));
        Ok(db)
    }

    /// Clip → `n_mels × frames` log-mel spectrogram, standardised per clip.
    pub fn clip_to_spectrogram(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        let db = self.clip_to_db(clip)?;
        let n_mels = self.filterbank.n_mels();
        let n_frames = db.len() / n_mels;
        let values = if self.settings.standardize {
            let n = db.len() as f64;
            let mean = db.iter().sum::<f64>() / n;
            let var = db.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / var.max(self.settings.var_floor).sqrt();
            db.iter().map(|v| ((v - mean) * inv) as f32).collect()
        } else {
            db.iter().map(|&v| v as f32).collect()
        };
        Ok(LogMelSpectrogram { values, n_mels, n_frames, origin: clip.origin.clone() })
    }
}
