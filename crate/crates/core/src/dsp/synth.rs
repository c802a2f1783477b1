//! Deterministic synthetic machine sounds: a harmonic stack plus
//! band-limited Gaussian noise at a chosen SNR.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::audio::{AudioClip, ClipOrigin};
use crate::error::{bail, Result};
use crate::nn::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpec {
    pub mode_id: usize,
    pub base_freq: f64,
    pub harmonics: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    /// Harmonic-to-noise power ratio; `f64::INFINITY` disables noise.
    pub snr_db: f64,
}

/// Peak amplitude of the fundamental.
const BASE_AMPLITUDE: f64 = 0.3;

impl ModeSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        if !(self.base_freq > 0.0 && self.base_freq < nyq) {
            bail!(Config, "mode {}: base frequency {} outside (0, {nyq})", self.mode_id, self.base_freq);
        }
        if self.harmonics == 0 {
            bail!(Config, "mode {}: need at least one harmonic", self.mode_id);
        }
        if !(self.noise_low >= 0.0 && self.noise_low < self.noise_high && self.noise_high <= nyq) {
            bail!(Config, "mode {}: bad noise band {}..{}", self.mode_id, self.noise_low, self.noise_high);
        }
        if self.snr_db.is_nan() {
            bail!(Config, "mode {}: SNR is NaN", self.mode_id);
        }
        Ok(())
    }
}

/// Ten modes shaped after a CNC milling run: off, idle, then four spindle
/// speeds at two axial depths. Tooth-passing frequency for a two-flute
/// cutter is `2·rpm/60`; deeper cuts carry more harmonics and broader noise.
pub fn cnc_mode_specs() -> Vec<ModeSpec> {
    let mut modes = vec![
        ModeSpec { mode_id: 0, base_freq: 50.0, harmonics: 1, noise_low: 20.0, noise_high: 2_000.0, snr_db: -5.0 },
        ModeSpec { mode_id: 1, base_freq: 120.0, harmonics: 3, noise_low: 500.0, noise_high: 6_000.0, snr_db: 5.0 },
    ];
    for (depth_idx, (harmonics, lo, hi, snr)) in [(4, 2_000.0, 8_000.0, 10.0), (8, 1_000.0, 12_000.0, 3.0)].into_iter().enumerate() {
        for (speed_idx, rpm) in [6_000.0, 8_000.0, 10_000.0, 12_000.0].into_iter().enumerate() {
            modes.push(ModeSpec {
                mode_id: 2 + depth_idx * 4 + speed_idx,
                base_freq: 2.0 * rpm / 60.0,
                harmonics,
                noise_low: lo,
                noise_high: hi,
                snr_db: snr,
            });
        }
    }
    modes
}

/// Band-limited white noise with unit mean power.
fn band_noise(n: usize, sample_rate: u32, lo: f64, hi: f64, prng: &mut Prng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(prng.normal(), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let bin_hz = sample_rate as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * bin_hz;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let power = out.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if power > 0.0 {
        let s = 1.0 / power.sqrt();
        out.iter_mut().for_each(|x| *x *= s);
    }
    out
}

/// One second of audio for `spec`. Identical `(spec, prng state)` gives
/// bitwise-identical output.
pub fn synth_mode_clip(spec: &ModeSpec, sample_rate: u32, prng: &mut Prng, origin: ClipOrigin) -> Result<AudioClip> {
    spec.validate(sample_rate)?;
    let n = sample_rate as usize;
    let nyq = sample_rate as f64 / 2.0;
    let mut x = vec![0.0f64; n];
    let mut signal_power = 0.0;
    for h in 1..=spec.harmonics {
        let f = spec.base_freq * h as f64;
        let phase = prng.uniform() * std::f64::consts::TAU;
        if f >= nyq {
            continue;
        }
        let amp = BASE_AMPLITUDE / h as f64;
        signal_power += amp * amp / 2.0;
        let w = std::f64::consts::TAU * f / sample_rate as f64;
        for (i, v) in x.iter_mut().enumerate() {
            *v += amp * (w * i as f64 + phase).sin();
        }
    }
    if spec.snr_db.is_finite() {
        let noise_power = signal_power / 10f64.powf(spec.snr_db / 10.0);
        let noise = band_noise(n, sample_rate, spec.noise_low, spec.noise_high, prng);
        let s = noise_power.sqrt();
        for (v, e) in x.iter_mut().zip(noise) {
            *v += s * e;
        }
    }
    AudioClip::new(x.into_iter().map(|v| v as f32).collect(), sample_rate, origin)
}

/// A random mode with the fundamental drawn log-uniformly from 60 Hz–4 kHz.
pub fn random_mode_spec(mode_id: usize, prng: &mut Prng) -> ModeSpec {
    let base_freq = (60f64.ln() + prng.uniform() * (4_000f64.ln() - 60f64.ln())).exp();
    let lo = prng.uniform_range(20.0, 4_000.0);
    let hi = (lo + prng.uniform_range(500.0, 12_000.0)).min(23_000.0);
    ModeSpec {
        mode_id,
        base_freq,
        harmonics: 1 + prng.below(8),
        noise_low: lo,
        noise_high: hi,
        snr_db: prng.uniform_range(-5.0, 20.0),
    }
}

/// Unlabelled clips from `n` independently drawn random modes.
pub fn synthetic_corpus(n: usize, sample_rate: u32, seed: u64) -> Result<Vec<AudioClip>> {
    let root = Prng::new(seed);
    (0..n)
        .map(|i| {
            let mut p = root.derive(i as u64);
            let spec = random_mode_spec(i, &mut p);
            synth_mode_clip(&spec, sample_rate, &mut p, ClipOrigin { source: format!("synthetic-{seed}"), index: i })
        })
        .collect()
}

/// `per_mode` clips of each spec, each drawn from its own derived stream.
pub fn labelled_corpus(specs: &[ModeSpec], per_mode: usize, sample_rate: u32, seed: u64) -> Result<Vec<(AudioClip, usize)>> {
    let root = Prng::new(seed);
    let mut out = Vec::with_capacity(specs.len() * per_mode);
    for spec in specs {
        for i in 0..per_mode {
            let mut p = root.derive(((spec.mode_id as u64) << 32) | i as u64);
            let origin = ClipOrigin { source: format!("mode{}", spec.mode_id), index: i };
            out.push((synth_mode_clip(spec, sample_rate, &mut p, origin)?, spec.mode_id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::spectrogram::FrontEnd;

    fn tone(freq: f64, harmonics: usize, snr_db: f64) -> ModeSpec {
        ModeSpec { mode_id: 0, base_freq: freq, harmonics, noise_low: 100.0, noise_high: 5_000.0, snr_db }
    }

    #[test]
    fn noiseless_single_harmonic_is_a_pure_sine() {
        let spec = tone(440.0, 1, f64::INFINITY);
        let c = synth_mode_clip(&spec, 48_000, &mut Prng::new(1), ClipOrigin::default()).unwrap();
        // Project onto sin/cos at 440 Hz; the residual must vanish.
        let w = std::f64::consts::TAU * 440.0 / 48_000.0;
        let (mut s, mut co) = (0.0, 0.0);
        for (i, &v) in c.samples.iter().enumerate() {
            s += v as f64 * (w * i as f64).sin();
            co += v as f64 * (w * i as f64).cos();
        }
        let (a, b) = (2.0 * s / 48_000.0, 2.0 * co / 48_000.0);
        let resid: f64 = c
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - a * (w * i as f64).sin() - b * (w * i as f64).cos()).powi(2))
            .sum::<f64>()
            / 48_000.0;
        assert!(resid < 1e-12, "residual power {resid}");
        assert!(((a * a + b * b).sqrt() - BASE_AMPLITUDE).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = tone(300.0, 4, 6.0);
        let a = synth_mode_clip(&spec, 48_000, &mut Prng::new(9), ClipOrigin::default()).unwrap();
        let b = synth_mode_clip(&spec, 48_000, &mut Prng::new(9), ClipOrigin::default()).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn different_fundamentals_peak_in_different_bands() {
        let fe = FrontEnd::standard();
        let peak_row = |f: f64| {
            let c = synth_mode_clip(&tone(f, 1, 30.0), 48_000, &mut Prng::new(2), ClipOrigin::default()).unwrap();
            let db = fe.clip_to_db(&c).unwrap();
            let rows: Vec<f64> = db.chunks(128).map(|r| r.iter().sum::<f64>()).collect();
            rows.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0
        };
        assert_ne!(peak_row(500.0), peak_row(2_000.0));
    }

    #[test]
    fn cnc_modes_are_valid_and_distinct() {
        let modes = cnc_mode_specs();
        assert_eq!(modes.len(), 10);
        for (i, m) in modes.iter().enumerate() {
            assert_eq!(m.mode_id, i);
            m.validate(48_000).unwrap();
        }
        assert!((modes[2].base_freq - 200.0).abs() < 1e-9);
        assert!((modes[9].base_freq - 400.0).abs() < 1e-9);
    }

    #[test]
    fn above_nyquist_fundamental_rejected() {
        assert!(tone(24_000.0, 1, 0.0).validate(48_000).is_err());
    }
}
