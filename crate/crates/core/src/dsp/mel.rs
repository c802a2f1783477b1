//! Slaney-style mel scale and area-normalised triangular filterbank.

use crate::error::{bail, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Linear below 1 kHz (`3f/200`), logarithmic above (`15 + 27·ln(f/1000)/ln 6.4`).
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        bail!(Domain, "frequency must be non-negative, got {f}");
    }
    Ok(if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / log_step()
    })
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * ((m - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// One triangular filter stored over its contiguous nonzero support.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilter {
    pub start_bin: usize,
    pub weights: Vec<f32>,
    pub lower_hz: f64,
    pub center_hz: f64,
    pub upper_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub filters: Vec<MelFilter>,
}

impl MelFilterbank {
    /// Filters spanning `0 Hz ..= sample_rate/2`.
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Self> {
        Self::with_range(sample_rate, n_fft, n_mels, 0.0, sample_rate as f64 / 2.0)
    }

    pub fn with_range(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if n_mels == 0 {
            bail!(Config, "need at least one mel band");
        }
        if n_fft == 0 || n_fft % 2 != 0 {
            bail!(Config, "n_fft must be even and positive, got {n_fft}");
        }
        if !(f_min >= 0.0 && f_max > f_min && f_max <= sample_rate as f64 / 2.0) {
            bail!(Config, "invalid mel range {f_min}..{f_max} Hz at {sample_rate} Hz");
        }
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let m_lo = hz_to_mel(f_min)?;
        let m_hi = hz_to_mel(f_max)?;
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(n_mels);
        for i in 0..n_mels {
            let (lo, c, hi) = (edges[i], edges[i + 1], edges[i + 2]);
            let enorm = 2.0 / (hi - lo);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push((w * enorm) as f32);
                } else if start.is_some() {
                    break;
                }
            }
            let Some(start_bin) = start else {
                bail!(Config, "mel band {i} ({lo:.1}–{hi:.1} Hz) covers no FFT bin; n_mels too large for n_fft {n_fft}");
            };
            filters.push(MelFilter { start_bin, weights, lower_hz: lo, center_hz: c, upper_hz: hi });
        }
        Ok(Self { sample_rate, n_fft, f_min, f_max, filters })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Dense `[n_mels × n_bins]` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f32>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.n_bins()];
                row[f.start_bin..f.start_bin + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    /// Projects one power spectrum (`n_bins` values) onto the mel bands.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f
                .weights
                .iter()
                .zip(&power[f.start_bin..])
                .map(|(&w, &p)| w as f64 * p)
                .sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_reference_points() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(1000.0).unwrap() - 15.0).abs() < 1e-12);
        assert!((hz_to_mel(6400.0).unwrap() - 42.0).abs() < 1e-12);
        assert!(hz_to_mel(-1.0).is_err());
    }

    #[test]
    fn mel_round_trip_and_monotone() {
        let mut prev = -1.0;
        for k in 0..500 {
            let f = k as f64 * 50.0;
            let m = hz_to_mel(f).unwrap();
            assert!(m > prev);
            prev = m;
            assert!((mel_to_hz(m) - f).abs() < 1e-6 * f.max(1.0));
        }
    }

    #[test]
    fn standard_bank_shape_and_rows() {
        let fb = MelFilterbank::new(48_000, 2048, 128).unwrap();
        let dense = fb.dense();
        assert_eq!(dense.len(), 128);
        assert!(dense.iter().all(|r| r.len() == 1025));
        for row in &dense {
            assert!(row.iter().sum::<f32>() > 0.0);
            assert!(row.iter().all(|&w| w >= 0.0));
            // Single contiguous support.
            let nz: Vec<usize> = row.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        assert!(fb.filters.windows(2).all(|w| w[0].center_hz < w[1].center_hz));
    }

    #[test]
    fn centers_are_inverse_mel_of_interior_edges() {
        let fb = MelFilterbank::new(48_000, 2048, 128).unwrap();
        let top = hz_to_mel(24_000.0).unwrap();
        for (i, f) in fb.filters.iter().enumerate() {
            let want = mel_to_hz(top * (i + 1) as f64 / 129.0);
            assert!((f.center_hz - want).abs() < 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn interior_bins_are_covered() {
        let fb = MelFilterbank::new(48_000, 2048, 128).unwrap();
        let dense = fb.dense();
        for k in 1..1024 {
            assert!(dense.iter().any(|r| r[k] > 0.0), "bin {k} uncovered");
        }
    }

    #[test]
    fn too_many_bands_is_config_error() {
        assert!(matches!(MelFilterbank::new(48_000, 64, 128), Err(crate::Error::Config(_))));
        assert!(MelFilterbank::new(48_000, 2047, 10).is_err());
    }
}
