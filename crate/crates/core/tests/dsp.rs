use std::f64::consts::TAU;

use kilosound::dsp::{
    hz_to_mel, mel_to_hz, read_wav, resample, segment_clips, write_wav_pcm16, AudioBuffer, AudioClip, ClipOrigin,
    FrontEnd, MelFilterbank, SAMPLE_RATE,
};
use kilosound::Error;

fn sine(freq: f64, rate: u32, secs: f64) -> AudioBuffer {
    let n = (rate as f64 * secs) as usize;
    AudioBuffer::new((0..n).map(|i| (0.5 * (TAU * freq * i as f64 / rate as f64).sin()) as f32).collect(), rate).unwrap()
}

#[test]
fn resampled_sine_tracks_the_analytic_waveform() {
    let out = resample(&sine(440.0, 44_100, 2.0), SAMPLE_RATE).unwrap();
    assert_eq!(out.sample_rate, SAMPLE_RATE);
    assert_eq!(out.samples.len(), 96_000);
    let worst = out
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - 0.5 * (TAU * 440.0 * i as f64 / SAMPLE_RATE as f64).sin()).abs())
        .take(95_900)
        .fold(0.0, f64::max);
    // Linear interpolation error bound: (step²/8)·max|x''|.
    let step = 1.0 / 44_100.0;
    let bound = step * step / 8.0 * 0.5 * (TAU * 440.0).powi(2);
    assert!(worst <= bound + 1e-6, "worst {worst} bound {bound}");
}

#[test]
fn wav_round_trip_through_pcm16() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let buf = sine(1000.0, SAMPLE_RATE, 1.5);
    write_wav_pcm16(&path, &buf).unwrap();
    let back = read_wav(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.sample_rate, SAMPLE_RATE);
    assert_eq!(back.samples.len(), buf.samples.len());
    for (a, b) in buf.samples.iter().zip(&back.samples) {
        assert!((a - b).abs() <= 1.0 / 32_767.0);
    }
    let clips = segment_clips(&back, "tone").unwrap();
    assert_eq!(clips.len(), 1);
    assert_eq!(clips[0].origin, ClipOrigin { source: "tone".into(), index: 0 });
}

#[test]
fn short_buffers_and_bad_clips_are_rejected() {
    let short = sine(100.0, SAMPLE_RATE, 0.5);
    assert!(matches!(segment_clips(&short, "s"), Err(Error::EmptyInput(_))));
    assert!(AudioClip::new(vec![0.0; 100], SAMPLE_RATE, ClipOrigin::default()).is_err());
    assert!(AudioBuffer::new(vec![f32::NAN], SAMPLE_RATE).is_err());
}

#[test]
fn mel_scale_round_trips_and_filters_cover_the_band() {
    for f in [0.0, 100.0, 700.0, 1000.0, 8000.0, 24_000.0] {
        assert!((mel_to_hz(hz_to_mel(f).unwrap()) - f).abs() < 1e-6 * f.max(1.0));
    }
    let fb = MelFilterbank::new(SAMPLE_RATE, 1024, 128).unwrap();
    let dense = fb.dense();
    assert_eq!(dense.len(), 128);
    assert!(dense.iter().all(|row| row.iter().any(|&w| w > 0.0)));
}

#[test]
fn louder_tone_lands_in_the_matching_mel_band() {
    let front = FrontEnd::standard();
    let low = sine(300.0, SAMPLE_RATE, 1.0);
    let high = sine(6000.0, SAMPLE_RATE, 1.0);
    let peak_band = |buf: AudioBuffer| {
        let clip = AudioClip::new(buf.samples, SAMPLE_RATE, ClipOrigin::default()).unwrap();
        let spec = front.clip_to_spectrogram(&clip).unwrap();
        (0..spec.n_mels).max_by(|&a, &b| spec.at(a, 64).total_cmp(&spec.at(b, 64))).unwrap()
    };
    assert!(peak_band(low) < peak_band(high));
}
