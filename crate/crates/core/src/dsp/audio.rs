use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{bail, Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            bail!(Domain, "sample rate must be positive");
        }
        if samples.iter().any(|x| !x.is_finite()) {
            bail!(Domain, "audio contains non-finite samples");
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Where a clip came from: a source identifier and its position in that source.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ClipOrigin {
    pub source: String,
    pub index: usize,
}

/// Exactly one second of mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub origin: ClipOrigin,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, origin: ClipOrigin) -> Result<Self> {
        if sample_rate == 0 || samples.len() != sample_rate as usize {
            bail!(Precondition, "a clip needs exactly one second of samples ({} at {} Hz)", samples.len(), sample_rate);
        }
        if samples.iter().any(|x| !x.is_finite()) {
            bail!(Domain, "clip contains non-finite samples");
        }
        Ok(Self { samples, sample_rate, origin })
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated WAV: {io}"))
        }
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
        hound::Error::Unsupported => Error::Unsupported("WAV encoding".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a RIFF/WAVE file (PCM16, PCM24 or IEEE float32), averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let file = File::open(path.as_ref())?;
    read_wav(BufReader::new(file))
}

pub fn read_wav<R: Read>(reader: R) -> Result<AudioBuffer> {
    let mut wav = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        bail!(Format, "WAV declares zero channels");
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => wav
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Int, 24) => wav
            .samples::<i32>()
            .map(|s| s.map(|v| v as f32 / 8_388_608.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => bail!(Unsupported, "{bits}-bit {fmt:?} WAV samples"),
    };
    let inv = 1.0 / channels as f32;
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() * inv)
        .collect();
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Writes mono PCM16 (used by tools and tests to produce fixtures).
pub fn write_wav_pcm16(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &buf.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

/// Linear-interpolation resampler. Lossy above the lower Nyquist limit.
pub fn resample(buf: &AudioBuffer, target: u32) -> Result<AudioBuffer> {
    if target == 0 {
        bail!(Domain, "target sample rate must be positive");
    }
    if target == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = &buf.samples;
    let out_len = (src.len() as f64 * target as f64 / buf.sample_rate as f64).round() as usize;
    let step = buf.sample_rate as f64 / target as f64;
    let last = src.len().saturating_sub(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let j = (pos.floor() as usize).min(last);
            let frac = (pos - j as f64).clamp(0.0, 1.0) as f32;
            let a = src[j];
            let b = src[(j + 1).min(last)];
            a + (b - a) * frac
        })
        .collect();
    Ok(AudioBuffer { samples, sample_rate: target })
}

/// Non-overlapping one-second clips; a trailing partial second is discarded.
pub fn segment_clips(buf: &AudioBuffer, source: &str) -> Result<Vec<AudioClip>> {
    let n = buf.sample_rate as usize;
    if buf.samples.len() < n {
        bail!(EmptyInput, "buffer holds {:.3} s, need at least 1 s", buf.duration_s());
    }
    Ok(buf
        .samples
        .chunks_exact(n)
        .enumerate()
        .map(|(index, s)| AudioClip {
            samples: s.to_vec(),
            sample_rate: buf.sample_rate,
            origin: ClipOrigin { source: source.to_string(), index },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn wav_bytes(spec: hound::WavSpec, write: impl FnOnce(&mut hound::WavWriter<&mut Cursor<Vec<u8>>>)) -> Vec<u8> {
        let mut cur = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cur, spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        cur.into_inner()
    }

    fn pcm16(channels: u16) -> hound::WavSpec {
        hound::WavSpec { channels, sample_rate: 48_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int }
    }

    #[test]
    fn silent_pcm16_second() {
        let bytes = wav_bytes(pcm16(1), |w| {
            for _ in 0..48_000 {
                w.write_sample(0i16).unwrap();
            }
        });
        let buf = read_wav(Cursor::new(bytes)).unwrap();
        assert_eq!(buf.sample_rate, 48_000);
        assert_eq!(buf.samples.len(), 48_000);
        assert!(buf.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale_positive() {
        let bytes = wav_bytes(pcm16(1), |w| w.write_sample(32767i16).unwrap());
        let buf = read_wav(Cursor::new(bytes)).unwrap();
        assert_eq!(buf.samples[0], 32767.0 / 32768.0);
    }

    #[test]
    fn antiphase_stereo_averages_to_silence() {
        let bytes = wav_bytes(pcm16(2), |w| {
            for _ in 0..100 {
                w.write_sample(16384i16).unwrap();
                w.write_sample(-16384i16).unwrap();
            }
        });
        let buf = read_wav(Cursor::new(bytes)).unwrap();
        assert_eq!(buf.samples.len(), 100);
        assert!(buf.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm24_and_float_are_accepted() {
        let spec24 = hound::WavSpec { bits_per_sample: 24, ..pcm16(1) };
        let bytes = wav_bytes(spec24, |w| w.write_sample(-8_388_608i32).unwrap());
        assert_eq!(read_wav(Cursor::new(bytes)).unwrap().samples, vec![-1.0]);

        let specf = hound::WavSpec { bits_per_sample: 32, sample_format: hound::SampleFormat::Float, ..pcm16(1) };
        let bytes = wav_bytes(specf, |w| w.write_sample(0.25f32).unwrap());
        assert_eq!(read_wav(Cursor::new(bytes)).unwrap().samples, vec![0.25]);
    }

    #[test]
    fn eight_bit_pcm_is_unsupported() {
        let spec8 = hound::WavSpec { bits_per_sample: 8, ..pcm16(1) };
        let bytes = wav_bytes(spec8, |w| w.write_sample(3i8).unwrap());
        assert!(matches!(read_wav(Cursor::new(bytes)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let err = read_wav(Cursor::new(b"RIFX\0\0\0\0WAVEfmt nonsense".to_vec())).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn resample_identity_and_constant() {
        let buf = AudioBuffer::new((0..480).map(|i| (i as f32 * 0.01).sin()).collect(), 48_000).unwrap();
        assert_eq!(resample(&buf, 48_000).unwrap(), buf);

        let c = AudioBuffer::new(vec![0.7; 44_100], 44_100).unwrap();
        let r = resample(&c, 48_000).unwrap();
        assert_eq!(r.sample_rate, 48_000);
        assert_eq!(r.samples.len(), 48_000);
        assert!(r.samples.iter().all(|&s| (s - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resample_length_rounds() {
        let b = AudioBuffer::new(vec![0.0; 1001], 16_000).unwrap();
        assert_eq!(resample(&b, 48_000).unwrap().samples.len(), 3003);
        assert_eq!(resample(&b, 22_050).unwrap().samples.len(), (1001.0f64 * 22_050.0 / 16_000.0).round() as usize);
    }

    #[test]
    fn segmentation_drops_partial_tail() {
        let b = AudioBuffer::new(vec![0.0; 48_000 * 7 / 2], 48_000).unwrap();
        let clips = segment_clips(&b, "x").unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips.iter().map(|c| c.origin.index).collect::<Vec<_>>(), vec![0, 1, 2]);

        let one = AudioBuffer::new(vec![0.0; 48_000], 48_000).unwrap();
        assert_eq!(segment_clips(&one, "x").unwrap().len(), 1);
        let twenty = AudioBuffer::new(vec![0.0; 48_000 * 20], 48_000).unwrap();
        assert_eq!(segment_clips(&twenty, "x").unwrap().len(), 20);
    }

    #[test]
    fn sub_second_buffer_is_empty_input() {
        let b = AudioBuffer::new(vec![0.0; 47_999], 48_000).unwrap();
        assert!(matches!(segment_clips(&b, "x"), Err(Error::EmptyInput(_))));
    }
}
