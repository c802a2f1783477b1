use std::io::{ErrorKind, Read};
use std::path::PathBuf;
use std::time::Duration;

use super::queue::BoundedQueue;
use crate::dsp::{load_wav, resample, segment_clips, AudioClip, ClipOrigin, SAMPLE_RATE};
use crate::error::Result;

/// Where monitored audio comes from.
pub enum ClipSource {
    /// A WAV file, resampled to 48 kHz and cut into back-to-back seconds.
    Wav(PathBuf),
    /// Headerless signed 16-bit little-endian mono at 48 kHz.
    Pcm(Box<dyn Read + Send>),
    /// Clips already in memory.
    Clips(Vec<AudioClip>),
}

/// A clip tagged with its position in the stream.
#[derive(Clone, Debug)]
pub struct QueuedClip {
    pub clip_id: u64,
    pub clip: AudioClip,
}

fn pcm_clip(bytes: &[u8], index: usize) -> Result<AudioClip> {
    let samples = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0).collect();
    AudioClip::new(samples, SAMPLE_RATE, ClipOrigin { source: "pcm".into(), index })
}

/// Producer loop: pushes clips in arrival order, sleeping `pace` between
/// clips when given, then closes the queue. Returns the number produced.
pub fn stream_clips(source: ClipSource, queue: &BoundedQueue<QueuedClip>, pace: Option<Duration>) -> Result<u64> {
    let mut next = 0u64;
    let mut emit = |clip: AudioClip| {
        if let Some(p) = pace.filter(|p| !p.is_zero()) {
            if next > 0 {
                std::thread::sleep(p);
            }
        }
        queue.push(QueuedClip { clip_id: next, clip });
        next += 1;
    };
    let result = (|| -> Result<()> {
        match source {
            ClipSource::Wav(path) => {
                let buf = load_wav(&path)?;
                let buf = if buf.sample_rate == SAMPLE_RATE { buf } else { resample(&buf, SAMPLE_RATE)? };
                for clip in segment_clips(&buf, &path.display().to_string())? {
                    emit(clip);
                }
            }
            ClipSource::Pcm(mut reader) => {
                let mut bytes = vec![0u8; SAMPLE_RATE as usize * 2];
                let mut index = 0;
                loop {
                    match reader.read_exact(&mut bytes) {
                        Ok(()) => {}
                        Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                        Err(e) => return Err(e.into()),
                    }
                    match pcm_clip(&bytes, index) {
                        Ok(c) => emit(c),
                        Err(e) => log::warn!("skipping undecodable clip {index}: {e}"),
                    }
                    index += 1;
                }
            }
            ClipSource::Clips(clips) => clips.into_iter().for_each(&mut emit),
        }
        Ok(())
    })();
    queue.close();
    result.map(|_| next)
}
