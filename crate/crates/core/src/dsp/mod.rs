//! Audio decoding, resampling, clip segmentation, log-mel front end and
//! synthetic corpora.

pub mod audio;
pub mod mel;
pub mod spectrogram;
pub mod synth;

pub use audio::{load_wav, read_wav, resample, segment_clips, write_wav_pcm16, AudioBuffer, AudioClip, ClipOrigin};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use spectrogram::{FrontEnd, LogMelSpectrogram, Preprocessing, StftConfig, N_FRAMES, N_MELS, SAMPLE_RATE};
pub use synth::{cnc_mode_specs, labelled_corpus, synth_mode_clip, synthetic_corpus, ModeSpec};
