//! Turns one synthetic machining clip (or a WAV given as the first argument)
//! into a 128×128 log-mel spectrogram and prints a coarse text rendering.

use kilosound::dsp::{cnc_mode_specs, load_wav, resample, segment_clips, synth_mode_clip, ClipOrigin, FrontEnd, SAMPLE_RATE};
use kilosound::nn::Prng;

fn main() -> kilosound::Result<()> {
    let clip = match std::env::args().nth(1) {
        Some(path) => {
            let buf = resample(&load_wav(&path)?, SAMPLE_RATE)?;
            segment_clips(&buf, &path)?.remove(0)
        }
        None => synth_mode_clip(&cnc_mode_specs()[4], SAMPLE_RATE, &mut Prng::new(1), ClipOrigin::default())?,
    };
    let front = FrontEnd::standard();
    let db = front.clip_to_db(&clip)?;
    let (lo, hi) = db.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let spec = front.clip_to_spectrogram(&clip)?;
    println!("{} mel bands × {} frames, dynamic range {:.1} dB", spec.n_mels, spec.n_frames, hi - lo);

    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for mel in (0..spec.n_mels).rev().step_by(4) {
        let row: String = (0..spec.n_frames)
            .step_by(2)
            .map(|f| {
                let v = ((spec.at(mel, f) + 2.0) / 4.0).clamp(0.0, 0.999);
                shades[(v * shades.len() as f32) as usize]
            })
            .collect();
        println!("{mel:>3} {row}");
    }
    Ok(())
}
