//! Masked student–teacher pretraining of a small parent-family model on
//! synthetic machine sounds, printing the per-epoch loss curve.
//!
//! `cargo run --example pretrain_parent -- [epochs] [clips]`

use kilosound::dsp::{synthetic_corpus, FrontEnd, SAMPLE_RATE};
use kilosound::model::ModelConfig;
use kilosound::nn::Prng;
use kilosound::pretrain::{pretrain_run, write_loss_csv, PretrainConfig, StudentTeacherPair};

fn main() -> kilosound::Result<()> {
    let mut args = std::env::args().skip(1).filter_map(|a| a.parse::<usize>().ok());
    let epochs = args.next().unwrap_or(10);
    let clips = args.next().unwrap_or(64);

    let front = FrontEnd::standard();
    let specs = synthetic_corpus(clips, SAMPLE_RATE, 11)?
        .iter()
        .map(|c| front.clip_to_spectrogram(c))
        .collect::<kilosound::Result<Vec<_>>>()?;

    let mut pair = StudentTeacherPair::new(ModelConfig::parent(64, 4), 5)?;
    let cfg = PretrainConfig { epochs, ..Default::default() };
    let curve = pretrain_run(&mut pair, &specs, &cfg, &mut Prng::new(6))?;
    write_loss_csv(std::io::stdout(), &curve)?;
    println!("teacher synchronized with student: {}", pair.teacher_matches_student());
    Ok(())
}
