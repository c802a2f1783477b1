//! Distills an L19-shaped student (d=64, 2 layers, expansion 1, ReLU) from a
//! frozen parent and exports it without the projection head.
//!
//! `cargo run --example distill_student -- [steps] [out.lstn]`

use kilosound::distill::{distill_run, export_student, DistillConfig};
use kilosound::dsp::{synthetic_corpus, FrontEnd, SAMPLE_RATE};
use kilosound::model::{load_backbone, Backbone, CountScope, ModelConfig};
use kilosound::nn::{Parameters, Prng};

fn main() -> kilosound::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|a| a.parse().ok()).unwrap_or(600);
    let out = args.get(1).cloned().unwrap_or_else(|| std::env::temp_dir().join("student.lstn").display().to_string());

    let front = FrontEnd::standard();
    let specs = |n, seed| -> kilosound::Result<Vec<_>> {
        synthetic_corpus(n, SAMPLE_RATE, seed)?.iter().map(|c| front.clip_to_spectrogram(c)).collect()
    };
    let train = specs(128, 1)?;
    let heldout = specs(32, 2)?;

    let parent = Backbone::<f32>::new(ModelConfig::parent(64, 4), 9)?;
    let cfg = DistillConfig { epochs: 1000, max_steps: Some(steps), ..Default::default() };
    let outcome = distill_run(&parent, &train, &heldout, &cfg, &mut Prng::new(3))?;
    for e in &outcome.curve {
        println!("epoch {:>3} step {:>5}: held-out mse {:.5}, cosine {:.4}", e.epoch, e.steps, e.heldout_mse, e.heldout_cosine);
    }

    export_student(&outcome.student, front.settings(), &out)?;
    let (student, _) = load_backbone(&out)?;
    println!(
        "{out}: {} bytes, {} block parameters, {} total",
        std::fs::metadata(&out)?.len(),
        student.count_params(CountScope::Blocks),
        student.num_params()
    );
    Ok(())
}
