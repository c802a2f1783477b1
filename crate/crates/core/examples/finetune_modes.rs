//! Fine-tunes an L19-shaped classifier on ten synthetic machining modes
//! (20 one-second clips per mode) and scores it on 10 held-out clips per mode.
//!
//! `cargo run --example finetune_modes -- [epochs] [--frozen]`

use std::time::Instant;

use kilosound::dsp::{cnc_mode_specs, labelled_corpus, FrontEnd, SAMPLE_RATE};
use kilosound::finetune::{evaluate, finetune, FinetuneConfig, ModeTaxonomy};
use kilosound::model::{Backbone, Classifier, MlpHead, ModelConfig};
use kilosound::nn::Prng;

fn main() -> kilosound::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.iter().find_map(|a| a.parse().ok()).unwrap_or(200);
    let frozen = args.iter().any(|a| a == "--frozen");

    let front = FrontEnd::standard();
    let taxonomy = ModeTaxonomy::cnc();
    let corpus = labelled_corpus(&cnc_mode_specs(), 30, SAMPLE_RATE, 7)?;
    let (mut train, mut train_y, mut test, mut test_y) = (vec![], vec![], vec![], vec![]);
    let mut seen = vec![0; taxonomy.len()];
    for (clip, mode) in &corpus {
        let spec = front.clip_to_spectrogram(clip)?;
        if seen[*mode] < 20 {
            train.push(spec);
            train_y.push(*mode);
        } else {
            test.push(spec);
            test_y.push(*mode);
        }
        seen[*mode] += 1;
    }

    let cfg = ModelConfig::child(64, 2, 1);
    let backbone = Backbone::new(cfg, 1)?;
    let head = MlpHead::new(cfg.embed_dim, taxonomy.len(), 2)?;
    let mut classifier = Classifier::new(backbone, head, front.settings().clone())?;
    classifier.labels = taxonomy.labels();

    let ft = FinetuneConfig { epochs, freeze_backbone: frozen, ..Default::default() };
    let start = Instant::now();
    let curve = finetune(&mut classifier, &train, &train_y, &ft, &mut Prng::new(3))?;
    let secs = start.elapsed().as_secs_f64();
    println!("fine-tuned {} clips for {epochs} epochs in {secs:.1} s, final loss {:.4}", train.len(), curve.last().unwrap());

    let report = evaluate(&classifier, &test, &test_y)?;
    for c in &report.per_class {
        println!("{:<48} F1 {:.3}", c.label, c.f1);
    }
    println!("macro F1 {:.4}", report.macro_f1);
    Ok(())
}
