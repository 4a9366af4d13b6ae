// temporary exploration harness; deleted before ship
mod common;

use common::*;
use mmt_core::infer::similarity_probe;
use mmt_core::losses::LossWeights;
use mmt_core::model::ModelConfig;
use mmt_core::rng::RngStream;
use mmt_core::train::{AdamConfig, Trainer, TrainerConfig};

fn run_c5(
    d_model: usize,
    dropout: f32,
    noise: f32,
    warmup: u64,
    lr: f64,
    epochs: u64,
    gamma: f32,
    seed: u64,
) -> (f64, f64) {
    let pairs = text_determined_corpus(24, 51);
    let d_feat = 16;
    let mut feat_rng = RngStream::named(51, "feats");
    let (vocab, examples, syn, aut) = build_dataset(&pairs, d_feat, |_| {
        let mut base: Vec<f32> = (0..d_feat).map(|_| feat_rng.normal() as f32).collect();
        let rms = (base.iter().map(|v| v * v).sum::<f32>() / d_feat as f32).sqrt();
        for v in &mut base {
            *v /= rms;
        }
        let noisy: Vec<f32> = base.iter().map(|v| v + noise * feat_rng.normal() as f32).collect();
        (noisy, base)
    });
    let model_cfg = ModelConfig {
        layers: 2,
        d_model,
        ffn_dim: 4 * d_model,
        heads: 2,
        dropout,
        d_feat,
        max_positions: 64,
        vocab_size: vocab.len(),
    };
    let cfg = TrainerConfig {
        seed,
        max_epochs: Some(epochs),
        max_steps: None,
        adam: AdamConfig { lr, warmup_steps: warmup, ..AdamConfig::default() },
        update_freq: 1,
        token_budget: 24,
        checkpoint_every: None,
        keep_last: 10,
        label_smoothing: 0.1,
        weights: LossWeights { lambda: 0.5, gamma },
    };
    let mut trainer = Trainer::new(model_cfg, cfg).unwrap();
    let mut last_ot = 0.0;
    trainer
        .run(&examples, &syn, &aut, None, |e| {
            if let mmt_core::train::TrainEvent::Step(s) = e {
                last_ot = s.l_ot;
            }
        })
        .unwrap();
    let ids: Vec<String> = examples.iter().map(|e| e.image_id.clone()).collect();
    let report = similarity_probe(&mut trainer.model, &ids, &syn, &aut).unwrap();
    (report.mean, last_ot)
}

#[test]
#[ignore]
fn explore_c5() {
    for d_model in [16usize] {
        for noise in [0.2f32, 0.25] {
            for gamma in [0.0f32, 0.1] {
                let t0 = std::time::Instant::now();
                for seed in [1u64, 2] { for epochs in [700u64, 1400] {
                let (cos, ot) = run_c5(d_model, 0.0, noise, 600, 2e-3, epochs, gamma, seed);
                println!(
                    "d={d_model} noise={noise} gamma={gamma} seed={seed} ep={epochs}: cos={cos:.4} l_ot={ot:.5} t={:.0}s",
                    t0.elapsed().as_secs_f64()
                ); } }
            }
        }
    }
}
