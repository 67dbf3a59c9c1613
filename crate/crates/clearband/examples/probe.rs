use std::time::Instant;

use clearband::dsp::stft::{analyze, synthesize};
use clearband::losses::si_snr_db;
use clearband::model::ModelConfig;
use clearband::pipeline::enhance_offline;
use clearband::trainer::toy::{eval_pairs, toy_pairs};
use clearband::trainer::{TrainConfig, Trainer, Utterance};

fn post_si(tr: &Trainer<f32>, pairs: &[Utterance<f32>]) -> f64 {
    let stft = tr.model_cfg.stft;
    let mut sum = 0.0;
    for u in pairs {
        let (cr, ci) = analyze(&u.clean, &stft).unwrap();
        let reference = synthesize(&cr, &ci, &stft).unwrap();
        let est = enhance_offline(&tr.params, &tr.buffers, &tr.model_cfg, &u.noisy, true).unwrap();
        sum += si_snr_db(&est, &reference).unwrap();
    }
    sum / pairs.len() as f64
}

fn main() {
    let model_cfg = ModelConfig::toy();
    let cfg = TrainConfig { val_every: 0, ..TrainConfig::default() };
    let mut tr = Trainer::<f32>::new(model_cfg.clone(), cfg).unwrap();
    let pairs = toy_pairs::<f32>(1.0, 0).unwrap();
    let held = toy_pairs::<f32>(1.0, 1).unwrap();

    let start = Instant::now();
    for step in 1..=60u32 {
        let m = tr.train_step(&pairs).unwrap();
        if step % 5 == 0 {
            let (e, _) = eval_pairs(&tr.params, &tr.buffers, &model_cfg, &pairs).unwrap();
            let (he, hn) = eval_pairs(&tr.params, &tr.buffers, &model_cfg, &held).unwrap();
            let hp = post_si(&tr, &held);
            println!(
                "step {step}: {:.0?} total={:.3} train_eval={:.2} held={:.2} held_post={:.2} held_noisy={:.2} gain={:+.2} gain_post={:+.2}",
                start.elapsed(),
                m.total,
                e,
                he,
                hp,
                hn,
                he - hn,
                hp - hn
            );
        }
    }
}
