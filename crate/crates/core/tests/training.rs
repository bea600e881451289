use volta::checkpoint::Checkpoint;
use volta::data::{SyntheticSpec, Task};
use volta::latent::argmax;
use volta::model::ModelConfig;
use volta::tokenizer::EOS;
use volta::train::{
    fixed_codes, posterior_target, CodePolicy, CorpusSource, LatentPolicy, OptimizerKind, RunConfig, Trainer,
};

fn lm_config(n: usize, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        steps,
        batch_size: 8,
        seed: 3,
        task: Task::Lm,
        holdout: 0.0,
        corpus: CorpusSource::Synthetic(SyntheticSpec {
            task: Task::Lm,
            n_contexts: n,
            ..Default::default()
        }),
        latent_policy: LatentPolicy::Deterministic,
        code_policy: CodePolicy::Fixed,
        model: ModelConfig {
            d_model: 32,
            d_ff: 64,
            n_layers: 1,
            n_zg: 8,
            n_cg: 0,
            n_za: 0,
            n_ca: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.loss.gamma = 0.0;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 3e-3;
    cfg
}

/// Teacher-forced next-token accuracy on the training sentences, decoding
/// from the posterior mean as a plain autoencoder would.
fn reconstruction_accuracy(t: &Trainer) -> f64 {
    let m = &t.model;
    let codes = fixed_codes(&m.config);
    let (mut right, mut total) = (0, 0);
    for ex in &t.train.examples {
        let z = m
            .posterior(&ex.context, &posterior_target(Task::Lm, ex))
            .unwrap()
            .mean(1.0);
        let logits = m.decoder_forward(&ex.context, &ex.target, &z, &codes).unwrap();
        let v = m.config.vocab_size;
        let mut want = ex.target.clone();
        want.push(EOS);
        for (i, w) in want.iter().enumerate() {
            right += usize::from(argmax(&logits.data()[i * v..(i + 1) * v]) == *w);
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn deterministic_autoencoder_memorizes_a_toy_corpus() {
    let mut t = Trainer::new(lm_config(32, 3000)).unwrap();
    assert_eq!(t.train.len(), 32);
    let mut acc = 0.0;
    while t.step < 3000 {
        for _ in 0..100 {
            t.train_step().unwrap();
        }
        acc = reconstruction_accuracy(&t);
        if acc >= 0.99 {
            break;
        }
    }
    assert!(acc >= 0.99, "accuracy {acc} after {} steps", t.step);
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let mut t = Trainer::new(lm_config(12, 6)).unwrap();
        let mut bits = Vec::new();
        t.run(|_, r| {
            bits.push(r.total.to_bits());
            Ok(())
        })
        .unwrap();
        (bits, Checkpoint::from_trainer(&t).to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_steps_keep_the_initial_weights() {
    let cfg = lm_config(12, 0);
    let fresh = Trainer::new(cfg.clone()).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    assert_eq!(t.step, 0);
    assert_eq!(t.model.params, fresh.model.params);
}

#[test]
fn epochs_translate_to_steps() {
    let mut cfg = lm_config(20, 1);
    cfg.epochs = Some(3);
    cfg.batch_size = 7;
    let t = Trainer::new(cfg).unwrap();
    // 3 passes over 20 examples in batches of 7
    assert_eq!(t.total_steps, 9);
}

#[test]
fn batches_cover_each_epoch_once() {
    let t = Trainer::new(lm_config(16, 1)).unwrap();
    let mut seen: Vec<usize> = (0..2).flat_map(|s| t.batch_indices(s)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
}

#[test]
fn bad_configs_are_rejected() {
    let mut cfg = lm_config(8, 1);
    cfg.optimizer.lr = 0.0;
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = lm_config(8, 1);
    cfg.model.max_seq = 3;
    assert!(Trainer::new(cfg).is_err());
}
