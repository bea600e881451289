use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volta::latent::{CodeValue, RecoveryParam};
use volta::objectives::{
    beta_at, qami_loss, regularization_loss, total_loss, vmim_loss, vmim_var, LossParts, LossWeights,
};
use volta::{Graph, Tensor};

fn weights(beta_max: f64, anneal: bool) -> LossWeights {
    LossWeights {
        beta_max,
        anneal,
        ..LossWeights::default()
    }
}

proptest! {
    #[test]
    fn total_is_the_weighted_sum(
        ae in 0.0f64..10.0, reg in 0.0f64..10.0, vmim in 0.0f64..10.0, qami in 0.0f64..10.0,
        gamma in 0.0f64..5.0, qw in 0.0f64..5.0, step in 0usize..1000, active in any::<bool>(),
    ) {
        let w = LossWeights { gamma, qami_weight: qw, ..LossWeights::default() };
        let r = total_loss(LossParts { ae, reg, vmim, qami }, vec![0.1], &w, step, 1000, active).unwrap();
        let beta = beta_at(step, 1000, &w).unwrap();
        let q = if active { qw * qami } else { 0.0 };
        prop_assert!((r.total - (ae + beta * reg + gamma * vmim + q)).abs() < 1e-9);
        prop_assert!((r.total - r.recompute_total()).abs() < 1e-12);
    }

    #[test]
    fn free_bits_is_monotone_in_lambda(
        kls in proptest::collection::vec(0.0f64..3.0, 1..12), a in 0.0f64..2.0, b in 0.0f64..2.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (g, c) = kls.split_at(kls.len() / 2);
        prop_assert!(regularization_loss(g, c, lo).unwrap() <= regularization_loss(g, c, hi).unwrap() + 1e-15);
        prop_assert!(regularization_loss(g, c, hi).unwrap() >= hi - 1e-15);
    }

    #[test]
    fn beta_is_monotone_and_bounded(total in 1usize..3000, beta_max in 0.0f64..10.0) {
        let w = weights(beta_max, true);
        let mut prev = 0.0;
        for step in 0..=total {
            let b = beta_at(step, total, &w).unwrap();
            prop_assert!(b >= prev - 1e-15 && b <= beta_max + 1e-12);
            prev = b;
        }
        prop_assert!((beta_at(total, total, &w).unwrap() - beta_max).abs() < 1e-12);
    }
}

#[test]
fn beta_warmup_is_linear_and_continuous() {
    let w = weights(2.0, true);
    let t = 1000;
    let warm = (w.warmup_fraction * t as f64) as usize;
    assert_eq!(beta_at(0, t, &w).unwrap(), 0.0);
    let step = 2.0 / warm as f64;
    for s in 1..t {
        let d = beta_at(s, t, &w).unwrap() - beta_at(s - 1, t, &w).unwrap();
        assert!(d <= step + 1e-12, "jump at {s}");
    }
    assert_eq!(beta_at(10, t, &weights(2.0, false)).unwrap(), 2.0);
}

#[test]
fn free_bits_hinge_by_hand() {
    let r = regularization_loss(&[0.2, 1.5], &[0.05], 0.5).unwrap();
    assert!((r - (0.5 + 1.5 + 0.5) / 3.0).abs() < 1e-12);
    assert!((regularization_loss(&[0.2, 1.5], &[0.05], 0.0).unwrap() - 1.75 / 3.0).abs() < 1e-12);
    assert!(regularization_loss(&[-0.1], &[], 0.0).is_err());
    assert!(regularization_loss(&[0.1], &[], -1.0).is_err());
}

#[test]
fn vmim_graph_matches_scalar_form() {
    let mut g = Graph::new();
    let theta = g.constant(&Tensor::vector(&[0.3, -0.8]));
    let logits = g.constant(&Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.2, 0.4, 0.1]).unwrap());
    let v = vmim_var(&mut g, Some(theta), &[0.5, -0.5], Some(logits), &[2, 1])
        .unwrap()
        .unwrap();
    let scalar = vmim_loss(
        &[
            RecoveryParam::Mean(0.3),
            RecoveryParam::Mean(-0.8),
            RecoveryParam::Logits(vec![1.0, 0.0, -1.0]),
            RecoveryParam::Logits(vec![0.2, 0.4, 0.1]),
        ],
        &[
            CodeValue::Continuous(0.5),
            CodeValue::Continuous(-0.5),
            CodeValue::Discrete(2),
            CodeValue::Discrete(1),
        ],
    )
    .unwrap();
    assert!((g.item(v) - scalar).abs() < 1e-12);
}

#[test]
fn vmim_drives_separable_recovery_to_perfect() {
    // codes are a linear function of fixed features, so a linear recovery head
    // trained on the VMIM term alone must decode every one of them
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, k) = (60, 6, 3);
    let centers = Tensor::randn(&[k, d], 3.0, &mut rng);
    let codes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut feats = Vec::new();
    for &c in &codes {
        for j in 0..d {
            feats.push(centers.at(c, j) + 0.3 * rng.random::<f64>());
        }
    }
    let x = Tensor::matrix(n, d, feats).unwrap();
    let mut w = Tensor::zeros(&[d, k]);
    for _ in 0..300 {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let wv = g.leaf(&w.clone().with_grad());
        let logits = g.matmul(xv, wv).unwrap();
        let loss = vmim_var(&mut g, None, &[], Some(logits), &codes).unwrap().unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(wv).unwrap().to_vec();
        for (p, gr) in w.data_mut().iter_mut().zip(grad) {
            *p -= 0.05 * gr;
        }
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(&x), g.constant(&w));
    let logits = g.matmul(xv, wv).unwrap();
    let out = g.tensor(logits);
    let right = (0..n)
        .filter(|&i| volta::latent::argmax(out.row(i)) == codes[i])
        .count();
    assert_eq!(right, n);
}

#[test]
fn qami_prefers_scores_that_separate_pairs() {
    let good = qami_loss(&[0.9, 0.95], &[0.1], &[0.05]).unwrap();
    let bad = qami_loss(&[0.2, 0.3], &[0.8], &[0.7]).unwrap();
    assert!(good < bad);
    let want = -((0.9f64.ln() + 0.95f64.ln()) / 2.0 + 0.5 * 0.9f64.ln() + 0.5 * 0.95f64.ln());
    assert!((good - want).abs() < 1e-12);
    assert!(qami_loss(&[1.0], &[0.5], &[0.5]).is_err());
}
