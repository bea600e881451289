use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volta::gradcheck::grad_check;
use volta::latent::{
    argmax, code_log_likelihood, interpolate_latents, kl_categorical, kl_gaussian, sample_gumbel_softmax,
    CategoricalPosterior, CodeValue, GaussianPosterior, GaussianVars, LatentSample, RecoveryParam,
};
use volta::{latent, Tensor};

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> GaussianPosterior {
    let mu = Tensor::randn(&[n], 2.0, rng).into_data();
    let ls = Tensor::randn(&[n], 1.0, rng).into_data();
    GaussianPosterior::new(mu, ls).unwrap()
}

fn categorical(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CategoricalPosterior {
    CategoricalPosterior::new(n, k, Tensor::randn(&[n * k], 3.0, rng).into_data()).unwrap()
}

#[test]
fn kl_is_non_negative_over_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let (q, p) = (gaussian(4, &mut rng), gaussian(4, &mut rng));
        assert!(kl_gaussian(&q, &p).unwrap().iter().all(|k| *k >= 0.0));
        let (q, p) = (categorical(2, 4, &mut rng), categorical(2, 4, &mut rng));
        assert!(kl_categorical(&q, &p).unwrap().iter().all(|k| *k >= 0.0));
    }
}

#[test]
fn kl_vanishes_only_when_distributions_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = gaussian(6, &mut rng);
    assert!(kl_gaussian(&q, &q).unwrap().iter().all(|k| k.abs() < 1e-12));
    let mut shifted = q.clone();
    shifted.mu[2] += 0.1;
    let kl = kl_gaussian(&shifted, &q).unwrap();
    assert!(kl[2] > 0.0);
    assert!(kl
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 2)
        .all(|(_, k)| k.abs() < 1e-12));

    let c = categorical(3, 5, &mut rng);
    assert!(kl_categorical(&c, &c).unwrap().iter().all(|k| k.abs() < 1e-12));
    let u = CategoricalPosterior::uniform(3, 5);
    assert!(kl_categorical(&c, &u).unwrap().iter().all(|k| *k > 0.0));
}

#[test]
fn gaussian_kl_against_standard_normal() {
    // KL(N(m, s^2) || N(0, 1)) = (s^2 + m^2 - 1) / 2 - ln s
    let q = GaussianPosterior::new(vec![0.7, -1.2], vec![0.3, -0.5]).unwrap();
    let kl = kl_gaussian(&q, &GaussianPosterior::standard(2)).unwrap();
    for i in 0..2 {
        let (m, s) = (q.mu[i], q.log_sigma[i].exp());
        assert!((kl[i] - ((s * s + m * m - 1.0) / 2.0 - s.ln())).abs() < 1e-12);
    }
}

#[test]
fn gumbel_rows_stay_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let post = categorical(3, 4, &mut rng);
    for tau in [0.01, 0.5, 1.0, 5.0] {
        for _ in 0..500 {
            let z = sample_gumbel_softmax(&post, tau, &mut rng).unwrap();
            for row in z.chunks(4) {
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn lower_temperature_means_sharper_samples() {
    let post = CategoricalPosterior::from_probs(1, 4, &[0.4, 0.3, 0.2, 0.1]).unwrap();
    let mean_max = |tau: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        (0..n)
            .map(|_| {
                let z = sample_gumbel_softmax(&post, tau, &mut rng).unwrap();
                z.iter().cloned().fold(f64::MIN, f64::max)
            })
            .sum::<f64>()
            / n as f64
    };
    let maxes: Vec<f64> = [5.0, 1.0, 0.5, 0.01].iter().map(|t| mean_max(*t)).collect();
    assert!(maxes.windows(2).all(|w| w[0] < w[1]), "{maxes:?}");
    assert!(maxes[3] > 0.99);
}

#[test]
fn reparametrized_gaussian_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = latent::draw_normals(5, &mut rng);
    let x = Tensor::randn(&[2, 5], 0.5, &mut rng);
    let err = grad_check(
        |g, x| {
            let mu = g.slice(x, 0, 0, 1)?;
            let mu = g.reshape(mu, &[5])?;
            let ls = g.slice(x, 0, 1, 2)?;
            let ls = g.reshape(ls, &[5])?;
            let z = latent::sample_gaussian_var(g, GaussianVars { mu, log_sigma: ls }, &eps)?;
            let z2 = g.mul(z, z)?;
            Ok(g.sum(z2))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn code_likelihoods_match_closed_forms() {
    let ll = code_log_likelihood(&RecoveryParam::Mean(0.25), CodeValue::Continuous(-0.5)).unwrap();
    let want = -(2.0 * std::f64::consts::PI).sqrt().ln() - 0.5 * 0.75f64.powi(2);
    assert!((ll - want).abs() < 1e-12);
    let logits = vec![1.0, 2.0, 0.5];
    let ll = code_log_likelihood(&RecoveryParam::Logits(logits.clone()), CodeValue::Discrete(1)).unwrap();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    assert!((ll - (2.0 - z.ln())).abs() < 1e-12);
    assert!(code_log_likelihood(&RecoveryParam::Mean(0.0), CodeValue::Discrete(0)).is_err());
    assert!(code_log_likelihood(&RecoveryParam::Logits(logits), CodeValue::Discrete(3)).is_err());
}

#[test]
fn rejects_bad_parameters() {
    let post = CategoricalPosterior::uniform(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(sample_gumbel_softmax(&post, 0.0, &mut rng).is_err());
    assert!(sample_gumbel_softmax(&post, -1.0, &mut rng).is_err());
    assert!(GaussianPosterior::new(vec![0.0; 2], vec![0.0; 3]).is_err());
    assert!(kl_gaussian(&GaussianPosterior::standard(2), &GaussianPosterior::standard(3)).is_err());
}

fn sample(z_g: Vec<f64>, z_a: Vec<f64>) -> LatentSample {
    LatentSample {
        z_g,
        z_a,
        n_za: 1,
        k: 3,
        tau: 1.0,
    }
}

proptest! {
    #[test]
    fn interpolation_endpoints_and_simplex(alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pa = latent::softmax(&Tensor::randn(&[3], 1.0, &mut rng).into_data());
        let pb = latent::softmax(&Tensor::randn(&[3], 1.0, &mut rng).into_data());
        let a = sample(vec![1.0, -2.0], pa);
        let b = sample(vec![-3.0, 0.5], pb);
        prop_assert_eq!(&interpolate_latents(&a, &b, 0.0).unwrap(), &a);
        prop_assert_eq!(&interpolate_latents(&a, &b, 1.0).unwrap(), &b);
        let m = interpolate_latents(&a, &b, alpha).unwrap();
        prop_assert!((m.z_a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((m.z_g[0] - (1.0 - 4.0 * alpha)).abs() < 1e-12);
    }

    #[test]
    fn harden_picks_the_argmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = latent::softmax(&Tensor::randn(&[3], 2.0, &mut rng).into_data());
        let h = sample(vec![0.0], p.clone()).harden();
        let hot = argmax(&p);
        for (j, v) in h.z_a.iter().enumerate() {
            prop_assert_eq!(*v, if j == hot { 1.0 } else { 0.0 });
        }
    }
}
