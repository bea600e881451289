//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Runs several desk-scale trainings, so it takes a few minutes.

use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use volta::checkpoint::Checkpoint;
use volta::data::{Dataset, SyntheticSpec, Task};
use volta::eval::{self, EvalOptions, Evaluator};
use volta::gradcheck;
use volta::latent::{self, CategoricalPosterior, GaussianPosterior};
use volta::metrics::{self, words, SequenceScorer};
use volta::model::Mode;
use volta::objectives::{beta_at, regularization_loss, LossWeights};
use volta::train::{self, CodePolicy, CorpusSource, LatentPolicy, OptimizerKind, QagPipeline, RunConfig, Trainer};
use volta::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- AC-1

fn ac1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = ("", 0.0f64);
    let trials = 100;
    for _ in 0..trials {
        for (name, err) in gradcheck::check_ops(&mut rng, 8, 1e-4)? {
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let mut worst_model = 0.0f64;
    for mode in [Mode::DecoderOnly, Mode::EncoderDecoder] {
        for seed in 0..3 {
            worst_model = worst_model.max(train::end_to_end_grad_check(mode, seed, 1e-4)?);
        }
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        worst_op.1 < 1e-4 && worst_model < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "ops over {trials} draws: max rel err {:.2e} ({}); full loss: {worst_model:.2e}; {:.1}s",
            worst_op.1,
            worst_op.0,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- AC-2

const MC_SAMPLES: usize = 1_000_000;

fn mc_gaussian(mu: f64, sig: f64, mu_p: f64, sig_p: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let q = Normal::new(mu, sig).unwrap();
    let log_n = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    mean_and_stderr((0..MC_SAMPLES).map(|_| {
        let x = q.sample(rng);
        log_n(x, mu, sig) - log_n(x, mu_p, sig_p)
    }))
}

fn mc_categorical(q: &[f64], p: &[f64], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let dist = WeightedIndex::new(q).unwrap();
    mean_and_stderr((0..MC_SAMPLES).map(|_| {
        let i = dist.sample(rng);
        q[i].ln() - p[i].ln()
    }))
}

/// Sample mean and its standard error.
fn mean_and_stderr(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n;
    (mean, ((s2 / n - mean * mean) / n).sqrt())
}

fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn ac2() -> Result<Outcome> {
    // The estimator must resolve the tolerance: with 1e6 samples that holds
    // for posterior-scale parameters (sigma within about 0.6..1.65), while
    // KLs of 10+ nats carry a standard error above 1e-2.
    const TOL: f64 = 1e-2;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_g, mut worst_c, mut worst_se) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (mu, ls) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let (mu_p, ls_p) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let q = GaussianPosterior::new(vec![mu], vec![ls])?;
        let p = GaussianPosterior::new(vec![mu_p], vec![ls_p])?;
        let closed = latent::kl_gaussian(&q, &p)?[0];
        let (mc, se) = mc_gaussian(mu, f64::exp(ls), mu_p, f64::exp(ls_p), &mut rng);
        worst_g = worst_g.max((closed - mc).abs());
        worst_se = worst_se.max(se);

        let k = rng.random_range(2..=6);
        let (qp, pp) = (random_simplex(k, &mut rng), random_simplex(k, &mut rng));
        let closed = latent::kl_categorical(
            &CategoricalPosterior::from_probs(1, k, &qp)?,
            &CategoricalPosterior::from_probs(1, k, &pp)?,
        )?[0];
        let (mc, se) = mc_categorical(&qp, &pp, &mut rng);
        worst_c = worst_c.max((closed - mc).abs());
        worst_se = worst_se.max(se);
    }
    let elapsed = start.elapsed();
    Ok(outcome(
        worst_g < TOL && worst_c < TOL && worst_se < TOL / 2.0 && elapsed < Duration::from_secs(60),
        format!(
            "20 sets, max |closed - MC|: gaussian {worst_g:.2e}, categorical {worst_c:.2e}; \
             max MC std error {worst_se:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- AC-3

fn ac3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pi = [0.1, 0.35, 0.05, 0.3, 0.2];
    let post = CategoricalPosterior::from_probs(1, 5, &pi)?;
    let n = 100_000;
    let mut counts = [0usize; 5];
    let mut simplex_ok = true;
    for _ in 0..n {
        let y = latent::sample_gumbel_softmax(&post, 1.0, &mut rng)?;
        simplex_ok &= close(y.iter().sum::<f64>(), 1.0, 1e-9) && y.iter().all(|v| *v >= 0.0);
        counts[latent::argmax(&y)] += 1;
    }
    let l1: f64 = counts
        .iter()
        .zip(pi)
        .map(|(c, p)| (*c as f64 / n as f64 - p).abs())
        .sum();

    let mut mean_max = Vec::new();
    let mut sharp_frac = 0.0;
    for tau in [5.0, 1.0, 0.5, 0.01] {
        let draws = 10_000;
        let (mut total, mut sharp) = (0.0, 0usize);
        for _ in 0..draws {
            let y = latent::sample_gumbel_softmax(&post, tau, &mut rng)?;
            simplex_ok &= close(y.iter().sum::<f64>(), 1.0, 1e-9) && y.iter().all(|v| *v >= 0.0);
            let m = y.iter().copied().fold(0.0, f64::max);
            total += m;
            sharp += usize::from(m >= 0.99);
        }
        mean_max.push(total / draws as f64);
        if tau == 0.01 {
            sharp_frac = sharp as f64 / draws as f64;
        }
    }
    let monotone = mean_max.windows(2).all(|w| w[1] >= w[0]);
    Ok(outcome(
        l1 < 0.02 && sharp_frac >= 0.99 && simplex_ok && monotone,
        format!(
            "argmax L1 {l1:.4}; tau=0.01 max>=0.99 in {:.2}%; mean max over tau 5,1,0.5,0.01: {:.3?}; simplex {simplex_ok}",
            100.0 * sharp_frac,
            mean_max
        ),
    ))
}

// ---------------------------------------------------------------- AC-4

fn ac4() -> Result<Outcome> {
    let w = LossWeights::default();
    let mut ok = true;
    for t in [1000usize, 999, 7] {
        let quarter = (0.25 * t as f64).ceil() as usize;
        ok &= beta_at(0, t, &w)? == 0.0;
        ok &= close(beta_at(quarter, t, &w)?, 0.1, 1e-12);
        ok &= beta_at(t, t, &w)? == 0.1;
    }
    let hinge = [
        (regularization_loss(&[0.0, 0.0, 0.0], &[], 1.0)?, 1.0),
        (regularization_loss(&[0.5, 2.0], &[], 1.0)?, 1.5),
        (regularization_loss(&[0.5, 2.0], &[], 0.0)?, 1.25),
        (regularization_loss(&[0.5], &[2.0], 1.0)?, 1.5),
    ];
    let hinge_ok = hinge.iter().all(|(got, want)| got == want);
    Ok(outcome(
        ok && hinge_ok,
        format!("schedule endpoints exact: {ok}; hinge cases {:?}", hinge.map(|h| h.0)),
    ))
}

// ---------------------------------------------------------------- AC-5

struct ConstScorer(f64);

impl SequenceScorer for ConstScorer {
    fn token_nlls(&mut self, _ctx: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![self.0; target.len() + 1])
    }
}

fn ac5() -> Result<Outcome> {
    let w = words;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let same = metrics::bleu_precision_recall(&[(vec![w("a b c d")], vec![w("a b c d")])], 4)?;
    let half = metrics::bleu_precision_recall(&[(vec![w("a b c")], vec![w("a b c"), w("x y z")])], 4)?;
    let apart = metrics::bleu_precision_recall(&[(vec![w("a b c")], vec![w("x y z")])], 4)?;
    let items = vec![(vec![1, 2], vec![3, 4, 5]), (vec![], vec![6])];
    let split: Vec<Vec<f64>> = (0..6).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.5]).collect();
    let g = GaussianPosterior::new(vec![0.3, -0.2], vec![0.1, -0.4])?;
    let far = vec![
        GaussianPosterior::new(vec![-50.0], vec![0.0])?,
        GaussianPosterior::new(vec![50.0], vec![0.0])?,
    ];
    let cases = [
        ("distinct-1 single", metrics::distinct_k(&[w("a b c")], 1)?, 1.0),
        (
            "distinct-1 repeated",
            metrics::distinct_k(&[w("a b c"), w("a b c")], 1)?,
            0.5,
        ),
        ("distinct-2", metrics::distinct_k(&[w("a b c")], 2)?, 2.0 / 3.0),
        (
            "self-bleu identical",
            metrics::self_bleu(&vec![w("the cat sat down"); 4], 4)?,
            100.0,
        ),
        (
            "self-bleu half",
            metrics::self_bleu(&[w("a b c d"), w("a b e f")], 1)?,
            50.0,
        ),
        ("P/R identical precision", same.precision, 1.0),
        ("P/R identical recall", same.recall, 1.0),
        ("P/R identical f1", same.f1, 1.0),
        ("P/R one of two precision", half.precision, 1.0),
        ("P/R one of two recall", half.recall, 0.5),
        ("P/R disjoint precision", apart.precision, 0.0),
        ("P/R disjoint recall", apart.recall, 0.0),
        (
            "ppl uniform 7",
            metrics::perplexity(&mut ConstScorer(7f64.ln()), &items)?,
            7.0,
        ),
        ("ppl perfect", metrics::perplexity(&mut ConstScorer(0.0), &items)?, 1.0),
        (
            "ppl two tokens",
            metrics::perplexity(&mut ConstScorer(2f64.ln()), &items)?,
            2.0,
        ),
        (
            "au constant",
            metrics::active_units(&vec![vec![0.2, -1.0, 3.0]; 6], 0.01)? as f64,
            0.0,
        ),
        ("au split", metrics::active_units(&split, 0.01)? as f64, 1.0),
        (
            "mi identical",
            metrics::mutual_information(&vec![g; 3], 64, &mut rng)?,
            0.0,
        ),
        (
            "mi disjoint",
            metrics::mutual_information(&far, 64, &mut rng)?,
            2f64.ln(),
        ),
    ];
    let mut failures: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, 1e-9))
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    let disjoint = metrics::self_bleu(&[w("a b c"), w("x y z")], 4)?;
    if disjoint >= 5.0 {
        failures.push(format!("self-bleu disjoint {disjoint}"));
    }

    // one deterministic hypothesis and one reference per context
    let mut cfg = RunConfig {
        task: Task::Dialog,
        corpus: CorpusSource::Synthetic(SyntheticSpec {
            task: Task::Dialog,
            n_contexts: 40,
            ..Default::default()
        }),
        steps: 300,
        ..Default::default()
    };
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.n_layers = 1;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 1e-3;
    let mut t = Trainer::new(cfg)?;
    t.run(|_, _| Ok(()))?;
    let ev = Evaluator::new(&t.model, deterministic_options(&t.config));
    let rep = eval::evaluate(&ev, &t.test, 1, &mut rng)?;
    let (p, r) = (rep.get("bleu_precision").unwrap(), rep.get("bleu_recall").unwrap());
    if p != r || p == 0.0 {
        failures.push(format!("single-hypothesis dialog P {p} vs R {r}"));
    }
    Ok(outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("all hand oracles match; single-hypothesis dialog P = R = {p:.4}")
        } else {
            failures.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- shared runs

fn qag_config(gamma: f64, codes: CodePolicy, policy: LatentPolicy, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        steps,
        code_policy: codes,
        latent_policy: policy,
        ..Default::default()
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 1e-3;
    cfg.loss.gamma = gamma;
    cfg
}

fn train(cfg: RunConfig) -> Result<(Trainer, f64)> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg)?;
    t.run(|_, _| Ok(()))?;
    Ok((t, start.elapsed().as_secs_f64()))
}

fn sampling_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        task: cfg.task,
        policy: LatentPolicy::Variational,
        codes: CodePolicy::Sampled,
        pipeline: QagPipeline::SpanFirst,
        constrained_span: false,
        tau: cfg.tau,
        max_len: 12,
    }
}

fn deterministic_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        policy: LatentPolicy::Deterministic,
        codes: CodePolicy::Fixed,
        ..sampling_options(cfg)
    }
}

// ---------------------------------------------------------------- AC-6

/// Fraction of held-out contexts whose greedy output changes between two
/// prior draws of `z_g`, with `z_a` and the codes held fixed.
fn z_g_sensitivity(ev: &Evaluator<'_>, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<f64> {
    let ctxs = eval::contexts(ds);
    let mut differ = 0;
    for ex in &ctxs {
        let prior = ev.prior(&ex.context)?;
        let base = ev.prior_point(&ex.context)?;
        let codes = ev.draw_codes(rng)?;
        let mut a = base.clone();
        let mut b = base;
        a.z_g = latent::sample_gaussian(&prior.gaussian, rng);
        b.z_g = latent::sample_gaussian(&prior.gaussian, rng);
        differ += usize::from(ev.decode(&ex.context, &a, &codes)?.text != ev.decode(&ex.context, &b, &codes)?.text);
    }
    Ok(differ as f64 / ctxs.len() as f64)
}

fn ac6(vmim: &Trainer, secs_on: f64) -> Result<Outcome> {
    let (off, secs_off) = train(qag_config(0.0, CodePolicy::Frozen, LatentPolicy::Variational, 1500))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ev_on = Evaluator::new(&vmim.model, sampling_options(&vmim.config));
    let ev_off = Evaluator::new(&off.model, sampling_options(&off.config));
    let rec_on = eval::discrete_recovery_accuracy(&ev_on, &vmim.test, 2, &mut rng)?;
    let var_on = eval::span_variation(&ev_on, &vmim.test, &mut rng)?;
    let rec_off = eval::discrete_recovery_accuracy(&ev_off, &off.test, 2, &mut rng)?;
    let var_off = eval::span_variation(&ev_off, &off.test, &mut rng)?;
    let zg = z_g_sensitivity(&ev_on, &vmim.test, &mut rng)?;
    let within = secs_on.max(secs_off) < 600.0;
    Ok(outcome(
        rec_on >= 0.8 && var_on >= 0.5 && rec_off <= 0.4 && var_off < var_on && zg > 0.5 && within,
        format!(
            "gamma=1: recovery {rec_on:.3}, span variation {var_on:.3} ({secs_on:.0}s); \
             gamma=0 frozen: recovery {rec_off:.3}, span variation {var_off:.3} ({secs_off:.0}s); \
             z_g changes output on {zg:.3} of contexts"
        ),
    ))
}

// ---------------------------------------------------------------- AC-7

fn lm_config(steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        task: Task::Lm,
        corpus: CorpusSource::Synthetic(SyntheticSpec {
            task: Task::Lm,
            ..Default::default()
        }),
        steps,
        ..Default::default()
    };
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 1e-3;
    cfg.loss.gamma = 0.0;
    cfg
}

fn active_units_of(t: &Trainer) -> Result<usize> {
    let ev = Evaluator::new(&t.model, sampling_options(&t.config));
    metrics::active_units(&eval::posterior_means(&ev, &t.test)?, 0.01)
}

fn ac7() -> Result<Outcome> {
    let mut free_bits = lm_config(1000);
    free_bits.loss.lambda_fb = 1.0;
    free_bits.loss.anneal = true;
    let mut heavy = lm_config(1000);
    heavy.loss.beta_max = 10.0;
    heavy.loss.lambda_fb = 0.0;
    heavy.loss.anneal = false;
    let (a, secs_a) = train(free_bits)?;
    let (b, secs_b) = train(heavy)?;
    let (au_a, au_b) = (active_units_of(&a)?, active_units_of(&b)?);
    let n = a.model.config.n_zg;
    Ok(outcome(
        au_a >= 8 && au_b <= 2 && secs_a.max(secs_b) < 600.0,
        format!("free bits + annealing: AU {au_a}/{n} ({secs_a:.0}s); beta=10, lambda=0: AU {au_b}/{n} ({secs_b:.0}s)"),
    ))
}

// ---------------------------------------------------------------- AC-8, AC-9

fn ac8(vmim: &Trainer, baseline: &Trainer) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ev = Evaluator::new(&vmim.model, sampling_options(&vmim.config));
    let base = Evaluator::new(&baseline.model, deterministic_options(&baseline.config));
    let ours = eval::diversity(&ev, &vmim.test, 5, &mut rng)?;
    let theirs = eval::diversity(&base, &baseline.test, 5, &mut rng)?;
    let wins = ours
        .iter()
        .zip(&theirs)
        .filter(|(o, t)| {
            assert_eq!(o.group, t.group);
            o.self_bleu < t.self_bleu && o.distinct_2 > t.distinct_2
        })
        .count();
    let frac = wins as f64 / ours.len() as f64;
    let mean = |xs: &[eval::ContextDiversity], f: fn(&eval::ContextDiversity) -> f64| {
        xs.iter().map(f).sum::<f64>() / xs.len() as f64
    };
    Ok(outcome(
        frac >= 0.9,
        format!(
            "more diverse on {wins}/{} contexts ({:.1}%); self-BLEU {:.1} vs {:.1}, distinct-2 {:.3} vs {:.3}",
            ours.len(),
            100.0 * frac,
            mean(&ours, |d| d.self_bleu),
            mean(&theirs, |d| d.self_bleu),
            mean(&ours, |d| d.distinct_2),
            mean(&theirs, |d| d.distinct_2)
        ),
    ))
}

fn ac9(baseline: &Trainer) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ev = Evaluator::new(&baseline.model, deterministic_options(&baseline.config));
    let div = eval::diversity(&ev, &baseline.test, 5, &mut rng)?;
    let mean = div.iter().map(|d| d.self_bleu).sum::<f64>() / div.len() as f64;
    let min = div.iter().map(|d| d.self_bleu).fold(f64::INFINITY, f64::min);
    Ok(outcome(
        mean >= 99.0,
        format!(
            "5-sample self-BLEU mean {mean:.2}, min {min:.2} over {} contexts",
            div.len()
        ),
    ))
}

// ---------------------------------------------------------------- AC-10

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        steps: 12,
        batch_size: 4,
        seed: 10,
        corpus: CorpusSource::Synthetic(SyntheticSpec {
            n_contexts: 20,
            ..Default::default()
        }),
        ..Default::default()
    };
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.n_layers = 1;
    cfg.model.mode = Mode::EncoderDecoder;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 1e-3;
    cfg
}

fn trajectory(cfg: RunConfig) -> Result<(Vec<u64>, Vec<u8>)> {
    let mut t = Trainer::new(cfg)?;
    let mut bits = Vec::new();
    t.run(|_, r| {
        bits.extend([r.total, r.ae, r.reg, r.vmim, r.qami].map(f64::to_bits));
        Ok(())
    })?;
    Ok((bits, Checkpoint::from_trainer(&t).to_bytes()))
}

fn ac10() -> Result<Outcome> {
    let (loss_a, ck_a) = trajectory(small_run_config())?;
    let (loss_b, ck_b) = trajectory(small_run_config())?;
    let same_run = loss_a == loss_b && ck_a == ck_b;

    let parsed = Checkpoint::from_bytes(&ck_a)?;
    let round_trip = parsed.to_bytes() == ck_a;
    let dir = std::env::temp_dir().join(format!("volta-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (p1, p2) = (dir.join("a.bin"), dir.join("b.bin"));
    parsed.save(&p1)?;
    Checkpoint::load(&p1)?.save(&p2)?;
    let file_trip = std::fs::read(&p1)? == std::fs::read(&p2)?;

    // stopping, saving and resuming reproduces the uninterrupted run
    let mut cfg = small_run_config();
    let mut t = Trainer::new(cfg.clone())?;
    let mut resumed_bits = Vec::new();
    for _ in 0..5 {
        let r = t.train_step()?;
        resumed_bits.extend([r.total, r.ae, r.reg, r.vmim, r.qami].map(f64::to_bits));
    }
    Checkpoint::from_trainer(&t).save(&p1)?;
    let mut t = Checkpoint::load(&p1)?.into_trainer()?;
    t.run(|_, r| {
        resumed_bits.extend([r.total, r.ae, r.reg, r.vmim, r.qami].map(f64::to_bits));
        Ok(())
    })?;
    let resume = resumed_bits == loss_a && Checkpoint::from_trainer(&t).to_bytes() == ck_a;
    std::fs::remove_dir_all(&dir)?;

    cfg.seed += 1;
    let (loss_c, _) = trajectory(cfg)?;
    let seed_matters = loss_c != loss_a;
    Ok(outcome(
        same_run && round_trip && file_trip && resume && seed_matters,
        format!(
            "identical reruns {same_run}; bytes round trip {round_trip}; file round trip {file_trip}; \
             resume matches {resume}; other seed differs {seed_matters}"
        ),
    ))
}

// ----------------------------------------------------------------

fn report(id: &str, r: Result<Outcome>) -> bool {
    match r {
        Ok(o) => {
            println!("{id} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("{id} FAIL error: {e}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report("AC-1", ac1());
    ok &= report("AC-2", ac2());
    ok &= report("AC-3", ac3());
    ok &= report("AC-4", ac4());
    ok &= report("AC-5", ac5());

    let vmim = train(qag_config(1.0, CodePolicy::Sampled, LatentPolicy::Variational, 1500));
    let baseline = train(qag_config(1.0, CodePolicy::Fixed, LatentPolicy::Deterministic, 1000));
    match &vmim {
        Ok((t, secs)) => ok &= report("AC-6", ac6(t, *secs)),
        Err(e) => ok &= report("AC-6", Err(e.clone())),
    }
    ok &= report("AC-7", ac7());
    match (&vmim, &baseline) {
        (Ok((v, _)), Ok((b, _))) => {
            ok &= report("AC-8", ac8(v, b));
            ok &= report("AC-9", ac9(b));
        }
        (Err(e), _) | (_, Err(e)) => {
            ok &= report("AC-8", Err(e.clone()));
            ok &= report("AC-9", Err(e.clone()));
        }
    }
    ok &= report("AC-10", ac10());
    if !ok {
        std::process::exit(1);
    }
}
