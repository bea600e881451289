//! Generation drivers and model-level evaluation: prior sampling, code
//! sweeps, interpolation, code recovery, span variation, perplexity and the
//! latent diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, Example, Task};
use crate::error::{Result, VoltaError};
use crate::latent::{self, argmax, interpolate_latents, LatentCodes, LatentSample, RecoveryParam};
use crate::metrics::{self, MetricsReport, SequenceScorer};
use crate::model::{constrained_span_from_logits, span_from_logits, Decoding, Posterior, SpanPrediction, VoltaModel};
use crate::tensor::Tensor;
use crate::tokenizer::{EOS, SEP};
use crate::train::{fixed_codes, generation_context, posterior_target, CodePolicy, LatentPolicy, QagPipeline};

/// How latents and codes are chosen at evaluation time.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub task: Task,
    pub policy: LatentPolicy,
    pub codes: CodePolicy,
    pub pipeline: QagPipeline,
    pub constrained_span: bool,
    pub tau: f64,
    pub max_len: usize,
}

/// One decoded output. For qag `answer` holds the predicted span tokens and
/// `text` the question; otherwise `answer` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub span: Option<(usize, usize, bool)>,
    pub answer: Vec<usize>,
    pub text: Vec<usize>,
}

impl Generation {
    /// Tokens compared by the diversity metrics: `answer <sep> text` for qag.
    pub fn tokens(&self) -> Vec<usize> {
        if self.span.is_none() {
            return self.text.clone();
        }
        let mut t = self.answer.clone();
        t.push(SEP);
        t.extend_from_slice(&self.text);
        t
    }
}

/// Which code a sweep scans. Continuous codes come first in the combined
/// numbering used by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeIndex {
    Continuous(usize),
    Discrete(usize),
}

impl CodeIndex {
    pub fn from_combined(i: usize, n_cg: usize, n_ca: usize) -> Result<CodeIndex> {
        if i < n_cg {
            Ok(CodeIndex::Continuous(i))
        } else if i < n_cg + n_ca {
            Ok(CodeIndex::Discrete(i - n_cg))
        } else {
            Err(VoltaError::Index {
                what: "latent code",
                index: i,
                size: n_cg + n_ca,
            })
        }
    }
}

pub struct Evaluator<'a> {
    pub model: &'a VoltaModel,
    pub opts: EvalOptions,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a VoltaModel, opts: EvalOptions) -> Self {
        Evaluator { model, opts }
    }

    /// Prior for the context: the context prior for dialog and qag, the
    /// standard normal for lm.
    pub fn prior(&self, ctx: &[usize]) -> Result<Posterior> {
        match self.opts.task {
            Task::Lm => Ok(Posterior::standard(&self.model.config)),
            _ => self.model.prior_or_standard(ctx),
        }
    }

    pub fn draw_codes<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentCodes> {
        let c = &self.model.config;
        match self.opts.codes {
            CodePolicy::Fixed => Ok(fixed_codes(c)),
            _ => latent::sample_codes(c.n_cg, c.n_ca, c.k, rng),
        }
    }

    /// A latent point from the prior: a sample, or the mean under the
    /// deterministic policy. `z_a` is hardened to one-hot rows.
    pub fn draw_latent<R: Rng + ?Sized>(&self, ctx: &[usize], rng: &mut R) -> Result<LatentSample> {
        let prior = self.prior(ctx)?;
        Ok(match self.opts.policy {
            LatentPolicy::Variational => prior.sample(self.opts.tau, rng)?.harden(),
            LatentPolicy::Deterministic => prior.mean(self.opts.tau).harden(),
        })
    }

    /// Prior mean with `z_a` hardened.
    pub fn prior_point(&self, ctx: &[usize]) -> Result<LatentSample> {
        Ok(self.prior(ctx)?.mean(self.opts.tau).harden())
    }

    pub fn predict_span(&self, ctx: &[usize], sample: &LatentSample, codes: &LatentCodes) -> Result<SpanPrediction> {
        let (s, e) = self.model.span_logits(ctx, sample, codes)?;
        if self.opts.constrained_span {
            constrained_span_from_logits(&s, &e)
        } else {
            span_from_logits(&s, &e)
        }
    }

    /// Greedy decoding of one output for fixed latents.
    pub fn decode(&self, ctx: &[usize], sample: &LatentSample, codes: &LatentCodes) -> Result<Generation> {
        // greedy decoding draws nothing
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        if self.opts.task != Task::Qag {
            let text = self
                .model
                .generate(ctx, sample, codes, self.opts.max_len, Decoding::Greedy, &mut rng)?;
            return Ok(Generation {
                span: None,
                answer: vec![],
                text,
            });
        }
        let span = self.predict_span(ctx, sample, codes)?;
        let answer: Vec<usize> = span.positions().map(|i| ctx[i - 1]).collect();
        let mut gen_ctx = ctx.to_vec();
        if self.opts.pipeline == QagPipeline::SpanFirst {
            gen_ctx.push(SEP);
            gen_ctx.extend_from_slice(&answer);
        }
        let text = self
            .model
            .generate(&gen_ctx, sample, codes, self.opts.max_len, Decoding::Greedy, &mut rng)?;
        Ok(Generation {
            span: Some((span.start, span.end, span.valid)),
            answer,
            text,
        })
    }

    /// `n` outputs, re-drawing latents and codes for each.
    pub fn sample_outputs<R: Rng + ?Sized>(&self, ctx: &[usize], n: usize, rng: &mut R) -> Result<Vec<Generation>> {
        (0..n)
            .map(|_| {
                let z = self.draw_latent(ctx, rng)?;
                let c = self.draw_codes(rng)?;
                self.decode(ctx, &z, &c)
            })
            .collect()
    }

    /// Values a sweep visits: the grid for a continuous code, every category
    /// for a discrete one.
    pub fn sweep_values(&self, index: CodeIndex, grid: &[f64]) -> Result<Vec<f64>> {
        let c = &self.model.config;
        match index {
            CodeIndex::Continuous(i) if i < c.n_cg => {
                if grid.is_empty() {
                    return Err(VoltaError::DegenerateInput("empty sweep grid".into()));
                }
                Ok(grid.to_vec())
            }
            CodeIndex::Discrete(i) if i < c.n_ca => Ok((0..c.k).map(|v| v as f64).collect()),
            CodeIndex::Continuous(i) | CodeIndex::Discrete(i) => Err(VoltaError::Index {
                what: "latent code",
                index: i,
                size: match index {
                    CodeIndex::Continuous(_) => c.n_cg,
                    CodeIndex::Discrete(_) => c.n_ca,
                },
            }),
        }
    }

    /// Codes with one entry replaced by `value`.
    pub fn with_code(codes: &LatentCodes, index: CodeIndex, value: f64) -> LatentCodes {
        let mut c = codes.clone();
        match index {
            CodeIndex::Continuous(i) => c.continuous[i] = value,
            CodeIndex::Discrete(i) => c.discrete[i] = value as usize,
        }
        c
    }

    /// Holds `sample` and the other codes fixed and scans one code.
    pub fn sweep_code(
        &self,
        ctx: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
        index: CodeIndex,
        grid: &[f64],
    ) -> Result<Vec<(f64, Generation)>> {
        self.sweep_values(index, grid)?
            .into_iter()
            .map(|v| Ok((v, self.decode(ctx, sample, &Evaluator::with_code(codes, index, v))?)))
            .collect()
    }

    /// Posterior mean of an example's latents.
    pub fn posterior_mean(&self, ex: &Example) -> Result<LatentSample> {
        let post = self
            .model
            .posterior(&ex.context, &posterior_target(self.opts.task, ex))?;
        Ok(post.mean(self.opts.tau).harden())
    }

    /// Decodes along the line between two latent points.
    pub fn interpolate(
        &self,
        ctx: &[usize],
        a: &LatentSample,
        b: &LatentSample,
        codes: &LatentCodes,
        grid: &[f64],
    ) -> Result<Vec<(f64, Generation)>> {
        grid.iter()
            .map(|&alpha| {
                let z = interpolate_latents(a, b, alpha)?;
                Ok((alpha, self.decode(ctx, &z, codes)?))
            })
            .collect()
    }
}

/// Contexts of a dataset, one representative example per group.
pub fn contexts(ds: &Dataset) -> Vec<&Example> {
    ds.groups().into_iter().map(|g| g[0]).collect()
}

/// Discrete-code recovery: for `draws` random code vectors per context the
/// span is predicted and the codes are read back from the span-pass states
/// over that span. Returns the fraction of codes recovered exactly.
pub fn discrete_recovery_accuracy<R: Rng + ?Sized>(
    ev: &Evaluator<'_>,
    ds: &Dataset,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let cfg = &ev.model.config;
    if cfg.n_ca == 0 {
        return Err(VoltaError::DegenerateInput("no discrete codes to recover".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in contexts(ds) {
        let z = ev.prior_point(&ex.context)?;
        for _ in 0..draws {
            let codes = latent::sample_codes(cfg.n_cg, cfg.n_ca, cfg.k, rng)?;
            let span = ev.predict_span(&ex.context, &z, &codes)?;
            let h = ev.model.span_hidden(&ex.context, &z, &codes)?;
            let rows = rows_of(&h, span.positions().map(|i| i - 1))?;
            for (theta, c) in ev.model.recover_codes(None, Some(&rows))?.iter().zip(&codes.discrete) {
                if let RecoveryParam::Logits(l) = theta {
                    hit += usize::from(argmax(l) == *c);
                    total += 1;
                }
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Mean squared error of continuous-code recovery from the states over the
/// generated tokens.
pub fn continuous_recovery_error<R: Rng + ?Sized>(ev: &Evaluator<'_>, ds: &Dataset, rng: &mut R) -> Result<f64> {
    let cfg = &ev.model.config;
    if cfg.n_cg == 0 {
        return Err(VoltaError::DegenerateInput("no continuous codes to recover".into()));
    }
    let (mut sq, mut n) = (0.0, 0usize);
    for ex in contexts(ds) {
        let z = ev.prior_point(&ex.context)?;
        let codes = latent::sample_codes(cfg.n_cg, cfg.n_ca, cfg.k, rng)?;
        let out = ev.decode(&ex.context, &z, &codes)?;
        let mut gen_ctx = ex.context.clone();
        if ev.opts.task == Task::Qag && ev.opts.pipeline == QagPipeline::SpanFirst {
            gen_ctx.push(SEP);
            gen_ctx.extend_from_slice(&out.answer);
        }
        let h = ev.model.generation_hidden(&gen_ctx, &out.text, &z, &codes)?;
        let t = out.text.len();
        let rows = if t == 0 { h } else { rows_of(&h, 1..=t)? };
        for (theta, c) in ev.model.recover_codes(Some(&rows), None)?.iter().zip(&codes.continuous) {
            if let RecoveryParam::Mean(m) = theta {
                sq += (m - c).powi(2);
                n += 1;
            }
        }
    }
    Ok(sq / n.max(1) as f64)
}

fn rows_of(h: &Tensor, rows: impl IntoIterator<Item = usize>) -> Result<Tensor> {
    let d = h.shape()[1];
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(h.row(r));
        n += 1;
    }
    if n == 0 {
        return Err(VoltaError::DegenerateInput("no hidden rows selected".into()));
    }
    Tensor::new(vec![n, d], data)
}

/// Fraction of contexts whose predicted span changes when some discrete
/// code is swept over its `k` values, with the prior mean and the other
/// codes held fixed.
pub fn span_variation<R: Rng + ?Sized>(ev: &Evaluator<'_>, ds: &Dataset, rng: &mut R) -> Result<f64> {
    let cfg = &ev.model.config;
    if cfg.n_ca == 0 {
        return Err(VoltaError::DegenerateInput("no discrete codes to sweep".into()));
    }
    let ctxs = contexts(ds);
    let mut varied = 0;
    for ex in &ctxs {
        let z = ev.prior_point(&ex.context)?;
        let base = latent::sample_codes(cfg.n_cg, cfg.n_ca, cfg.k, rng)?;
        let mut any = false;
        'codes: for j in 0..cfg.n_ca {
            let mut first = None;
            for v in 0..cfg.k {
                let c = Evaluator::with_code(&base, CodeIndex::Discrete(j), v as f64);
                let p = ev.predict_span(&ex.context, &z, &c)?;
                match first {
                    None => first = Some((p.start, p.end)),
                    Some(f) if f != (p.start, p.end) => {
                        any = true;
                        break 'codes;
                    }
                    _ => {}
                }
            }
        }
        varied += usize::from(any);
    }
    Ok(varied as f64 / ctxs.len().max(1) as f64)
}

/// Per-context diversity of `n` prior samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextDiversity {
    pub group: usize,
    pub self_bleu: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

pub fn diversity<R: Rng + ?Sized>(
    ev: &Evaluator<'_>,
    ds: &Dataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ContextDiversity>> {
    contexts(ds)
        .into_iter()
        .map(|ex| {
            let outs: Vec<Vec<usize>> = ev
                .sample_outputs(&ex.context, n, rng)?
                .iter()
                .map(Generation::tokens)
                .collect();
            Ok(ContextDiversity {
                group: ex.group,
                self_bleu: metrics::self_bleu(&outs, 4)?,
                distinct_1: metrics::distinct_k(&outs, 1).unwrap_or(0.0),
                distinct_2: metrics::distinct_k(&outs, 2).unwrap_or(0.0),
            })
        })
        .collect()
}

/// Scores targets with latents drawn from the prior; with `samples > 1` the
/// sequence likelihood is averaged over draws before taking the log.
pub struct PriorScorer<'a, R: Rng> {
    pub ev: &'a Evaluator<'a>,
    pub samples: usize,
    pub rng: R,
}

impl<R: Rng> SequenceScorer for PriorScorer<'_, R> {
    fn token_nlls(&mut self, ctx: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        let model = self.ev.model;
        let v = model.config.vocab_size;
        if let Some(&id) = target.iter().chain(ctx).find(|&&id| id >= v) {
            return Err(VoltaError::Vocabulary { id, vocab: v });
        }
        let mut per_draw: Vec<Vec<f64>> = Vec::with_capacity(self.samples.max(1));
        for _ in 0..self.samples.max(1) {
            let z = self.ev.draw_latent(ctx, &mut self.rng)?;
            let c = self.ev.draw_codes(&mut self.rng)?;
            let logits = model.decoder_forward(ctx, target, &z, &c)?;
            let mut nll = Vec::with_capacity(target.len() + 1);
            for (t, &y) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
                let row = &logits.data()[t * v..(t + 1) * v];
                nll.push(-latent::log_softmax(row)[y]);
            }
            per_draw.push(nll);
        }
        if per_draw.len() == 1 {
            return Ok(per_draw.pop().unwrap());
        }
        // log-mean-exp of sequence log-likelihoods, spread evenly over tokens
        let lls: Vec<f64> = per_draw.iter().map(|n| -n.iter().sum::<f64>()).collect();
        let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = max + (lls.iter().map(|l| (l - max).exp()).sum::<f64>() / lls.len() as f64).ln();
        let n = target.len() + 1;
        Ok(vec![-lme / n as f64; n])
    }
}

/// Posterior means over a dataset, for active units and export.
pub fn posterior_means(ev: &Evaluator<'_>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.examples
        .iter()
        .map(|ex| {
            Ok(ev
                .model
                .posterior(&ex.context, &posterior_target(ev.opts.task, ex))?
                .gaussian
                .mu)
        })
        .collect()
}

/// Generation context of an example under the evaluator's pipeline.
pub fn example_generation_context(ev: &Evaluator<'_>, ex: &Example) -> Vec<usize> {
    generation_context(ev.opts.task, ev.opts.pipeline, ex)
}

/// The standard report: PPL, AU, MI and per-context diversity averages.
pub fn evaluate<R: Rng + ?Sized>(
    ev: &Evaluator<'_>,
    ds: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<MetricsReport> {
    let mut rep = MetricsReport::default();
    let items: Vec<(Vec<usize>, Vec<usize>)> = ds
        .examples
        .iter()
        .map(|ex| (example_generation_context(ev, ex), ex.target.clone()))
        .collect();
    let mut scorer = PriorScorer {
        ev,
        samples: 1,
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
    };
    rep.insert("ppl", metrics::perplexity(&mut scorer, &items)?);
    let cfg = &ev.model.config;
    if cfg.n_zg > 0 && ds.len() >= 2 {
        let means = posterior_means(ev, ds)?;
        rep.insert("au", metrics::active_units(&means, 0.01)? as f64);
        let posts: Vec<_> = ds
            .examples
            .iter()
            .map(|ex| {
                Ok(ev
                    .model
                    .posterior(&ex.context, &posterior_target(ev.opts.task, ex))?
                    .gaussian)
            })
            .collect::<Result<_>>()?;
        rep.insert("mi", metrics::mutual_information(&posts, 16, rng)?);
    }
    if samples >= 2 {
        let div = diversity(ev, ds, samples, rng)?;
        let n = div.len() as f64;
        rep.insert("self_bleu", div.iter().map(|d| d.self_bleu).sum::<f64>() / n);
        rep.insert("distinct_1", div.iter().map(|d| d.distinct_1).sum::<f64>() / n);
        rep.insert("distinct_2", div.iter().map(|d| d.distinct_2).sum::<f64>() / n);
    }
    if ev.opts.task == Task::Dialog {
        // every response recorded for a history is a reference
        let pairs: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)> = ds
            .groups()
            .into_iter()
            .map(|group| {
                let ctx = &group[0].context;
                let hyps = ev
                    .sample_outputs(ctx, samples.max(1), rng)?
                    .into_iter()
                    .map(|g| g.text)
                    .collect();
                Ok((hyps, group.iter().map(|ex| ex.target.clone()).collect()))
            })
            .collect::<Result<_>>()?;
        let pr = metrics::bleu_precision_recall(&pairs, 4)?;
        rep.insert("bleu_precision", pr.precision);
        rep.insert("bleu_recall", pr.recall);
        rep.insert("bleu_f1", pr.f1);
    }
    if ev.opts.task == Task::Qag && cfg.n_ca > 0 {
        rep.insert("code_recovery", discrete_recovery_accuracy(ev, ds, 2, rng)?);
        rep.insert("span_variation", span_variation(ev, ds, rng)?);
    }
    Ok(rep)
}
