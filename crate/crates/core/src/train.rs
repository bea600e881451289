//! Run configuration, the per-step loss graph, optimizers and the training
//! loop.
//!
//! Every random draw of a step (reparametrization noise, Gumbel noise,
//! codes, batch order) comes from a ChaCha stream keyed by `(seed, step)`,
//! so a run is a pure function of its [`RunConfig`] and can resume from any
//! checkpoint without changing the trajectory.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_corpus, Corpus, Dataset, Example, SyntheticSpec, Task};
use crate::error::{Result, VoltaError};
use crate::graph::{Graph, Var};
use crate::latent::{self, draw_gumbels, draw_normals, GaussianVars, LatentCodes};
use crate::model::{ModelConfig, Net, Stream, VoltaModel};
use crate::objectives::{self, beta_at, LossParts, LossReport, LossWeights};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::{Vocab, EOS, PAD, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 5e-5,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// How latent variables enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentPolicy {
    /// Reparametrized samples and the KL term.
    Variational,
    /// `z_g = μ`, `z_a = softmax(logits)`, no KL term: a plain autoencoder.
    Deterministic,
}

/// Where latent codes come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodePolicy {
    /// Fresh draw from the code prior at every step.
    Sampled,
    /// One draw at initialization, shared by every example for the whole run.
    Frozen,
    /// Constant codes: `c_g = 0`, `c_a = 0`.
    Fixed,
}

/// Order of the two QAG sub-tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QagPipeline {
    /// The question is generated from the context and the answer tokens.
    SpanFirst,
    /// The question is generated from the context alone.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// When set, overrides `steps` with `ceil(epochs · n_train / batch_size)`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub task: Task,
    pub corpus: CorpusSource,
    /// Fraction of contexts held out for evaluation.
    pub holdout: f64,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub latent_policy: LatentPolicy,
    pub code_policy: CodePolicy,
    pub pipeline: QagPipeline,
    /// Steps between checkpoints written by [`Trainer::run`]; 0 writes only
    /// the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            steps: 1000,
            epochs: None,
            batch_size: 8,
            seed: 0,
            task: Task::Qag,
            corpus: CorpusSource::Synthetic(SyntheticSpec::default()),
            holdout: 0.2,
            tau: 1.0,
            latent_policy: LatentPolicy::Variational,
            code_policy: CodePolicy::Sampled,
            pipeline: QagPipeline::SpanFirst,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(VoltaError::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(VoltaError::Config(format!(
                "learning rate {} must be > 0",
                self.optimizer.lr
            )));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(VoltaError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.tau > 0.0) {
            return Err(VoltaError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(VoltaError::Config("holdout must lie in [0, 1)".into()));
        }
        if let CorpusSource::Synthetic(spec) = &self.corpus {
            if spec.task != self.task {
                return Err(VoltaError::Config(format!(
                    "synthetic corpus task {} differs from run task {}",
                    spec.task, self.task
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| VoltaError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::Synthetic(spec) => make_synthetic_corpus(spec),
            CorpusSource::Path(p) => Corpus::read(p, self.task),
        }
    }

    /// Number of optimizer steps for a training set of `n_train` examples.
    pub fn total_steps(&self, n_train: usize) -> usize {
        match self.epochs {
            Some(e) => (e * n_train).div_ceil(self.batch_size),
            None => self.steps,
        }
    }
}

/// Exogenous randomness of one example in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleNoise {
    /// Standard normals for `z_g`.
    pub eps: Vec<f64>,
    /// Gumbel(0, 1) draws for `z_a`, row-major `[n_za × k]`.
    pub gumbels: Vec<f64>,
    pub codes: LatentCodes,
}

impl ExampleNoise {
    pub fn draw(cfg: &ModelConfig, codes: LatentCodes, rng: &mut ChaCha8Rng) -> Self {
        ExampleNoise {
            eps: draw_normals(cfg.n_zg, rng),
            gumbels: draw_gumbels(cfg.n_za * cfg.k, rng),
            codes,
        }
    }
}

/// Codes that stand for "fixed": all continuous codes 0, all discrete codes 0.
pub fn fixed_codes(cfg: &ModelConfig) -> LatentCodes {
    LatentCodes {
        continuous: vec![0.0; cfg.n_cg],
        discrete: vec![0; cfg.n_ca],
        k: cfg.k,
    }
}

/// Settings that shape one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions<'a> {
    pub task: Task,
    pub weights: &'a LossWeights,
    pub beta: f64,
    pub tau: f64,
    pub policy: LatentPolicy,
    pub pipeline: QagPipeline,
}

/// Loss nodes of one step.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub total: Var,
    pub ae: Var,
    pub reg: Option<Var>,
    pub vmim: Option<Var>,
    pub qami: Option<Var>,
    /// Batch-mean KL per Gaussian dimension, then per categorical variable.
    pub kl: Option<Var>,
}

impl StepGraph {
    pub fn parts(&self, g: &Graph) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.item(x));
        LossParts {
            ae: g.item(self.ae),
            reg: v(self.reg),
            vmim: v(self.vmim),
            qami: v(self.qami),
        }
    }
}

fn standard_gaussian(g: &mut Graph, n: usize) -> GaussianVars {
    let z = Tensor::zeros(&[n]);
    GaussianVars {
        mu: g.constant(&z),
        log_sigma: g.constant(&z),
    }
}

fn sum_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = g.add(acc, *x)?;
    }
    Ok(acc)
}

fn mean_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let s = sum_vars(g, xs)?;
    Ok(g.scale(s, 1.0 / xs.len() as f64))
}

/// Sequence the question (or response, or sentence) is generated from.
pub fn generation_context(task: Task, pipeline: QagPipeline, ex: &Example) -> Vec<usize> {
    match (task, pipeline) {
        (Task::Qag, QagPipeline::SpanFirst) => {
            let mut c = ex.context.clone();
            c.push(SEP);
            c.extend_from_slice(ex.answer());
            c
        }
        _ => ex.context.clone(),
    }
}

/// Sequence the posterior encodes alongside the context.
pub fn posterior_target(task: Task, ex: &Example) -> Vec<usize> {
    let mut t = ex.target.clone();
    if task == Task::Qag {
        t.push(SEP);
        t.extend_from_slice(ex.answer());
    }
    t
}

struct ExampleTerms {
    ae: Var,
    vmim: Option<Var>,
    kl_g: Option<Var>,
    kl_a: Option<Var>,
    h_q: Option<Var>,
    h_a: Option<Var>,
}

fn example_terms(
    g: &mut Graph,
    net: Net<'_>,
    ex: &Example,
    noise: &ExampleNoise,
    o: &StepOptions<'_>,
) -> Result<ExampleTerms> {
    let cfg = net.cfg;
    let qag = o.task == Task::Qag;
    if qag && ex.span.is_none() {
        return Err(VoltaError::DegenerateInput("qag example without an answer span".into()));
    }
    let post = net.posterior_vars(g, &ex.context, &posterior_target(o.task, ex))?;
    let memory = net.context_memory(g, &ex.context)?;

    let variational = o.policy == LatentPolicy::Variational;
    let mut kl_g = None;
    let mut kl_a = None;
    if variational {
        let prior = match o.task {
            Task::Lm => None,
            _ => Some(net.prior_vars(g, &ex.context, memory)?),
        };
        if let Some(q) = post.gaussian {
            let p = match prior.and_then(|p| p.gaussian) {
                Some(p) => p,
                None => standard_gaussian(g, cfg.n_zg),
            };
            kl_g = Some(latent::kl_gaussian_var(g, q, p)?);
        }
        if qag {
            if let (Some(q), Some(p)) = (post.categorical, prior.and_then(|p| p.categorical)) {
                kl_a = Some(latent::kl_categorical_var(g, q, p)?);
            }
        }
    }

    let z_g = match post.gaussian {
        Some(q) if variational => Some(latent::sample_gaussian_var(g, q, &noise.eps)?),
        Some(q) => Some(q.mu),
        None => None,
    };

    // generation pass
    let gen_ctx = generation_context(o.task, o.pipeline, ex);
    let gen_memory = if gen_ctx == ex.context {
        memory
    } else {
        net.context_memory(g, &gen_ctx)?
    };
    let gen_codes = LatentCodes {
        continuous: noise.codes.continuous.clone(),
        discrete: vec![],
        k: noise.codes.k,
    };
    let s_g = net.stream_input(g, Stream::Generation, z_g, &gen_codes)?;
    let h = net.generation_states(g, &gen_ctx, gen_memory, &ex.target, s_g)?;
    let logits = net.lm_logits(g, h)?;
    let mut targets = ex.target.clone();
    targets.push(EOS);
    let mut ae = objectives::reconstruction_loss(g, logits, &targets, PAD)?;

    let n = ex.target.len();
    let q_rows = if n > 0 { g.slice(h, 0, 1, n + 1)? } else { h };
    let theta_g = if cfg.n_cg > 0 {
        Some(net.recover_continuous(g, q_rows)?)
    } else {
        None
    };

    let mut theta_a = None;
    let mut h_q = None;
    let mut h_a = None;
    if qag {
        let z_a = match post.categorical {
            Some(q) if variational => Some(latent::gumbel_softmax_var(g, q, &noise.gumbels, o.tau)?),
            Some(q) => Some(g.softmax(q.logits, 1)?),
            None => None,
        };
        let s_a = net.stream_input(g, Stream::Answer, z_a, &noise.codes)?;
        let hs = net.span_states(g, &ex.context, memory, s_a)?;
        let (sl, el) = net.span_logits(g, hs)?;
        let (s, e) = ex.span.expect("checked above");
        let ce_s = g.cross_entropy(sl, &[s - 1], usize::MAX)?;
        let ce_e = g.cross_entropy(el, &[e - 1], usize::MAX)?;
        ae = sum_vars(g, &[ae, ce_s, ce_e])?;
        if cfg.n_ca > 0 {
            let a_rows = g.slice(hs, 0, s - 1, e)?;
            theta_a = Some(net.recover_discrete(g, a_rows)?);
        }
        h_q = Some(g.mean(q_rows, Some(0))?);
        h_a = Some(g.mean(hs, Some(0))?);
    }

    let disc: &[usize] = if theta_a.is_some() { &noise.codes.discrete } else { &[] };
    let vmim = objectives::vmim_var(g, theta_g, &noise.codes.continuous, theta_a, disc)?;
    Ok(ExampleTerms {
        ae,
        vmim,
        kl_g,
        kl_a,
        h_q,
        h_a,
    })
}

/// Whether QAMI contributes for this task and batch size.
pub fn qami_active(task: Task, weights: &LossWeights, batch: usize) -> bool {
    task == Task::Qag && weights.qami_weight > 0.0 && batch >= 2
}

/// Builds the full training loss of one batch on `g`.
pub fn build_step_loss(
    g: &mut Graph,
    net: Net<'_>,
    batch: &[&Example],
    noise: &[ExampleNoise],
    o: &StepOptions<'_>,
) -> Result<StepGraph> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(VoltaError::Contract(format!(
            "{} examples with {} noise records",
            batch.len(),
            noise.len()
        )));
    }
    let terms: Vec<ExampleTerms> = batch
        .iter()
        .zip(noise)
        .map(|(ex, nz)| example_terms(g, net, ex, nz, o))
        .collect::<Result<_>>()?;
    let b = terms.len();

    let ae_terms: Vec<Var> = terms.iter().map(|t| t.ae).collect();
    let ae = mean_vars(g, &ae_terms)?;

    let batch_kl = |g: &mut Graph, xs: Vec<Option<Var>>| -> Result<Option<Var>> {
        let xs: Vec<Var> = xs.into_iter().flatten().collect();
        if xs.is_empty() {
            Ok(None)
        } else {
            mean_vars(g, &xs).map(Some)
        }
    };
    let kl_g = batch_kl(g, terms.iter().map(|t| t.kl_g).collect())?;
    let kl_a = batch_kl(g, terms.iter().map(|t| t.kl_a).collect())?;
    let reg = objectives::regularization_var(g, kl_g, kl_a, o.weights.lambda_fb, o.weights.reg_separate)?;
    let kl = match (kl_g, kl_a) {
        (Some(a), Some(c)) => Some(g.concat(&[a, c], 0)?),
        (a, c) => a.or(c),
    };

    let vm: Vec<Var> = terms.iter().filter_map(|t| t.vmim).collect();
    let vmim = if vm.is_empty() { None } else { Some(mean_vars(g, &vm)?) };

    let qami = if qami_active(o.task, o.weights, b) {
        let hq: Vec<Var> = terms.iter().map(|t| t.h_q.expect("qag rows")).collect();
        let ha: Vec<Var> = terms.iter().map(|t| t.h_a.expect("qag rows")).collect();
        let hq = g.concat(&hq, 0)?;
        let ha = g.concat(&ha, 0)?;
        let s = net.qami_logits(g, hq, ha)?;
        let flat = g.reshape(s, &[b * b])?;
        let pos: Vec<usize> = (0..b).map(|i| i * b + i).collect();
        let neg_q: Vec<usize> = (0..b).map(|i| ((i + 1) % b) * b + i).collect();
        let neg_a: Vec<usize> = (0..b).map(|i| i * b + (i + 1) % b).collect();
        let p = g.take(flat, &pos)?;
        let nq = g.take(flat, &neg_q)?;
        let na = g.take(flat, &neg_a)?;
        Some(objectives::qami_var(g, p, nq, na)?)
    } else {
        None
    };

    let mut total = ae;
    for (term, w) in [(reg, o.beta), (vmim, o.weights.gamma), (qami, o.weights.qami_weight)] {
        if let Some(t) = term {
            if w != 0.0 {
                let wt = g.scale(t, w);
                total = g.add(total, wt)?;
            }
        }
    }
    Ok(StepGraph {
        total,
        ae,
        reg,
        vmim,
        qami,
        kl,
    })
}

/// Optimizer state: one buffer per parameter (momentum, or Adam's first
/// moment) plus Adam's second moment, in parameter-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (n, t) in p.iter() {
                s.insert(n.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        let v = match kind {
            OptimizerKind::Adam => zeros(params),
            OptimizerKind::Sgd => ParamStore::new(),
        };
        OptimizerState {
            kind,
            t: 0,
            m: zeros(params),
            v,
        }
    }

    /// Applies one update from `grads` (parameter name → gradient).
    pub fn apply(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
    ) -> Result<()> {
        self.t += 1;
        let mut scale = 1.0;
        if cfg.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.clip_norm {
                scale = cfg.clip_norm / norm;
            }
        }
        let t = self.t as i32;
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, mi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(grad) {
                        *mi = cfg.momentum * *mi + gi * scale;
                        *w -= cfg.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v.get_mut(name)?;
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    for (((w, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad) {
                        let gi = gi * scale;
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                        *w -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Random stream for one purpose of one step.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_FROZEN: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_STEP: u64 = 1 << 48;

/// Live training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: VoltaModel,
    pub optimizer: OptimizerState,
    pub train: Dataset,
    pub test: Dataset,
    pub step: usize,
    pub total_steps: usize,
    frozen: LatentCodes,
}

/// Model config with `vocab_size` taken from the corpus vocabulary.
pub fn fit_model_config(cfg: &ModelConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.clone()
    }
}

impl Trainer {
    /// Loads the corpus, builds the vocabulary and initializes the model.
    pub fn new(mut config: RunConfig) -> Result<Trainer> {
        config.validate()?;
        let corpus = config.load_corpus()?;
        let vocab = corpus.build_vocab();
        config.model = fit_model_config(&config.model, &vocab);
        let model = VoltaModel::new(config.model.clone(), &mut stream_rng(config.seed, STREAM_INIT))?;
        Trainer::with_state(config, vocab, corpus, model, None, 0)
    }

    /// Rebuilds a trainer around existing weights and optimizer state.
    pub fn with_state(
        config: RunConfig,
        vocab: Vocab,
        corpus: Corpus,
        model: VoltaModel,
        optimizer: Option<OptimizerState>,
        step: usize,
    ) -> Result<Trainer> {
        config.validate()?;
        let (train_c, test_c) = corpus.split(config.holdout);
        let train = Dataset::from_corpus(&train_c, &vocab)?;
        let test = Dataset::from_corpus(&test_c, &vocab)?;
        if train.is_empty() {
            return Err(VoltaError::DegenerateInput("empty training set".into()));
        }
        let need = train.max_sequence().max(test.max_sequence());
        if need > config.model.max_seq {
            return Err(VoltaError::Length {
                len: need,
                max: config.model.max_seq,
            });
        }
        let mut rng = stream_rng(config.seed, STREAM_FROZEN);
        let m = &config.model;
        let frozen = latent::sample_codes(m.n_cg, m.n_ca, m.k, &mut rng)?;
        let optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(config.optimizer.kind, &model.params));
        let total_steps = config.total_steps(train.len());
        Ok(Trainer {
            config,
            vocab,
            model,
            optimizer,
            train,
            test,
            step,
            total_steps,
            frozen,
        })
    }

    /// Example indices of the batch at `step`: epochs are seeded shuffles.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.train.len();
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut pos = step * b;
        while out.len() < b {
            let epoch = pos / n;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.config.seed, STREAM_SHUFFLE + epoch as u64));
            let from = pos % n;
            let take = (b - out.len()).min(n - from);
            out.extend_from_slice(&order[from..from + take]);
            pos += take;
        }
        out
    }

    /// Noise for the batch at `step`.
    pub fn step_noise(&self, step: usize, indices: &[usize]) -> Result<Vec<ExampleNoise>> {
        let m = &self.config.model;
        let mut rng = stream_rng(self.config.seed, STREAM_STEP + step as u64);
        indices
            .iter()
            .map(|_| {
                let codes = match self.config.code_policy {
                    CodePolicy::Sampled => latent::sample_codes(m.n_cg, m.n_ca, m.k, &mut rng)?,
                    CodePolicy::Frozen => self.frozen.clone(),
                    CodePolicy::Fixed => fixed_codes(m),
                };
                Ok(ExampleNoise::draw(m, codes, &mut rng))
            })
            .collect()
    }

    pub fn step_options(&self, step: usize) -> Result<StepOptions<'_>> {
        Ok(StepOptions {
            task: self.config.task,
            weights: &self.config.loss,
            beta: beta_at(step, self.total_steps.max(step), &self.config.loss)?,
            tau: self.config.tau,
            policy: self.config.latent_policy,
            pipeline: self.config.pipeline,
        })
    }

    /// Runs one optimizer step and returns its report. On a non-finite loss
    /// the weights are left untouched and a numeric error is returned.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let noise = self.step_noise(step, &idx)?;
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.train.examples[i]).collect();
        let opts = self.step_options(step)?;
        let mut g = Graph::new();
        let sg = build_step_loss(&mut g, self.model.net(), &batch, &noise, &opts)?;
        let report = objectives::total_loss(
            sg.parts(&g),
            sg.kl.map_or_else(Vec::new, |k| g.value(k).to_vec()),
            &self.config.loss,
            step,
            self.total_steps.max(step),
            qami_active(self.config.task, &self.config.loss, batch.len()),
        )?;
        g.backward(sg.total)?;
        let grads: Vec<(String, Vec<f64>)> = g
            .param_grads()
            .filter_map(|(n, gr)| gr.map(|gr| (n.to_string(), gr.to_vec())))
            .collect();
        if let Some(bad) = grads.iter().flat_map(|(_, gr)| gr.iter()).find(|x| !x.is_finite()) {
            return Err(VoltaError::Numeric {
                term: "gradient",
                value: *bad,
            });
        }
        self.optimizer
            .apply(&self.config.optimizer, &mut self.model.params, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `total_steps`, calling `on_step` after each step. A
    /// numeric failure stops the run with a divergence error; the weights
    /// are those of the last good step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &LossReport) -> Result<()>) -> Result<()> {
        while self.step < self.total_steps {
            let step = self.step;
            match self.train_step() {
                Ok(r) => on_step(self, &r)?,
                Err(VoltaError::Numeric { value, .. }) => return Err(VoltaError::Diverged { step, loss: value }),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// Configuration of the small model used by the end-to-end gradient check:
/// vocabulary 16, width 8, one layer.
pub fn toy_check_config(mode: crate::model::Mode) -> ModelConfig {
    ModelConfig {
        mode,
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        max_seq: 32,
        d_ff: 16,
        n_zg: 3,
        n_cg: 2,
        n_za: 2,
        n_ca: 2,
        k: 3,
        n_latent_slots: 2,
        share_latent_kv: false,
    }
}

/// Finite-difference check of the full qag training loss (reconstruction,
/// KL, code recovery and QAMI) with respect to every parameter of a toy
/// model. Returns the maximum relative error.
pub fn end_to_end_grad_check(mode: crate::model::Mode, seed: u64, eps: f64) -> Result<f64> {
    use rand::Rng;
    let cfg = toy_check_config(mode);
    let mut rng = stream_rng(seed, STREAM_INIT);
    let model = VoltaModel::new(cfg.clone(), &mut rng)?;
    let examples: Vec<Example> = (0..3)
        .map(|i| {
            let context: Vec<usize> = (0..5).map(|_| rng.random_range(4..16)).collect();
            let target: Vec<usize> = (0..3).map(|_| rng.random_range(4..16)).collect();
            let s = 1 + i % 3;
            Example {
                group: i,
                context,
                target,
                span: Some((s, s + 1)),
            }
        })
        .collect();
    let noise: Vec<ExampleNoise> = examples
        .iter()
        .map(|_| {
            let codes = latent::sample_codes(cfg.n_cg, cfg.n_ca, cfg.k, &mut rng)?;
            Ok(ExampleNoise::draw(&cfg, codes, &mut rng))
        })
        .collect::<Result<_>>()?;
    // λ = 0 keeps every KL term on the smooth side of the hinge
    let weights = LossWeights {
        lambda_fb: 0.0,
        ..LossWeights::default()
    };
    let opts = StepOptions {
        task: Task::Qag,
        weights: &weights,
        beta: 0.1,
        tau: 1.0,
        policy: LatentPolicy::Variational,
        pipeline: QagPipeline::SpanFirst,
    };
    let batch: Vec<&Example> = examples.iter().collect();
    crate::gradcheck::grad_check_params(
        |g, store| Ok(build_step_loss(g, Net::new(&cfg, store), &batch, &noise, &opts)?.total),
        &model.params,
        eps,
        |_| true,
    )
}
