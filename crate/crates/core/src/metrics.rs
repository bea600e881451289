//! Diversity and quality metrics over tokenized sentences.
//!
//! Sentences are slices of any hashable token type, so the same code runs
//! on token ids and on whitespace-split strings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use rand::Rng;
use serde::Serialize;

use crate::error::{Result, VoltaError};
use crate::latent::{draw_normals, GaussianPosterior, HALF_LN_2PI};

/// Whitespace tokenization for string corpora.
pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Denominator used by [`distinct_k_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistinctDenominator {
    /// Total generated words.
    #[default]
    Words,
    /// Total k-grams, the more common convention.
    KGrams,
}

/// Unique k-grams over total words.
pub fn distinct_k<T: Eq + Hash, S: AsRef<[T]>>(sentences: &[S], k: usize) -> Result<f64> {
    distinct_k_with(sentences, k, DistinctDenominator::Words)
}

pub fn distinct_k_with<T: Eq + Hash, S: AsRef<[T]>>(
    sentences: &[S],
    k: usize,
    denom: DistinctDenominator,
) -> Result<f64> {
    if k == 0 {
        return Err(VoltaError::Contract("distinct-k needs k >= 1".into()));
    }
    let total_words: usize = sentences.iter().map(|s| s.as_ref().len()).sum();
    if total_words == 0 {
        return Err(VoltaError::DegenerateInput("empty corpus".into()));
    }
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total_grams = 0;
    for s in sentences {
        for gram in s.as_ref().windows(k) {
            unique.insert(gram);
            total_grams += 1;
        }
    }
    let denom = match denom {
        DistinctDenominator::Words => total_words,
        DistinctDenominator::KGrams => total_grams,
    };
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / denom as f64)
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in s.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU in `[0, 1]` of `hyp` against one or more references.
///
/// Modified n-gram precisions for `n = 1..=max_n`, add-one smoothing for
/// `n > 1`, geometric mean, and the classic brevity penalty against the
/// closest reference length (shorter wins ties).
pub fn sentence_bleu<T: Eq + Hash, S: AsRef<[T]>>(hyp: &[T], refs: &[S], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(VoltaError::Contract("BLEU needs max_n >= 1".into()));
    }
    if refs.is_empty() {
        return Err(VoltaError::DegenerateInput("BLEU needs a reference".into()));
    }
    let c = hyp.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, cnt) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        let clipped: usize = hyp_counts
            .iter()
            .map(|(g, cnt)| (*cnt).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c.saturating_sub(n - 1);
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let r = refs
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Mean BLEU of each sentence against all the others, times 100.
pub fn self_bleu<T: Eq + Hash, S: AsRef<[T]>>(sentences: &[S], max_n: usize) -> Result<f64> {
    if sentences.len() < 2 {
        return Err(VoltaError::DegenerateInput(
            "self-BLEU needs at least two sentences".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..sentences.len() {
        let others: Vec<&[T]> = sentences
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| s.as_ref())
            .collect();
        total += sentence_bleu(sentences[i].as_ref(), &others, max_n)?;
    }
    Ok(100.0 * total / sentences.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// BLEU precision and recall over contexts.
///
/// For each context the matrix `BLEU(hyp_i, [ref_j])` is computed once.
/// Precision averages each hypothesis's best score over references; recall
/// averages each reference's best score over hypotheses.
pub fn bleu_precision_recall<T: Eq + Hash, S: AsRef<[T]>>(
    contexts: &[(Vec<S>, Vec<S>)],
    max_n: usize,
) -> Result<PrecisionRecall> {
    if contexts.is_empty() {
        return Err(VoltaError::DegenerateInput("no contexts".into()));
    }
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    for (hyps, refs) in contexts {
        if hyps.is_empty() || refs.is_empty() {
            return Err(VoltaError::DegenerateInput(
                "every context needs a hypothesis and a reference".into(),
            ));
        }
        let mut m = vec![vec![0.0; refs.len()]; hyps.len()];
        for (i, h) in hyps.iter().enumerate() {
            for (j, r) in refs.iter().enumerate() {
                m[i][j] = sentence_bleu(h.as_ref(), &[r.as_ref()], max_n)?;
            }
        }
        for row in &m {
            p_sum += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p_n += 1;
        }
        for j in 0..refs.len() {
            r_sum += m.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            r_n += 1;
        }
    }
    let precision = p_sum / p_n as f64;
    let recall = r_sum / r_n as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PrecisionRecall { precision, recall, f1 })
}

/// Anything that can assign per-token negative log-likelihoods to a target
/// given a context.
pub trait SequenceScorer {
    /// One NLL per predicted token (the target tokens and the end marker).
    fn token_nlls(&mut self, ctx: &[usize], target: &[usize]) -> Result<Vec<f64>>;
}

/// `exp` of the mean token NLL over `items`.
pub fn perplexity<S: SequenceScorer + ?Sized>(scorer: &mut S, items: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (ctx, target) in items {
        let nlls = scorer.token_nlls(ctx, target)?;
        sum += nlls.iter().sum::<f64>();
        n += nlls.len();
    }
    if n == 0 {
        return Err(VoltaError::DegenerateInput("no tokens to score".into()));
    }
    Ok((sum / n as f64).exp())
}

/// Dimensions whose posterior-mean population variance across the data
/// exceeds `delta`.
pub fn active_units(means: &[Vec<f64>], delta: f64) -> Result<usize> {
    if means.len() < 2 {
        return Err(VoltaError::DegenerateInput(
            "active units need at least two datapoints".into(),
        ));
    }
    let d = means[0].len();
    if let Some(row) = means.iter().find(|r| r.len() != d) {
        return Err(VoltaError::Dimension {
            op: "active_units",
            lhs: vec![d],
            rhs: vec![row.len()],
        });
    }
    let n = means.len() as f64;
    let mut active = 0;
    for j in 0..d {
        let mean = means.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = means.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        if var > delta {
            active += 1;
        }
    }
    Ok(active)
}

fn log_density(post: &GaussianPosterior, z: &[f64]) -> f64 {
    post.mu
        .iter()
        .zip(&post.log_sigma)
        .zip(z)
        .map(|((m, l), x)| {
            let u = (x - m) / l.exp();
            -HALF_LN_2PI - l - 0.5 * u * u
        })
        .sum()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Monte-Carlo estimate of `E[ln q(z|x) − ln q_agg(z)]`, where `q_agg` is
/// the equal-weight mixture of the batch posteriors.
pub fn mutual_information<R: Rng + ?Sized>(
    posteriors: &[GaussianPosterior],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if posteriors.len() < 2 {
        return Err(VoltaError::DegenerateInput(
            "mutual information needs a batch of at least two".into(),
        ));
    }
    if samples == 0 {
        return Err(VoltaError::Contract(
            "mutual information needs at least one sample".into(),
        ));
    }
    let d = posteriors[0].len();
    if d == 0 || posteriors.iter().any(|p| p.len() != d) {
        return Err(VoltaError::DegenerateInput(
            "posteriors must share a positive dimension".into(),
        ));
    }
    let ln_n = (posteriors.len() as f64).ln();
    let mut total = 0.0;
    let mut logs = vec![0.0; posteriors.len()];
    for q in posteriors {
        for _ in 0..samples {
            let eps = draw_normals(d, rng);
            let z: Vec<f64> = (0..d).map(|i| q.mu[i] + q.log_sigma[i].exp() * eps[i]).collect();
            for (j, p) in posteriors.iter().enumerate() {
                logs[j] = log_density(p, &z);
            }
            total += log_density(q, &z) - (logsumexp(&logs) - ln_n);
        }
    }
    Ok(total / (posteriors.len() * samples) as f64)
}

/// Flat metric report: name → value.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport(pub BTreeMap<String, f64>);

impl MetricsReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("metric map serializes")
    }

    /// Two-column plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.0.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.0 {
            out.push_str(&format!("{k:<width$}  {v:.6}\n"));
        }
        out
    }
}
