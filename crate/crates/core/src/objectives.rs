//! Loss terms, the β schedule and their combination.
//!
//! Plain `f64` versions define each term; the `*_var` versions build the
//! same expression on a [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::graph::{Graph, Var};
use crate::latent::{code_log_likelihood, CodeValue, RecoveryParam, HALF_LN_2PI};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta_max: f64,
    pub warmup_fraction: f64,
    /// Linear warmup when true; otherwise β is `beta_max` from step 0.
    pub anneal: bool,
    pub gamma: f64,
    /// Free-bits floor λ.
    pub lambda_fb: f64,
    /// Only used when the task has question/answer heads.
    pub qami_weight: f64,
    /// Average Gaussian and categorical KL groups separately, then average
    /// the two group means, instead of one joint mean.
    pub reg_separate: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_max: 0.1,
            warmup_fraction: 0.25,
            anneal: true,
            gamma: 1.0,
            lambda_fb: 1.0,
            qami_weight: 1.0,
            reg_separate: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_max", self.beta_max),
            ("gamma", self.gamma),
            ("lambda_fb", self.lambda_fb),
            ("qami_weight", self.qami_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(VoltaError::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(VoltaError::Config(format!(
                "warmup_fraction must lie in (0, 1], got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ae: f64,
    pub reg: f64,
    pub vmim: f64,
    pub qami: f64,
    pub total: f64,
    pub kl_per_dim: Vec<f64>,
    pub beta_used: f64,
    pub gamma: f64,
    pub qami_weight: f64,
}

impl LossReport {
    /// `ae + β·reg + γ·vmim + w·qami` from the stored fields.
    pub fn recompute_total(&self) -> f64 {
        combine(
            self.ae,
            self.reg,
            self.vmim,
            self.qami,
            self.beta_used,
            self.gamma,
            self.qami_weight,
        )
    }
}

fn combine(ae: f64, reg: f64, vmim: f64, qami: f64, beta: f64, gamma: f64, qw: f64) -> f64 {
    ae + beta * reg + gamma * vmim + qw * qami
}

/// β at `step` of `total_steps`.
pub fn beta_at(step: usize, total_steps: usize, w: &LossWeights) -> Result<f64> {
    if step > total_steps {
        return Err(VoltaError::Contract(format!(
            "step {step} is past total_steps {total_steps}"
        )));
    }
    if !w.anneal {
        return Ok(w.beta_max);
    }
    let warm = w.warmup_fraction * total_steps as f64;
    if warm <= 0.0 || step as f64 >= warm {
        Ok(w.beta_max)
    } else {
        Ok(w.beta_max * step as f64 / warm)
    }
}

/// Cross-entropy of `[n × V]` logits against targets, ignoring `ignore_id`.
pub fn reconstruction_loss(g: &mut Graph, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
    g.cross_entropy(logits, targets, ignore_id)
}

/// Mean of `max(λ, KL_i)` over Gaussian dimensions and categorical
/// variables jointly.
pub fn regularization_loss(kl_gauss: &[f64], kl_cat: &[f64], lambda: f64) -> Result<f64> {
    regularization_loss_with(kl_gauss, kl_cat, lambda, false)
}

pub fn regularization_loss_with(kl_gauss: &[f64], kl_cat: &[f64], lambda: f64, separate: bool) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(VoltaError::Contract(format!("free-bits floor {lambda} must be >= 0")));
    }
    if let Some(kl) = kl_gauss.iter().chain(kl_cat).find(|k| !(**k >= 0.0)) {
        return Err(VoltaError::Contract(format!("negative or NaN KL term {kl}")));
    }
    let hinge = |xs: &[f64]| xs.iter().map(|k| k.max(lambda)).sum::<f64>();
    if separate {
        let groups: Vec<f64> = [kl_gauss, kl_cat]
            .iter()
            .filter(|xs| !xs.is_empty())
            .map(|xs| hinge(xs) / xs.len() as f64)
            .collect();
        if groups.is_empty() {
            return Ok(0.0);
        }
        Ok(groups.iter().sum::<f64>() / groups.len() as f64)
    } else {
        let n = kl_gauss.len() + kl_cat.len();
        if n == 0 {
            return Ok(0.0);
        }
        Ok((hinge(kl_gauss) + hinge(kl_cat)) / n as f64)
    }
}

/// Graph form of [`regularization_loss_with`]; `None` when there are no
/// latent variables.
pub fn regularization_var(
    g: &mut Graph,
    kl_gauss: Option<Var>,
    kl_cat: Option<Var>,
    lambda: f64,
    separate: bool,
) -> Result<Option<Var>> {
    let parts: Vec<Var> = [kl_gauss, kl_cat].into_iter().flatten().collect();
    if parts.is_empty() {
        return Ok(None);
    }
    if separate && parts.len() == 2 {
        let a = g.clamp_min(parts[0], lambda);
        let b = g.clamp_min(parts[1], lambda);
        let ma = g.mean(a, None)?;
        let mb = g.mean(b, None)?;
        let s = g.add(ma, mb)?;
        return Ok(Some(g.scale(s, 0.5)));
    }
    let all = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 0)?
    };
    let hinged = g.clamp_min(all, lambda);
    Ok(Some(g.mean(hinged, None)?))
}

/// Mean over codes of `−ln q_θ(c)`.
pub fn vmim_loss(thetas: &[RecoveryParam], codes: &[CodeValue]) -> Result<f64> {
    if thetas.len() != codes.len() {
        return Err(VoltaError::Contract(format!(
            "{} recovery parameters for {} codes",
            thetas.len(),
            codes.len()
        )));
    }
    if codes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, c) in thetas.iter().zip(codes) {
        total -= code_log_likelihood(t, *c)?;
    }
    Ok(total / codes.len() as f64)
}

/// Graph form of [`vmim_loss`]: `cont_theta` is `[n_cg]` means,
/// `disc_logits` is `[n_ca × k]`.
pub fn vmim_var(
    g: &mut Graph,
    cont_theta: Option<Var>,
    cont_codes: &[f64],
    disc_logits: Option<Var>,
    disc_codes: &[usize],
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    let mut n = 0usize;
    if let Some(theta) = cont_theta {
        if g.numel(theta) != cont_codes.len() {
            return Err(VoltaError::Contract(
                "continuous recovery heads and codes disagree".into(),
            ));
        }
        let c = g.constant(&crate::Tensor::new(g.shape(theta).to_vec(), cont_codes.to_vec())?);
        let d = g.sub(theta, c)?;
        let d2 = g.mul(d, d)?;
        let s = g.sum(d2);
        let s = g.scale(s, 0.5);
        terms.push(g.add_scalar(s, HALF_LN_2PI * cont_codes.len() as f64));
        n += cont_codes.len();
    }
    if let Some(logits) = disc_logits {
        if g.shape(logits)[0] != disc_codes.len() {
            return Err(VoltaError::Contract(
                "discrete recovery heads and codes disagree".into(),
            ));
        }
        let ce = g.cross_entropy(logits, disc_codes, usize::MAX)?;
        terms.push(g.scale(ce, disc_codes.len() as f64));
        n += disc_codes.len();
    }
    if n == 0 {
        return Ok(None);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(Some(g.scale(total, 1.0 / n as f64)))
}

/// `−(mean ln g⁺ + ½ mean ln(1 − g̃_q) + ½ mean ln(1 − g̃_a))`.
pub fn qami_loss(pos: &[f64], neg_q: &[f64], neg_a: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg_q.is_empty() || neg_a.is_empty() {
        return Err(VoltaError::Contract(
            "QAMI needs positive and both negative score lists".into(),
        ));
    }
    if let Some(s) = pos.iter().chain(neg_q).chain(neg_a).find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(VoltaError::Contract(format!("QAMI score {s} outside (0, 1)")));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|x| f(*x)).sum::<f64>() / xs.len() as f64;
    Ok(-(mean(pos, &|x| x.ln()) + 0.5 * mean(neg_q, &|x| (1.0 - x).ln()) + 0.5 * mean(neg_a, &|x| (1.0 - x).ln())))
}

/// Graph form of [`qami_loss`] on pre-sigmoid scores, using `ln σ(x)` and
/// `ln(1 − σ(x)) = ln σ(−x)` for stability.
pub fn qami_var(g: &mut Graph, pos_logits: Var, neg_q_logits: Var, neg_a_logits: Var) -> Result<Var> {
    let lp = g.log_sigmoid(pos_logits);
    let a = g.mean(lp, None)?;
    let nq = g.neg(neg_q_logits);
    let lq = g.log_sigmoid(nq);
    let b = g.mean(lq, None)?;
    let na = g.neg(neg_a_logits);
    let la = g.log_sigmoid(na);
    let c = g.mean(la, None)?;
    let bc = g.add(b, c)?;
    let half = g.scale(bc, 0.5);
    let s = g.add(a, half)?;
    Ok(g.neg(s))
}

/// Per-term values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ae: f64,
    pub reg: f64,
    pub vmim: f64,
    pub qami: f64,
}

/// Weighted total. `qami_active` selects whether the QAMI weight applies.
pub fn total_loss(
    parts: LossParts,
    kl_per_dim: Vec<f64>,
    w: &LossWeights,
    step: usize,
    total_steps: usize,
    qami_active: bool,
) -> Result<LossReport> {
    for (term, v) in [
        ("ae", parts.ae),
        ("reg", parts.reg),
        ("vmim", parts.vmim),
        ("qami", parts.qami),
    ] {
        if !v.is_finite() {
            return Err(VoltaError::Numeric { term, value: v });
        }
    }
    let beta = beta_at(step, total_steps, w)?;
    let qw = if qami_active { w.qami_weight } else { 0.0 };
    Ok(LossReport {
        ae: parts.ae,
        reg: parts.reg,
        vmim: parts.vmim,
        qami: parts.qami,
        total: combine(parts.ae, parts.reg, parts.vmim, parts.qami, beta, w.gamma, qw),
        kl_per_dim,
        beta_used: beta,
        gamma: w.gamma,
        qami_weight: qw,
    })
}
