//! Negative-Only Reinforcement Learning.
//!
//! `filter_failures` generates full samples from the reference model across
//! explicit conditions, scores them with the reward oracle, and keeps the
//! samples falling strictly below the mean score. Training then minimizes
//! -U(-(r - Q)) on those failure samples, where the log-ratio surrogate
//!
//!   r = beta (||v_ref - v*||^2 - ||v_theta - v*||^2)
//!
//! compares the two models' denoising errors at a shared (t, eps) with
//! v* = eps - x0_tilde, and Q is the clamped mean surrogate over m
//! unrelated ground-truth pairs. The gradient pushes the log-ratio down on
//! failure regions; positive-sample learning is available behind an
//! off-by-default flag.

use std::path::Path;

use rand::Rng;

use crate::corpus::{
    reward_oracle, standard_normal, ConditionToken, TokenId, TokenKind, Vec2, WorldSpec,
};
use crate::error::{Error, Result};
use crate::flowcore::{forward_diffuse, sample_truncated, ModelParams, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub struct NorlConfig {
    pub beta: f64,
    /// Unrelated pairs per Q estimate.
    pub m_unrelated: usize,
    /// Sample count for the failure threshold.
    pub n_filter: usize,
    /// Noise-level band for the shared (t, eps) draw.
    pub t_lo: f64,
    pub t_hi: f64,
    pub guidance: f64,
    /// Also learn from a matching desirable ground-truth sample. Off by
    /// default: redundant positive-sample learning yields no gains.
    pub include_positive: bool,
}

impl Default for NorlConfig {
    fn default() -> Self {
        NorlConfig {
            beta: 0.1,
            m_unrelated: 16,
            n_filter: 1000,
            t_lo: 0.02,
            t_hi: 0.98,
            guidance: 1.0,
            include_positive: false,
        }
    }
}

impl NorlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::invalid("beta must be positive"));
        }
        if self.m_unrelated == 0 {
            return Err(Error::invalid("m_unrelated must be >= 1"));
        }
        if self.n_filter < 2 {
            return Err(Error::invalid("n_filter must be >= 2 for a mean threshold"));
        }
        if !(0.0 < self.t_lo && self.t_lo <= self.t_hi && self.t_hi < 1.0) {
            return Err(Error::invalid("need 0 < t_lo <= t_hi < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureItem {
    pub x0: Vec2,
    pub condition: ConditionToken,
    pub reward: f64,
}

/// Below-threshold generations (D_loss) plus the mean-score threshold over
/// the full filtered batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FailureSet {
    pub items: Vec<FailureItem>,
    pub threshold: f64,
}

impl FailureSet {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# threshold={}\n", self.threshold);
        out.push_str("x0,x1,condition_id,reward\n");
        for it in &self.items {
            out.push_str(&format!(
                "{},{},{},{}\n",
                it.x0[0], it.x0[1], it.condition.id, it.reward
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut threshold = None;
        let mut header_seen = false;
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("threshold=") {
                    threshold = Some(v.trim().parse::<f64>().map_err(|_| {
                        Error::format(format!("failure-set line {lineno}: bad threshold"))
                    })?);
                }
                continue;
            }
            if !header_seen {
                if trimmed != "x0,x1,condition_id,reward" {
                    return Err(Error::format("bad failure-set header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = trimmed.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(format!(
                    "failure-set line {lineno}: bad field count"
                )));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| {
                    Error::format(format!("failure-set line {lineno}: bad {what}"))
                })
            };
            let id: TokenId = f[2].parse().map_err(|_| {
                Error::format(format!("failure-set line {lineno}: bad condition id"))
            })?;
            items.push(FailureItem {
                x0: [num(f[0], "x0")?, num(f[1], "x1")?],
                condition: ConditionToken { id, kind: TokenKind::Explicit },
                reward: num(f[3], "reward")?,
            });
        }
        if !header_seen {
            return Err(Error::format("bad failure-set header"));
        }
        let threshold =
            threshold.ok_or_else(|| Error::format("failure set missing threshold comment"))?;
        if items.iter().any(|it| it.reward >= threshold) {
            return Err(Error::format("failure set has items at or above threshold"));
        }
        Ok(FailureSet { items, threshold })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FailureSet::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Partition already-scored samples: threshold is the arithmetic mean of
/// all scores, failures fall strictly below it.
pub fn failure_partition(scored: Vec<(Vec2, ConditionToken, f64)>) -> Result<FailureSet> {
    if scored.len() < 2 {
        return Err(Error::invalid("mean threshold needs at least two scores"));
    }
    let threshold = scored.iter().map(|(_, _, s)| s).sum::<f64>() / scored.len() as f64;
    let items = scored
        .into_iter()
        .filter(|(_, _, s)| *s < threshold)
        .map(|(x0, condition, reward)| FailureItem { x0, condition, reward })
        .collect();
    Ok(FailureSet { items, threshold })
}

/// Generate `n_filter` full samples from the reference model across
/// uniformly drawn explicit conditions, score each under its own condition,
/// and keep the strictly-below-mean samples.
pub fn filter_failures(
    params: &ModelParams,
    world: &WorldSpec,
    config: &NorlConfig,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<FailureSet> {
    config.validate()?;
    let conditions = world.explicit_tokens();
    if conditions.is_empty() {
        return Err(Error::invalid("world has no explicit conditions"));
    }
    let steps = schedule.t_inference();
    let mut scored = Vec::with_capacity(config.n_filter);
    for _ in 0..config.n_filter {
        let tok = conditions[rng.gen_range(0..conditions.len())];
        let p = sample_truncated(params, tok, steps, schedule, rng, config.guidance)?;
        scored.push((p.x, tok, reward_oracle(world, tok, p.x)?));
    }
    failure_partition(scored)
}

/// r = beta (||v_ref - v*||^2 - ||v_theta - v*||^2) at a shared (x_t, t);
/// positive when theta denoises x0_tilde better than the reference.
pub fn log_ratio_surrogate(
    theta: &ModelParams,
    reference: &ModelParams,
    x0_tilde: Vec2,
    condition: ConditionToken,
    t: f64,
    noise: Vec2,
    beta: f64,
) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid("surrogate time must be strictly inside (0,1)"));
    }
    let xt = forward_diffuse(x0_tilde, t, noise)?;
    let v_theta = theta.forward(xt, t, condition.id)?;
    let v_ref = reference.forward(xt, t, condition.id)?;
    let vs = [noise[0] - x0_tilde[0], noise[1] - x0_tilde[1]];
    let sq = |v: Vec2| (v[0] - vs[0]).powi(2) + (v[1] - vs[1]).powi(2);
    Ok(beta * (sq(v_ref) - sq(v_theta)))
}

/// Q = max(0, mean of unrelated log-ratio surrogates).
pub fn clamp_reference(mean_unrelated: f64) -> f64 {
    mean_unrelated.max(0.0)
}

/// Per-example loss to minimize: -U(-(r - Q)) with a sigmoid utility,
/// bounded in (-1, 0) and strictly increasing in the log-ratio, so descent
/// pushes the log-ratio down on failure samples.
pub fn kto_loss(r: f64, q_ref: f64) -> f64 {
    -sigmoid(q_ref - r)
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Fresh ground-truth draws from explicit conditions other than the failure
/// item's; mean surrogate clamped at zero. Gradient-stopped by construction.
pub fn estimate_qref(
    theta: &ModelParams,
    reference: &ModelParams,
    world: &WorldSpec,
    exclude: TokenId,
    config: &NorlConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let pool: Vec<ConditionToken> = world
        .explicit_tokens()
        .into_iter()
        .filter(|t| t.id != exclude)
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("no unrelated conditions; world too small for NO-RL"));
    }
    let mut acc = 0.0;
    for _ in 0..config.m_unrelated {
        let tok = pool[rng.gen_range(0..pool.len())];
        let x0 = world.fact_mixture(tok)?.sample_one(rng)?;
        let t = rng.gen_range(config.t_lo..=config.t_hi);
        let noise = [standard_normal(rng), standard_normal(rng)];
        acc += log_ratio_surrogate(theta, reference, x0, tok, t, noise, config.beta)?;
    }
    Ok(clamp_reference(acc / config.m_unrelated as f64))
}

pub struct NorlOutcome {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub token: TokenId,
}

// dL/dtheta for one surrogate term: L depends on r through dL/dr, and
// dr/dv_theta = -2 beta (v_theta - v*); accumulates into grad.
fn surrogate_term_grad(
    theta: &ModelParams,
    x0: Vec2,
    condition: ConditionToken,
    t: f64,
    noise: Vec2,
    beta: f64,
    dl_dr: f64,
    grad: &mut [f64],
) -> Result<()> {
    let xt = forward_diffuse(x0, t, noise)?;
    let (v_theta, cache) = theta.forward_cached(xt, t, condition.id)?;
    let vs = [noise[0] - x0[0], noise[1] - x0[1]];
    let k = dl_dr * (-2.0) * beta;
    theta.vjp(&cache, [k * (v_theta[0] - vs[0]), k * (v_theta[1] - vs[1])], grad);
    Ok(())
}

/// One NO-RL update: sample a failure item and t in the clamped band, fresh
/// noise, a fresh gradient-stopped Q, and descend -U(-(r - Q)). With
/// `include_positive` a matching desirable ground-truth term -U(r+ - Q) is
/// added.
pub fn norl_iteration(
    theta: &ModelParams,
    reference: &ModelParams,
    world: &WorldSpec,
    failures: &FailureSet,
    config: &NorlConfig,
    rng: &mut impl Rng,
) -> Result<NorlOutcome> {
    config.validate()?;
    if failures.items.is_empty() {
        return Err(Error::invalid("failure set is empty"));
    }
    let item = &failures.items[rng.gen_range(0..failures.items.len())];
    world.token(item.condition.id)?;

    let t = rng.gen_range(config.t_lo..=config.t_hi);
    let noise = [standard_normal(rng), standard_normal(rng)];
    let q = estimate_qref(theta, reference, world, item.condition.id, config, rng)?;
    let r = log_ratio_surrogate(
        theta, reference, item.x0, item.condition, t, noise, config.beta,
    )?;

    let mut loss = kto_loss(r, q);
    let mut grad = vec![0.0; theta.hyper.param_count()];
    // d/dr [-sigmoid(q - r)] = sigmoid'(q - r)
    let s = sigmoid(q - r);
    surrogate_term_grad(
        theta,
        item.x0,
        item.condition,
        t,
        noise,
        config.beta,
        s * (1.0 - s),
        &mut grad,
    )?;

    if config.include_positive {
        let x0 = world.fact_mixture(item.condition)?.sample_one(rng)?;
        let tp = rng.gen_range(config.t_lo..=config.t_hi);
        let np = [standard_normal(rng), standard_normal(rng)];
        let rp = log_ratio_surrogate(
            theta, reference, x0, item.condition, tp, np, config.beta,
        )?;
        loss += -sigmoid(rp - q);
        let sp = sigmoid(rp - q);
        surrogate_term_grad(
            theta,
            x0,
            item.condition,
            tp,
            np,
            config.beta,
            -sp * (1.0 - sp),
            &mut grad,
        )?;
    }

    Ok(NorlOutcome { loss, grad, token: item.condition.id })
}
