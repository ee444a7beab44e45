//! Training loops: flow-matching pretraining and the two-phase refactoring
//! loop (distribution matching, then reinforcement correction), with EMA
//! loss normalization and a single shared Adam state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::WorldSpec;
use crate::dkdm::{dkdm_iteration, DkdmConfig};
use crate::error::{Error, Result};
use crate::evalsuite::knowledge_score;
use crate::flowcore::{
    fm_loss_grad, init_params, sample_truncated, Hyper, ModelParams, Schedule,
};
use crate::norl::{norl_iteration, FailureSet, NorlConfig};

/// Exponential-moving-average magnitude normalizer. A constant loss stream
/// normalizes to 1.0 from the very first step thanks to bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmanState {
    pub decay: f64,
    pub value: f64,
    pub steps: u64,
}

impl Default for EmanState {
    fn default() -> Self {
        EmanState { decay: 0.99, value: 0.0, steps: 0 }
    }
}

impl EmanState {
    /// Feed one raw loss; returns the normalized loss. Training must abort
    /// on non-finite input, so this errors rather than poisoning the state.
    pub fn update(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.value = self.decay * self.value + (1.0 - self.decay) * loss.abs();
        self.steps += 1;
        Ok(loss / self.denom())
    }

    /// Bias-corrected EMA magnitude plus the stabilizer.
    pub fn denom(&self) -> f64 {
        let correction = 1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32);
        self.value / correction + 1e-8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { eta: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid("optimizer/parameter size mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= cfg.eta * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curriculum {
    TAware,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the final iteration; geometric decay from
    /// `adam.eta`. Equal values disable the decay.
    pub eta_final: f64,
    /// Probability of training the unconditional (null) branch on a step.
    pub p_null: f64,
    /// Samples per condition for the post-training contract check.
    pub contract_samples: usize,
    pub check_contract: bool,
    pub t_inference: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 30_000,
            batch_size: 8,
            adam: AdamConfig { eta: 1e-3, ..Default::default() },
            eta_final: 1e-5,
            p_null: 0.1,
            contract_samples: 256,
            check_contract: true,
            t_inference: 16,
        }
    }
}

/// Geometric interpolation from eta to eta_final across the run.
fn eta_at(eta: f64, eta_final: f64, iter: usize, iterations: usize) -> f64 {
    if iterations <= 1 || eta == eta_final {
        return eta;
    }
    let frac = iter as f64 / (iterations - 1) as f64;
    eta * (eta_final / eta).powf(frac)
}

pub struct PretrainOutcome {
    pub params: ModelParams,
    /// Raw flow-matching loss per iteration.
    pub losses: Vec<f64>,
}

/// Flow-matching pretraining on the pretraining distributions: explicit and
/// foundational conditions learn their targets, implicit conditions learn
/// their distractors, and the null token sees everything.
pub fn pretrain(
    world: &WorldSpec,
    hyper: &Hyper,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if config.iterations == 0 || config.batch_size == 0 {
        return Err(Error::invalid("iterations and batch_size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&config.p_null) {
        return Err(Error::invalid("p_null must be in [0,1]"));
    }
    let tokens = world.trainable_tokens();
    if tokens.is_empty() {
        return Err(Error::invalid("empty world"));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = init_params(hyper, rng.gen())?;
    let mut adam = AdamState::new(params.data.len());
    let mut grad = vec![0.0; params.data.len()];
    let mut losses = Vec::with_capacity(config.iterations);

    let scale = 1.0 / config.batch_size as f64;
    for iter in 0..config.iterations {
        let adam_cfg = AdamConfig {
            eta: eta_at(config.adam.eta, config.eta_final, iter, config.iterations),
            ..config.adam
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let tok = tokens[rng.gen_range(0..tokens.len())];
            let x0 = world.pretrain_mixture(tok)?.sample_one(&mut rng)?;
            let cond = if rng.gen::<f64>() < config.p_null {
                world.null_token()
            } else {
                tok
            };
            let t: f64 = rng.gen();
            let noise = [
                crate::corpus::standard_normal(&mut rng),
                crate::corpus::standard_normal(&mut rng),
            ];
            loss += scale * fm_loss_grad(&params, x0, cond, t, noise, scale, &mut grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        adam.step(&mut params.data, &grad, &adam_cfg)?;
        losses.push(loss);
    }

    if config.check_contract {
        check_pretrain_contract(&params, world, config, &mut rng)?;
    }
    Ok(PretrainOutcome { params, losses })
}

/// Post-condition: explicit and foundational conditions must put >= 95% of
/// mass on their targets, implicit conditions <= 5% on the fact (they were
/// trained on distractors).
fn check_pretrain_contract(
    params: &ModelParams,
    world: &WorldSpec,
    config: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let schedule = Schedule::uniform(config.t_inference)?;
    for tok in world.trainable_tokens() {
        let xs: Vec<_> = (0..config.contract_samples)
            .map(|_| {
                sample_truncated(params, tok, config.t_inference, &schedule, rng, 1.0)
                    .map(|p| p.x)
            })
            .collect::<Result<_>>()?;
        let score = knowledge_score(world, tok, &xs)?;
        let ok = match tok.kind {
            crate::corpus::TokenKind::Implicit => score <= 0.05,
            _ => score >= 0.95,
        };
        if !ok {
            return Err(Error::contract(format!(
                "pretraining did not converge: token {} ({}) knowledge score {score:.3}",
                tok.id,
                tok.kind.as_str()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Learning rate at the final iteration (geometric decay from adam.eta).
    pub eta_final: f64,
    pub dkdm: DkdmConfig,
    pub norl: NorlConfig,
    pub norl_enabled: bool,
    pub afkc_enabled: bool,
    pub curriculum: Curriculum,
    pub t_inference: usize,
    /// Probe the implicit knowledge score every this many iterations and
    /// stop once it reaches `target_score`. Zero disables probing.
    pub probe_every: usize,
    pub probe_samples: usize,
    pub target_score: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            iterations: 4000,
            adam: AdamConfig::default(),
            eta_final: 5e-5,
            dkdm: DkdmConfig::default(),
            norl: NorlConfig::default(),
            norl_enabled: true,
            afkc_enabled: true,
            curriculum: Curriculum::TAware,
            t_inference: 16,
            probe_every: 500,
            probe_samples: 64,
            target_score: 0.95,
        }
    }
}

impl TrainerConfig {
    /// Category probabilities and curriculum after applying the ablation
    /// switches.
    pub fn effective_dkdm(&self) -> DkdmConfig {
        let mut cfg = self.dkdm.clone();
        if !self.afkc_enabled {
            cfg = cfg.without_afkc();
        }
        if self.curriculum == Curriculum::Uniform {
            cfg = cfg.with_uniform_curriculum();
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub normalized: f64,
    /// Category name for dkdm rows, token id for norl rows.
    pub detail: String,
    pub n_steps: usize,
    pub t_match: f64,
}

pub const LOG_HEADER: &str = "iteration,phase,loss,normalized,detail,n_steps,t_match";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.phase, self.loss, self.normalized, self.detail, self.n_steps,
            self.t_match
        )
    }
}

pub struct RefactorOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub iterations_run: usize,
    pub early_stopped: bool,
}

fn probe_implicit_score(
    params: &ModelParams,
    world: &WorldSpec,
    schedule: &Schedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let implicits: Vec<_> = world
        .trainable_tokens()
        .into_iter()
        .filter(|t| t.kind == crate::corpus::TokenKind::Implicit)
        .collect();
    let mut acc = 0.0;
    for tok in &implicits {
        let xs: Vec<_> = (0..n)
            .map(|_| {
                sample_truncated(params, *tok, schedule.t_inference(), schedule, rng, 1.0)
                    .map(|p| p.x)
            })
            .collect::<Result<_>>()?;
        acc += knowledge_score(world, *tok, &xs)?;
    }
    Ok(acc / implicits.len().max(1) as f64)
}

/// The refactoring loop. Each iteration runs one distribution-matching
/// update and, when enabled and the failure set is non-empty, one
/// reinforcement update; the two phases keep separate loss normalizers but
/// share a single Adam state. Aborts hard on any non-finite loss or
/// gradient.
pub fn refactor(
    reference: &ModelParams,
    world: &WorldSpec,
    config: &TrainerConfig,
    failures: Option<&FailureSet>,
    seed: u64,
) -> Result<RefactorOutcome> {
    if config.iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    let schedule = Schedule::uniform(config.t_inference)?;
    let dkdm_cfg = config.effective_dkdm();
    dkdm_cfg.validate()?;
    config.norl.validate()?;

    let norl_active =
        config.norl_enabled && failures.map(|f| !f.is_empty()).unwrap_or(false);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = reference.clone();
    let mut adam = AdamState::new(params.data.len());
    let mut eman_dkdm = EmanState::default();
    let mut eman_norl = EmanState::default();
    let mut log = Vec::new();
    let mut early_stopped = false;
    let mut iterations_run = 0;

    for iter in 0..config.iterations {
        iterations_run = iter + 1;
        let adam_cfg = AdamConfig {
            eta: eta_at(config.adam.eta, config.eta_final, iter, config.iterations),
            ..config.adam
        };

        let out = dkdm_iteration(&params, reference, world, &dkdm_cfg, &schedule, &mut rng)?;
        let normalized = eman_dkdm.update(out.loss)?;
        let denom = eman_dkdm.denom();
        let scaled: Vec<f64> = out.grad.iter().map(|g| g / denom).collect();
        adam.step(&mut params.data, &scaled, &adam_cfg)?;
        log.push(LogRow {
            iteration: iter,
            phase: "dkdm",
            loss: out.loss,
            normalized,
            detail: out.draw.category.as_str().to_string(),
            n_steps: out.draw.n_steps,
            t_match: out.draw.t_match,
        });

        if norl_active {
            let failures = failures.unwrap();
            let out =
                norl_iteration(&params, reference, world, failures, &config.norl, &mut rng)?;
            let normalized = eman_norl.update(out.loss)?;
            let denom = eman_norl.denom();
            let scaled: Vec<f64> = out.grad.iter().map(|g| g / denom).collect();
            adam.step(&mut params.data, &scaled, &adam_cfg)?;
            log.push(LogRow {
                iteration: iter,
                phase: "norl",
                loss: out.loss,
                normalized,
                detail: out.token.to_string(),
                n_steps: 0,
                t_match: 0.0,
            });
        }

        if config.probe_every > 0 && (iter + 1) % config.probe_every == 0 {
            let score = probe_implicit_score(
                &params,
                world,
                &schedule,
                config.probe_samples,
                &mut rng,
            )?;
            if score >= config.target_score {
                early_stopped = true;
                break;
            }
        }
    }

    if !params.all_finite() {
        return Err(Error::NonFinite("refactored parameters".into()));
    }
    Ok(RefactorOutcome { params, log, iterations_run, early_stopped })
}

pub fn log_to_csv(log: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_world;
    use crate::norl::failure_partition;

    #[test]
    fn eman_constant_stream_normalizes_to_one_immediately() {
        let mut e = EmanState::default();
        for _ in 0..200 {
            let n = e.update(3.7).unwrap();
            assert!((n - 1.0).abs() < 1e-6, "normalized {n}");
        }
    }

    #[test]
    fn eman_scales_with_magnitude_and_rejects_nan() {
        let mut e = EmanState::default();
        e.update(2.0).unwrap();
        // a sudden 10x loss is damped by its own contribution to the EMA:
        // value = 0.99*0.02 + 0.01*20, corrected by 1 - 0.99^2
        let n = e.update(20.0).unwrap();
        let expect = 20.0 / ((0.99 * 0.02 + 0.01 * 20.0) / (1.0 - 0.99f64.powi(2)) + 1e-8);
        assert!((n - expect).abs() < 1e-9, "normalized {n}");
        assert!(n > 1.5 && n < 2.5);
        assert!(e.update(f64::NAN).is_err());
        assert!(e.update(f64::INFINITY).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let target = [3.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut adam = AdamState::new(3);
        let cfg = AdamConfig { eta: 0.05, ..Default::default() };
        for _ in 0..2000 {
            let grad: Vec<f64> = x.iter().zip(&target).map(|(xi, ti)| 2.0 * (xi - ti)).collect();
            adam.step(&mut x, &grad, &cfg).unwrap();
        }
        for (xi, ti) in x.iter().zip(&target) {
            assert!((xi - ti).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut x = vec![0.0];
        let mut adam = AdamState::new(1);
        let cfg = AdamConfig { eta: 0.01, ..Default::default() };
        adam.step(&mut x, &[5.0], &cfg).unwrap();
        assert!((x[0] + 0.01).abs() < 1e-6);
        assert!(adam.step(&mut x, &[f64::NAN], &cfg).is_err());
        assert!(adam.step(&mut x, &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn pretrain_loss_decreases() {
        let world = build_world(1, 1, 3).unwrap();
        let hyper = Hyper::new(world.vocab_size() as u32, 8, vec![32, 32]);
        let cfg = PretrainConfig {
            iterations: 600,
            check_contract: false,
            ..Default::default()
        };
        let out = pretrain(&world, &hyper, &cfg, 42).unwrap();
        let head: f64 = out.losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = out.losses[500..].iter().sum::<f64>() / 100.0;
        assert!(tail < 0.7 * head, "head {head} tail {tail}");
    }

    #[test]
    fn refactor_smoke_and_determinism() {
        let world = build_world(2, 1, 5).unwrap();
        let hyper = Hyper::new(world.vocab_size() as u32, 4, vec![16]);
        let reference = init_params(&hyper, 7).unwrap();
        let cfg = TrainerConfig {
            iterations: 20,
            probe_every: 0,
            norl_enabled: true,
            dkdm: DkdmConfig { batch_size: 2, ..Default::default() },
            norl: NorlConfig { m_unrelated: 2, ..Default::default() },
            t_inference: 4,
            ..Default::default()
        };
        let failures = failure_partition(vec![
            ([0.4, -0.2], world.entries[0].explicit, -1.0),
            ([1.1, 0.7], world.entries[1].explicit, 1.0),
        ])
        .unwrap();
        let a = refactor(&reference, &world, &cfg, Some(&failures), 11).unwrap();
        let b = refactor(&reference, &world, &cfg, Some(&failures), 11).unwrap();
        assert_eq!(a.params.data, b.params.data);
        assert_eq!(a.iterations_run, 20);
        assert!(!a.early_stopped);
        // both phases logged each iteration
        assert_eq!(a.log.len(), 40);
        assert!(a.log.iter().any(|r| r.phase == "norl"));
        let csv = log_to_csv(&a.log);
        assert!(csv.starts_with(LOG_HEADER));

        // disabling norl halves the log
        let cfg2 = TrainerConfig { norl_enabled: false, ..cfg };
        let c = refactor(&reference, &world, &cfg2, Some(&failures), 11).unwrap();
        assert_eq!(c.log.len(), 20);
    }

    #[test]
    fn effective_config_applies_ablations() {
        let cfg = TrainerConfig {
            afkc_enabled: false,
            curriculum: Curriculum::Uniform,
            ..Default::default()
        };
        let d = cfg.effective_dkdm();
        assert_eq!(d.p_impl, 1.0);
        assert!(d.lambda < 1e-9);
    }
}
