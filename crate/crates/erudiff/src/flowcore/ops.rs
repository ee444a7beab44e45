//! Rectified-flow operations: forward noising, Euler sampling with
//! truncation, score conversion, and the flow-matching pretraining loss.
//!
//! Time is normalized to [0, 1] with x_t = (1 - t) x0 + t eps and velocity
//! target eps - x0.

use rand::Rng;

use crate::corpus::{standard_normal, ConditionToken, Vec2};
use crate::error::{Error, Result};
use crate::flowcore::net::ModelParams;
use crate::flowcore::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPoint {
    pub x: Vec2,
    pub t: f64,
    pub condition: ConditionToken,
}

pub fn forward_diffuse(x0: Vec2, t: f64, noise: Vec2) -> Result<Vec2> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0,1]")));
    }
    Ok([
        (1.0 - t) * x0[0] + t * noise[0],
        (1.0 - t) * x0[1] + t * noise[1],
    ])
}

pub fn predict_velocity(params: &ModelParams, p: &LatentPoint) -> Result<Vec2> {
    params.forward(p.x, p.t, p.condition.id)
}

/// One-step denoised estimate x0_hat = x - t v.
pub fn predicted_clean(p: &LatentPoint, v: Vec2) -> Vec2 {
    [p.x[0] - p.t * v[0], p.x[1] - p.t * v[1]]
}

///// Marginal score implied by a posterior-mean velocity:
/// score = -(x + (1 - t) v) / t. Undefined at t = 0.
pub fn velocity_to_score(p: &LatentPoint, v: Vec2) -> Result<Vec2> {
    if p.t <= 0.0 {
        return Err(Error::invalid("score undefined at t = 0"));
    }
    Ok([
        -(p.x[0] + (1.0 - p.t) * v[0]) / p.t,
        -(p.x[1] + (1.0 - p.t) * v[1]) / p.t,
    ])
}

/// Euler update with an externally supplied velocity.
pub fn euler_update(p: &LatentPoint, t_next: f64, v: Vec2) -> Result<LatentPoint> {
    if t_next >= p.t || t_next < 0.0 {
        return Err(Error::invalid(format!(
            "euler step requires 0 <= t_next < t, got {t_next} from {}",
            p.t
        )));
    }
    let dt = t_next - p.t;
    Ok(LatentPoint {
        x: [p.x[0] + dt * v[0], p.x[1] + dt * v[1]],
        t: t_next,
        condition: p.condition,
    })
}

pub fn euler_step(params: &ModelParams, p: &LatentPoint, t_next: f64) -> Result<LatentPoint> {
    let v = predict_velocity(params, p)?;
    euler_update(p, t_next, v)
}

fn guided_velocity(
    params: &ModelParams,
    p: &LatentPoint,
    null_id: u32,
    guidance: f64,
) -> Result<Vec2> {
    let v_cond = predict_velocity(params, p)?;
    if guidance == 1.0 {
        return Ok(v_cond);
    }
    let v_null = params.forward(p.x, p.t, null_id)?;
    Ok([
        v_null[0] + guidance * (v_cond[0] - v_null[0]),
        v_null[1] + guidance * (v_cond[1] - v_null[1]),
    ])
}

/// A truncated sampling trajectory. Only the final Euler step carries
/// parameter gradients; `last_input` and `dt_last` are what the gradient
/// of `point.x` with respect to the parameters chains through.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub point: LatentPoint,
    pub last_input: LatentPoint,
    pub dt_last: f64,
    pub guidance: f64,
}

/// Runs `n_steps` Euler steps from z ~ N(0, I) at t = 1 along the schedule.
/// When guidance != 1, velocity = v_null + guidance (v_cond - v_null).
pub fn rollout_truncated(
    params: &ModelParams,
    condition: ConditionToken,
    n_steps: usize,
    schedule: &Schedule,
    rng: &mut impl Rng,
    guidance: f64,
) -> Result<Rollout> {
    if n_steps < 1 || n_steps > schedule.t_inference() {
        return Err(Error::invalid(format!(
            "n_steps {n_steps} outside 1..={}",
            schedule.t_inference()
        )));
    }
    let null_id = 0;
    let mut p = LatentPoint {
        x: [standard_normal(rng), standard_normal(rng)],
        t: 1.0,
        condition,
    };
    let mut last_input = p;
    let mut dt_last = 0.0;
    for k in 0..n_steps {
        let t_next = schedule.taus[k + 1];
        last_input = p;
        dt_last = t_next - p.t;
        let v = guided_velocity(params, &p, null_id, guidance)?;
        p = euler_update(&p, t_next, v)?;
    }
    Ok(Rollout {
        point: p,
        last_input,
        dt_last,
        guidance,
    })
}

pub fn sample_truncated(
    params: &ModelParams,
    condition: ConditionToken,
    n_steps: usize,
    schedule: &Schedule,
    rng: &mut impl Rng,
    guidance: f64,
) -> Result<LatentPoint> {
    Ok(rollout_truncated(params, condition, n_steps, schedule, rng, guidance)?.point)
}

/// Re-noises a partially denoised point to level `t` by projecting to the
/// one-step clean estimate (prediction treated as constant) and running the
/// forward process with fresh noise.
pub fn renoise(
    params: &ModelParams,
    p: &LatentPoint,
    t: f64,
    rng: &mut impl Rng,
) -> Result<LatentPoint> {
    if t < p.t || t > 1.0 {
        return Err(Error::invalid(format!(
            "renoise target {t} below current level {}",
            p.t
        )));
    }
    let v = predict_velocity(params, p)?;
    let x0_hat = predicted_clean(p, v);
    let noise = [standard_normal(rng), standard_normal(rng)];
    let x = forward_diffuse(x0_hat, t, noise)?;
    Ok(LatentPoint {
        x,
        t,
        condition: p.condition,
    })
}

/// Conditional flow-matching loss
/// || v(x_t, t, c) - (noise - x0) ||^2 for one draw.
pub fn fm_loss(
    params: &ModelParams,
    x0: Vec2,
    condition: ConditionToken,
    t: f64,
    noise: Vec2,
) -> Result<f64> {
    let xt = forward_diffuse(x0, t, noise)?;
    let v = params.forward(xt, t, condition.id)?;
    let r0 = v[0] - (noise[0] - x0[0]);
    let r1 = v[1] - (noise[1] - x0[1]);
    Ok(r0 * r0 + r1 * r1)
}

/// Flow-matching loss plus its parameter gradient, accumulated into `grad`.
pub fn fm_loss_grad(
    params: &ModelParams,
    x0: Vec2,
    condition: ConditionToken,
    t: f64,
    noise: Vec2,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let xt = forward_diffuse(x0, t, noise)?;
    let (v, cache) = params.forward_cached(xt, t, condition.id)?;
    let r0 = v[0] - (noise[0] - x0[0]);
    let r1 = v[1] - (noise[1] - x0[1]);
    params.vjp(&cache, [2.0 * scale * r0, 2.0 * scale * r1], grad);
    Ok(r0 * r0 + r1 * r1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianField;
    use crate::corpus::TokenKind;
    use crate::flowcore::net::{init_params, Hyper};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cond(id: u32) -> ConditionToken {
        ConditionToken {
            id,
            kind: TokenKind::Explicit,
        }
    }

    fn zero_params() -> ModelParams {
        let mut p = init_params(&Hyper::new(3, 2, vec![4]), 1).unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    #[test]
    fn forward_diffuse_endpoints_and_midpoint() {
        let x0 = [2.0, 0.0];
        let eps = [0.0, 2.0];
        assert_eq!(forward_diffuse(x0, 0.0, eps).unwrap(), x0);
        assert_eq!(forward_diffuse(x0, 1.0, eps).unwrap(), eps);
        assert_eq!(forward_diffuse(x0, 0.5, eps).unwrap(), [1.0, 1.0]);
        assert!(forward_diffuse(x0, 1.5, eps).is_err());
    }

    #[test]
    fn predicted_clean_cases() {
        let p = LatentPoint { x: [3.0, -1.0], t: 0.0, condition: cond(0) };
        assert_eq!(predicted_clean(&p, [9.0, 9.0]), p.x);

        let p = LatentPoint { x: [1.0, 1.0], t: 0.5, condition: cond(0) };
        assert_eq!(predicted_clean(&p, [2.0, 2.0]), [0.0, 0.0]);

        // exact world: x_t = (1-t)x0 + t eps, v = eps - x0 recovers x0
        let (x0, eps, t) = ([0.7, -0.3], [1.1, 0.4], 0.37);
        let xt = forward_diffuse(x0, t, eps).unwrap();
        let p = LatentPoint { x: xt, t, condition: cond(0) };
        let v = [eps[0] - x0[0], eps[1] - x0[1]];
        let xh = predicted_clean(&p, v);
        assert!((xh[0] - x0[0]).abs() < 1e-12 && (xh[1] - x0[1]).abs() < 1e-12);
    }

    #[test]
    fn score_at_t1_is_standard_normal_score() {
        let p = LatentPoint { x: [0.4, -1.2], t: 1.0, condition: cond(0) };
        let s = velocity_to_score(&p, [0.0, 0.0]).unwrap();
        assert_eq!(s, [-0.4, 1.2]);
        let p0 = LatentPoint { x: [0.4, -1.2], t: 0.0, condition: cond(0) };
        assert!(velocity_to_score(&p0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn score_matches_closed_form_gaussian() {
        let field = GaussianField { mean: [1.3, -0.4], sigma: 0.6 };
        for &t in &[0.15, 0.5, 0.9] {
            let x = [0.9, 0.2];
            let p = LatentPoint { x, t, condition: cond(0) };
            let v = field.velocity(x, t);
            let s = velocity_to_score(&p, v).unwrap();
            let s_exact = field.score(x, t);
            assert!((s[0] - s_exact[0]).abs() < 1e-6 && (s[1] - s_exact[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_estimate_identity() {
        // E[eps | x_t] = x + (1 - t) v for any consistent decomposition
        let (x0, eps, t) = ([0.2, 0.5], [-0.9, 1.4], 0.6);
        let xt = forward_diffuse(x0, t, eps).unwrap();
        let v = [eps[0] - x0[0], eps[1] - x0[1]];
        let e0 = xt[0] + (1.0 - t) * v[0];
        let e1 = xt[1] + (1.0 - t) * v[1];
        assert!((e0 - eps[0]).abs() < 1e-12 && (e1 - eps[1]).abs() < 1e-12);
    }

    #[test]
    fn euler_zero_velocity_is_fixed_point() {
        let params = zero_params();
        let p = LatentPoint { x: [0.5, -0.5], t: 0.8, condition: cond(1) };
        let q = euler_step(&params, &p, 0.3).unwrap();
        assert_eq!(q.x, p.x);
        assert_eq!(q.t, 0.3);
        assert!(euler_step(&params, &p, 0.9).is_err());
    }

    #[test]
    fn exact_field_integration_recovers_moments() {
        let field = GaussianField { mean: [2.0, -1.0], sigma: 0.5 };
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let steps = 1000;
        let trials = 10_000;
        let mut sum = [0.0, 0.0];
        let mut sum2 = [0.0, 0.0];
        for _ in 0..trials {
            let mut p = LatentPoint {
                x: [standard_normal(&mut rng), standard_normal(&mut rng)],
                t: 1.0,
                condition: cond(0),
            };
            for k in 0..steps {
                let t_next = 1.0 - (k + 1) as f64 / steps as f64;
                let v = field.velocity(p.x, p.t);
                p = euler_update(&p, t_next, v).unwrap();
            }
            sum[0] += p.x[0];
            sum[1] += p.x[1];
            sum2[0] += p.x[0] * p.x[0];
            sum2[1] += p.x[1] * p.x[1];
        }
        for d in 0..2 {
            let mean = sum[d] / trials as f64;
            let var = sum2[d] / trials as f64 - mean * mean;
            assert!((mean - field.mean[d]).abs() < 0.02 * field.mean[d].abs().max(1.0));
            assert!((var - field.sigma * field.sigma).abs() < 0.02);
        }
    }

    #[test]
    fn one_exact_step_from_t1_hits_posterior_clean_estimate() {
        let field = GaussianField { mean: [1.0, 2.0], sigma: 0.3 };
        let x = [0.7, -0.2];
        let p = LatentPoint { x, t: 1.0, condition: cond(0) };
        let v = field.velocity(x, 1.0);
        let q = euler_update(&p, 0.0, v).unwrap();
        let xh = predicted_clean(&p, v);
        assert!((q.x[0] - xh[0]).abs() < 1e-12 && (q.x[1] - xh[1]).abs() < 1e-12);
    }

    #[test]
    fn truncated_sampling_levels_and_guidance_identity() {
        let params = init_params(&Hyper::new(3, 2, vec![8]), 9).unwrap();
        let sched = Schedule::uniform(4).unwrap();
        let c = cond(1);

        let full = sample_truncated(&params, c, 4, &sched, &mut ChaCha12Rng::seed_from_u64(1), 1.0)
            .unwrap();
        assert_eq!(full.t, 0.0);

        let one = sample_truncated(&params, c, 1, &sched, &mut ChaCha12Rng::seed_from_u64(1), 1.0)
            .unwrap();
        assert_eq!(one.t, sched.taus[1]);

        // guidance = 1 identical to conditional sampling
        let a = sample_truncated(&params, c, 3, &sched, &mut ChaCha12Rng::seed_from_u64(2), 1.0)
            .unwrap();
        let b = sample_truncated(&params, c, 3, &sched, &mut ChaCha12Rng::seed_from_u64(2), 1.0)
            .unwrap();
        assert_eq!(a, b);

        assert!(
            sample_truncated(&params, c, 5, &sched, &mut ChaCha12Rng::seed_from_u64(1), 1.0)
                .is_err()
        );
        assert!(
            sample_truncated(&params, c, 0, &sched, &mut ChaCha12Rng::seed_from_u64(1), 1.0)
                .is_err()
        );
    }

    #[test]
    fn renoise_identity_at_zero_and_seed_sensitivity() {
        let params = zero_params();
        let p = LatentPoint { x: [0.4, 0.4], t: 0.0, condition: cond(1) };
        let q = renoise(&params, &p, 0.0, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        assert_eq!(q.x, p.x);

        let p = LatentPoint { x: [0.4, 0.4], t: 0.3, condition: cond(1) };
        let a = renoise(&params, &p, 0.7, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let b = renoise(&params, &p, 0.7, &mut ChaCha12Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.x, b.x);
        assert!(renoise(&params, &p, 0.1, &mut ChaCha12Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn renoise_projection_preserves_marginal_with_exact_clean_estimate() {
        // With an exact x0_hat, re-projection reproduces the forward marginal
        // at level t. Checked by MMD on 10^4 samples.
        let field = GaussianField { mean: [1.5, -0.5], sigma: 0.4 };
        let (tau, t) = (0.3, 0.6);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 10_000;
        let mut renoised = Vec::with_capacity(n);
        let mut direct = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = field.sample(&mut rng);
            let eps = [standard_normal(&mut rng), standard_normal(&mut rng)];
            let xtau = forward_diffuse(x0, tau, eps).unwrap();
            let v = field.velocity(xtau, tau);
            let p = LatentPoint { x: xtau, t: tau, condition: cond(0) };
            let xh = predicted_clean(&p, v);
            let fresh = [standard_normal(&mut rng), standard_normal(&mut rng)];
            renoised.push(forward_diffuse(xh, t, fresh).unwrap());

            let y0 = field.sample(&mut rng);
            let e2 = [standard_normal(&mut rng), standard_normal(&mut rng)];
            direct.push(forward_diffuse(y0, t, e2).unwrap());
        }
        let d = crate::evalsuite::mmd2(&renoised, &direct, crate::evalsuite::Bandwidth::MedianHeuristic)
            .unwrap();
        assert!(d.value < 0.02, "mmd2 {}", d.value);
    }

    #[test]
    fn euler_bias_halves_with_step_size() {
        // first-order solver: terminal variance bias shrinks roughly
        // linearly in the step size on the exact single-Gaussian field
        let field = GaussianField { mean: [0.0, 0.0], sigma: 0.5 };
        let bias = |steps: usize| {
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            let trials = 20_000;
            let mut sum2 = 0.0;
            for _ in 0..trials {
                let mut p = LatentPoint {
                    x: [standard_normal(&mut rng), standard_normal(&mut rng)],
                    t: 1.0,
                    condition: cond(0),
                };
                for k in 0..steps {
                    let t_next = 1.0 - (k + 1) as f64 / steps as f64;
                    let v = field.velocity(p.x, p.t);
                    p = euler_update(&p, t_next, v).unwrap();
                }
                sum2 += p.x[0] * p.x[0] + p.x[1] * p.x[1];
            }
            (sum2 / (2.0 * trials as f64) - field.sigma * field.sigma).abs()
        };
        let coarse = bias(8);
        let fine = bias(16);
        assert!(fine < 0.75 * coarse, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn fm_loss_cases() {
        let params = zero_params();
        let c = cond(1);
        // zero network, noise = x0 makes the target velocity zero
        let l = fm_loss(&params, [0.3, 0.3], c, 0.4, [0.3, 0.3]).unwrap();
        assert!(l.abs() < 1e-12);
        // zero network, x0 = 0, noise = (1,0)
        let l = fm_loss(&params, [0.0, 0.0], c, 0.7, [1.0, 0.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        // non-negative
        let p2 = init_params(&Hyper::new(3, 2, vec![4]), 8).unwrap();
        let l = fm_loss(&p2, [0.1, -0.2], c, 0.2, [0.5, 0.5]).unwrap();
        assert!(l >= 0.0);
    }
}
