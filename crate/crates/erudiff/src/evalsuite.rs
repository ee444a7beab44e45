//! Evaluation metrics and reporting.
//!
//! Distribution distance is the biased (V-statistic) squared MMD with an
//! RBF kernel; the bandwidth defaults to the median pairwise distance of
//! the pooled sample set. Knowledge attribution assigns each sample to its
//! nearest mixture-component mean over every distribution in the world,
//! distractors included, and scores the fraction landing on the condition's
//! fact distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{
    reward_oracle, ConditionToken, MixtureKey, TokenId, TokenKind, Vec2, WorldSpec,
};
use crate::error::{Error, Result};
use crate::flowcore::{sample_truncated, ModelParams, Schedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    MedianHeuristic,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd2Result {
    pub value: f64,
    /// Bandwidth actually used by the kernel.
    pub bandwidth: f64,
    /// Set when the median heuristic degenerated to zero and the unit
    /// fallback bandwidth was substituted.
    pub bandwidth_fallback: bool,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn median_pairwise(pooled: &[Vec2]) -> f64 {
    let mut ds = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            ds.push(dist(pooled[i], pooled[j]));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ds.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        ds[n / 2]
    } else {
        0.5 * (ds[n / 2 - 1] + ds[n / 2])
    }
}

/// Biased squared MMD between two sample sets with an RBF kernel
/// k(a, b) = exp(-||a - b||^2 / (2 h^2)).
pub fn mmd2(a: &[Vec2], b: &[Vec2], bandwidth: Bandwidth) -> Result<Mmd2Result> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("mmd2 requires non-empty sample sets"));
    }
    let (h, fallback) = match bandwidth {
        Bandwidth::Explicit(h) => {
            if !(h > 0.0) {
                return Err(Error::invalid("bandwidth must be positive"));
            }
            (h, false)
        }
        Bandwidth::MedianHeuristic => {
            let pooled: Vec<Vec2> = a.iter().chain(b.iter()).copied().collect();
            let m = median_pairwise(&pooled);
            if m > 0.0 {
                (m, false)
            } else {
                (1.0, true)
            }
        }
    };
    let k = |p: Vec2, q: Vec2| {
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        (-d2 / (2.0 * h * h)).exp()
    };
    let mean_kernel = |xs: &[Vec2], ys: &[Vec2]| {
        let mut acc = 0.0;
        for &x in xs {
            for &y in ys {
                acc += k(x, y);
            }
        }
        acc / (xs.len() * ys.len()) as f64
    };
    let value = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
    Ok(Mmd2Result { value, bandwidth: h, bandwidth_fallback: fallback })
}

/// Fraction of samples whose nearest component mean, over every mixture in
/// the world, belongs to the condition's fact distribution.
pub fn knowledge_score(world: &WorldSpec, token: ConditionToken, samples: &[Vec2]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("knowledge score over empty sample set"));
    }
    let fact_key = match token.kind {
        TokenKind::Implicit => {
            let entry = world
                .entry_of_implicit(token.id)
                .ok_or(Error::NoDistribution(token.id))?;
            MixtureKey::Target(entry.explicit.id)
        }
        TokenKind::Explicit | TokenKind::Foundational => MixtureKey::Target(token.id),
        TokenKind::Null => return Err(Error::NoDistribution(token.id)),
    };
    // world.fact_mixture also validates the token exists
    world.fact_mixture(token)?;
    let mut means: Vec<(MixtureKey, Vec2)> = Vec::new();
    for (key, mix) in world.all_mixtures() {
        for c in &mix.components {
            means.push((key, c.mean));
        }
    }
    let mut hits = 0usize;
    for &x in samples {
        let mut best = (f64::INFINITY, means[0].0);
        for &(key, m) in &means {
            let d = dist(x, m);
            if d < best.0 {
                best = (d, key);
            }
        }
        if best.1 == fact_key {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One foundational condition's contribution: regression of the fit to its
/// target, clamped at zero so improvement never offsets forgetting.
pub fn forgetting_pair(before: &[Vec2], after: &[Vec2], target: &[Vec2]) -> Result<f64> {
    let b = mmd2(before, target, Bandwidth::MedianHeuristic)?.value;
    let a = mmd2(after, target, Bandwidth::MedianHeuristic)?.value;
    Ok((a - b).max(0.0))
}

/// Mean of per-condition forgetting terms.
pub fn forgetting_score(per_token: &[f64]) -> Result<f64> {
    if per_token.is_empty() {
        return Err(Error::invalid("forgetting score over no conditions"));
    }
    Ok(per_token.iter().sum::<f64>() / per_token.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition_id: TokenId,
    pub kind: TokenKind,
    pub knowledge_score: f64,
    pub mmd2: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition_id,kind,knowledge_score,mmd2,mean_reward\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.condition_id,
                r.kind.as_str(),
                r.knowledge_score,
                r.mmd2,
                r.mean_reward
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn row(&self, id: TokenId) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition_id == id)
    }

    pub fn mean_knowledge(&self, kind: TokenKind) -> f64 {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.kind == kind).collect();
        rows.iter().map(|r| r.knowledge_score).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Generate `n_samples` per trainable condition with full-length rollouts
/// and score each against its fact distribution.
pub fn evaluate(
    params: &ModelParams,
    world: &WorldSpec,
    schedule: &Schedule,
    n_samples: usize,
    guidance: f64,
    seed: u64,
) -> Result<(MetricsReport, BTreeMap<TokenId, Vec<Vec2>>)> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let steps = schedule.t_inference();
    let mut rows = Vec::new();
    let mut by_token = BTreeMap::new();
    for tok in world.trainable_tokens() {
        let mut xs = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            xs.push(sample_truncated(params, tok, steps, schedule, &mut rng, guidance)?.x);
        }
        let fact = world.fact_mixture(tok)?;
        let mut target = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            target.push(fact.sample_one(&mut rng)?);
        }
        let mean_reward = xs
            .iter()
            .map(|&x| reward_oracle(world, tok, x))
            .sum::<Result<f64>>()?;
        rows.push(ReportRow {
            condition_id: tok.id,
            kind: tok.kind,
            knowledge_score: knowledge_score(world, tok, &xs)?,
            mmd2: mmd2(&xs, &target, Bandwidth::MedianHeuristic)?.value,
            mean_reward: mean_reward / n_samples as f64,
        });
        by_token.insert(tok.id, xs);
    }
    Ok((MetricsReport { rows }, by_token))
}

const SVG_SIZE: f64 = 1000.0;

fn world_bounds(world: &WorldSpec, samples: &BTreeMap<TokenId, Vec<Vec2>>) -> (Vec2, Vec2) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut feed = |p: Vec2| {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    };
    for (_, mix) in world.all_mixtures() {
        for c in &mix.components {
            feed([c.mean[0] - 1.5, c.mean[1] - 1.5]);
            feed([c.mean[0] + 1.5, c.mean[1] + 1.5]);
        }
    }
    for xs in samples.values() {
        for &x in xs {
            feed(x);
        }
    }
    if !lo[0].is_finite() {
        return ([-1.0, -1.0], [1.0, 1.0]);
    }
    (lo, hi)
}

/// 1000x1000 SVG: 2-sigma contour ellipses for every mixture component
/// (targets solid, distractors dashed), generated samples as dots, and an
/// optional convergence curve along the bottom strip.
pub fn render_svg(
    world: &WorldSpec,
    samples: &BTreeMap<TokenId, Vec<Vec2>>,
    convergence: &[f64],
) -> String {
    let (lo, hi) = world_bounds(world, samples);
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let margin = 40.0;
    let plot = SVG_SIZE - 2.0 * margin;
    let px = |p: Vec2| -> (f64, f64) {
        (
            margin + (p[0] - lo[0]) / span * plot,
            SVG_SIZE - margin - (p[1] - lo[1]) / span * plot,
        )
    };
    let scale = plot / span;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"1000\" height=\"1000\" viewBox=\"0 0 1000 1000\">"
    );
    let _ = writeln!(s, "<rect width=\"1000\" height=\"1000\" fill=\"#fcfcfa\"/>");

    for (key, mix) in world.all_mixtures() {
        let (stroke, dash) = match key {
            MixtureKey::Target(_) => ("#2266aa", ""),
            MixtureKey::Distractor(_) => ("#aa5522", " stroke-dasharray=\"6 4\""),
        };
        for c in &mix.components {
            let (e1, e2) = c.eigenvalues();
            let angle = 0.5 * (2.0 * c.cov[1]).atan2(c.cov[0] - c.cov[2]);
            let (cx, cy) = px(c.mean);
            let rx = 2.0 * e1.max(0.0).sqrt() * scale;
            let ry = 2.0 * e2.max(0.0).sqrt() * scale;
            let _ = writeln!(
                s,
                "<ellipse cx=\"{cx:.2}\" cy=\"{cy:.2}\" rx=\"{rx:.2}\" ry=\"{ry:.2}\" \
                 transform=\"rotate({:.2} {cx:.2} {cy:.2})\" fill=\"none\" stroke=\"{stroke}\" \
                 stroke-width=\"1.5\"{dash}/>",
                -angle.to_degrees()
            );
        }
    }

    let palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
    for (i, (tok, xs)) in samples.iter().enumerate() {
        let color = palette[i % palette.len()];
        for &x in xs {
            let (cx, cy) = px(x);
            let _ = writeln!(
                s,
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.5\"><title>token {tok}</title></circle>"
            );
        }
    }

    if convergence.len() >= 2 {
        let lo_v = convergence.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi_v = convergence.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi_v - lo_v).max(1e-12);
        let strip_top = SVG_SIZE - 150.0;
        let strip_h = 110.0;
        let mut pts = String::new();
        for (i, &v) in convergence.iter().enumerate() {
            let x = margin + i as f64 / (convergence.len() - 1) as f64 * plot;
            let y = strip_top + strip_h - (v - lo_v) / range * strip_h;
            let _ = write!(pts, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            s,
            "<rect x=\"{margin}\" y=\"{strip_top}\" width=\"{plot}\" height=\"{strip_h}\" fill=\"#ffffff\" fill-opacity=\"0.75\" stroke=\"#999999\"/>"
        );
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#cc2222\" stroke-width=\"1.5\"/>",
            pts.trim_end()
        );
    }

    s.push_str("</svg>\n");
    s
}

pub fn save_svg(
    world: &WorldSpec,
    samples: &BTreeMap<TokenId, Vec<Vec2>>,
    convergence: &[f64],
    path: &Path,
) -> Result<()> {
    std::fs::write(path, render_svg(world, samples, convergence))?;
    Ok(())
}
