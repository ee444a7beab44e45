//! Synthetic knowledge worlds.
//!
//! A world is a deterministic stand-in for a triplet-structured knowledge
//! corpus: every entry pairs an implicit condition token with an explicit
//! one and a set of foundational tokens. Explicit and foundational tokens
//! map to analytic Gaussian-mixture "fact" distributions; implicit tokens
//! additionally carry a counter-factual distractor mixture that is only
//! used while pretraining the reference model. The reward oracle is the
//! exact log-density of the fact mixture.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type Vec2 = [f64; 2];

/// Grid spacing between mixture means. With component std capped at
/// `SIGMA_MAX` this keeps any two distinct mixtures at least 4 sigma apart.
pub const GRID_SPACING: f64 = 2.0;
pub const SIGMA_MIN: f64 = 0.12;
pub const SIGMA_MAX: f64 = 0.25;
/// Covariance eigenvalue floor.
pub const COV_EIG_FLOOR: f64 = 1e-6;
/// Largest supported grid side; beyond this `build_world` refuses.
const MAX_GRID_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TokenKind {
    Implicit,
    Explicit,
    Foundational,
    Null,
}

impl TokenKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenKind::Implicit => "implicit",
            TokenKind::Explicit => "explicit",
            TokenKind::Foundational => "foundational",
            TokenKind::Null => "null",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(TokenKind::Implicit),
            "explicit" => Ok(TokenKind::Explicit),
            "foundational" => Ok(TokenKind::Foundational),
            "null" => Ok(TokenKind::Null),
            other => Err(Error::format(format!("unknown token kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionToken {
    pub id: TokenId,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Cultural,
    Spatiotemporal,
    Science,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Cultural => "cultural",
            Category::Spatiotemporal => "spatiotemporal",
            Category::Science => "science",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cultural" => Ok(Category::Cultural),
            "spatiotemporal" => Ok(Category::Spatiotemporal),
            "science" => Ok(Category::Science),
            other => Err(Error::format(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEntry {
    pub entry_id: u32,
    pub implicit: ConditionToken,
    pub explicit: ConditionToken,
    pub found: Vec<ConditionToken>,
    pub category: Category,
}

/// One Gaussian component: mean, symmetric covariance (c00, c01, c11) and
/// mixture weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec2,
    pub cov: [f64; 3],
    pub weight: f64,
}

impl MixtureComponent {
    fn cholesky(&self) -> Result<[f64; 3]> {
        let [c00, c01, c11] = self.cov;
        if c00 <= 0.0 {
            return Err(Error::invalid("covariance not positive definite"));
        }
        let l00 = c00.sqrt();
        let l10 = c01 / l00;
        let rem = c11 - l10 * l10;
        if rem <= 0.0 {
            return Err(Error::invalid("covariance not positive definite"));
        }
        Ok([l00, l10, rem.sqrt()])
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let [a, b, c] = self.cov;
        let tr = a + c;
        let det = a * c - b * b;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 - disc, tr / 2.0 + disc)
    }

    fn log_density(&self, x: Vec2) -> f64 {
        let [a, b, c] = self.cov;
        let det = a * c - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        // inverse of [[a,b],[b,c]] is [[c,-b],[-b,a]]/det
        let quad = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn isotropic(mean: Vec2, sigma: f64) -> Self {
        MixtureSpec {
            components: vec![MixtureComponent {
                mean,
                cov: [sigma * sigma, 0.0, sigma * sigma],
                weight: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture with no components"));
        }
        let mut wsum = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid("component weight must be finite and >= 0"));
            }
            wsum += c.weight;
            let (lo, _) = c.eigenvalues();
            if lo < COV_EIG_FLOOR {
                return Err(Error::invalid(format!(
                    "covariance eigenvalue {lo:.3e} below floor {COV_EIG_FLOOR:.0e}"
                )));
            }
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights sum to {wsum}, expected 1")));
        }
        Ok(())
    }

    /// Largest per-component standard deviation across the mixture.
    pub fn max_std(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.eigenvalues().1.sqrt())
            .fold(0.0, f64::max)
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> Result<Vec2> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let [l00, l10, l11] = c.cholesky()?;
        let z0: f64 = standard_normal(rng);
        let z1: f64 = standard_normal(rng);
        Ok([c.mean[0] + l00 * z0, c.mean[1] + l10 * z0 + l11 * z1])
    }

    /// Log-density of `x` under the mixture (log-sum-exp over components).
    pub fn log_density(&self, x: Vec2) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

/// Draw from N(0, 1) via Box-Muller; consumes exactly two uniforms, which
/// keeps sampling reproducible across rand versions.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Identifies a mixture within a world for nearest-mean assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKey {
    Target(TokenId),
    Distractor(TokenId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub entries: Vec<KnowledgeEntry>,
    /// Token table indexed by id; id 0 is always the null token.
    pub tokens: Vec<ConditionToken>,
    pub target_of: BTreeMap<TokenId, MixtureSpec>,
    pub distractor_of: BTreeMap<TokenId, MixtureSpec>,
    pub seed: u64,
}

impl WorldSpec {
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn null_token(&self) -> ConditionToken {
        self.tokens[0]
    }

    pub fn token(&self, id: TokenId) -> Result<ConditionToken> {
        self.tokens
            .get(id as usize)
            .copied()
            .ok_or(Error::UnknownToken(id))
    }

    pub fn entry_of_implicit(&self, id: TokenId) -> Option<&KnowledgeEntry> {
        self.entries.iter().find(|e| e.implicit.id == id)
    }

    /// Fact distribution for a token. Implicit tokens resolve through their
    /// paired explicit token; the null token has none.
    pub fn fact_mixture(&self, token: ConditionToken) -> Result<&MixtureSpec> {
        self.token(token.id)?;
        match token.kind {
            TokenKind::Explicit | TokenKind::Foundational => self
                .target_of
                .get(&token.id)
                .ok_or(Error::NoDistribution(token.id)),
            TokenKind::Implicit => {
                let entry = self
                    .entry_of_implicit(token.id)
                    .ok_or(Error::NoDistribution(token.id))?;
                self.target_of
                    .get(&entry.explicit.id)
                    .ok_or(Error::NoDistribution(entry.explicit.id))
            }
            TokenKind::Null => Err(Error::NoDistribution(token.id)),
        }
    }

    /// Distribution a token is trained on during pretraining: the distractor
    /// for implicit tokens, the fact otherwise.
    pub fn pretrain_mixture(&self, token: ConditionToken) -> Result<&MixtureSpec> {
        self.token(token.id)?;
        match token.kind {
            TokenKind::Implicit => self
                .distractor_of
                .get(&token.id)
                .ok_or(Error::NoDistribution(token.id)),
            _ => self.fact_mixture(token),
        }
    }

    /// All mixtures in the world, targets and distractors, keyed for
    /// nearest-mean assignment.
    pub fn all_mixtures(&self) -> Vec<(MixtureKey, &MixtureSpec)> {
        let mut out = Vec::new();
        for (id, m) in &self.target_of {
            out.push((MixtureKey::Target(*id), m));
        }
        for (id, m) in &self.distractor_of {
            out.push((MixtureKey::Distractor(*id), m));
        }
        out
    }

    /// Tokens that carry a pretraining distribution (everything but null).
    pub fn trainable_tokens(&self) -> Vec<ConditionToken> {
        self.tokens
            .iter()
            .copied()
            .filter(|t| t.kind != TokenKind::Null)
            .collect()
    }

    pub fn explicit_tokens(&self) -> Vec<ConditionToken> {
        self.tokens
            .iter()
            .copied()
            .filter(|t| t.kind == TokenKind::Explicit)
            .collect()
    }

    pub fn foundational_tokens(&self) -> Vec<ConditionToken> {
        self.tokens
            .iter()
            .copied()
            .filter(|t| t.kind == TokenKind::Foundational)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens[0].kind != TokenKind::Null {
            return Err(Error::contract("token 0 must be the null token"));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.id as usize != i {
                return Err(Error::contract("token table ids must be contiguous"));
            }
            if i > 0 && t.kind == TokenKind::Null {
                return Err(Error::contract("null token must appear exactly once"));
            }
        }
        for m in self.target_of.values().chain(self.distractor_of.values()) {
            m.validate()?;
        }
        for e in &self.entries {
            if !self.target_of.contains_key(&e.explicit.id) {
                return Err(Error::contract("entry explicit token without target"));
            }
            if !self.distractor_of.contains_key(&e.implicit.id) {
                return Err(Error::contract("entry implicit token without distractor"));
            }
            if e.found.is_empty() {
                return Err(Error::contract("entry without foundational tokens"));
            }
        }
        // 4-sigma separation between distinct mixtures.
        let mixes = self.all_mixtures();
        let sigma = mixes.iter().map(|(_, m)| m.max_std()).fold(0.0, f64::max);
        for i in 0..mixes.len() {
            for j in (i + 1)..mixes.len() {
                for a in &mixes[i].1.components {
                    for b in &mixes[j].1.components {
                        let d = ((a.mean[0] - b.mean[0]).powi(2)
                            + (a.mean[1] - b.mean[1]).powi(2))
                        .sqrt();
                        if d < 4.0 * sigma {
                            return Err(Error::contract(format!(
                                "mixture means {d:.3} apart, need >= {:.3}",
                                4.0 * sigma
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds a deterministic world: one fact mixture per explicit and
/// foundational token and one distractor mixture per implicit token, all on
/// distinct cells of a square grid.
pub fn build_world(n_entries: u32, n_found_per_entry: u32, seed: u64) -> Result<WorldSpec> {
    if n_entries < 1 || n_found_per_entry < 1 {
        return Err(Error::invalid("n_entries and n_found_per_entry must be >= 1"));
    }
    let n_entries = n_entries as usize;
    let n_found = n_found_per_entry as usize;
    let n_mixtures = n_entries * (n_found + 2);
    let side = (n_mixtures as f64).sqrt().ceil() as usize;
    if side > MAX_GRID_SIDE {
        return Err(Error::invalid(format!(
            "world needs a {side}x{side} grid, max supported is {MAX_GRID_SIDE}x{MAX_GRID_SIDE}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..side)
        .flat_map(|i| (0..side).map(move |j| (i, j)))
        .collect();
    cells.shuffle(&mut rng);

    let half = (side as f64 - 1.0) / 2.0;
    let mut next_cell = cells.into_iter();
    let mut take_mixture = |rng: &mut ChaCha12Rng| -> MixtureSpec {
        let (i, j) = next_cell.next().expect("grid sized for all mixtures");
        let mean = [
            (i as f64 - half) * GRID_SPACING,
            (j as f64 - half) * GRID_SPACING,
        ];
        let sx = rng.gen_range(SIGMA_MIN..SIGMA_MAX);
        let sy = rng.gen_range(SIGMA_MIN..SIGMA_MAX);
        MixtureSpec {
            components: vec![MixtureComponent {
                mean,
                cov: [sx * sx, 0.0, sy * sy],
                weight: 1.0,
            }],
        }
    };

    let mut tokens = vec![ConditionToken {
        id: 0,
        kind: TokenKind::Null,
    }];
    let mut entries = Vec::with_capacity(n_entries);
    let mut target_of = BTreeMap::new();
    let mut distractor_of = BTreeMap::new();
    let categories = [
        Category::Cultural,
        Category::Spatiotemporal,
        Category::Science,
    ];

    for e in 0..n_entries {
        let mut new_token = |kind| {
            let t = ConditionToken {
                id: tokens.len() as TokenId,
                kind,
            };
            tokens.push(t);
            t
        };
        let implicit = new_token(TokenKind::Implicit);
        let explicit = new_token(TokenKind::Explicit);
        let found: Vec<ConditionToken> = (0..n_found)
            .map(|_| new_token(TokenKind::Foundational))
            .collect();

        target_of.insert(explicit.id, take_mixture(&mut rng));
        for f in &found {
            target_of.insert(f.id, take_mixture(&mut rng));
        }
        distractor_of.insert(implicit.id, take_mixture(&mut rng));

        entries.push(KnowledgeEntry {
            entry_id: e as u32,
            implicit,
            explicit,
            found,
            category: categories[e % categories.len()],
        });
    }

    let world = WorldSpec {
        entries,
        tokens,
        target_of,
        distractor_of,
        seed,
    };
    world.validate()?;
    Ok(world)
}

/// Draws `n` i.i.d. samples from the distribution the token renders:
/// its fact mixture, or its pretraining mixture when `pretrain_mode` is set.
pub fn sample_target(
    world: &WorldSpec,
    token: ConditionToken,
    n: usize,
    rng_seed: u64,
    pretrain_mode: bool,
) -> Result<Vec<Vec2>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mixture = if pretrain_mode {
        world.pretrain_mixture(token)?
    } else {
        world.fact_mixture(token)?
    };
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    (0..n).map(|_| mixture.sample_one(&mut rng)).collect()
}

/// Log-density of `x` under the token's fact mixture. Higher means a more
/// faithful rendering of the fact.
pub fn reward_oracle(world: &WorldSpec, token: ConditionToken, x: Vec2) -> Result<f64> {
    Ok(world.fact_mixture(token)?.log_density(x))
}
