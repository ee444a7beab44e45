//! Structured run configuration (TOML) and the per-run manifest.
//!
//! Every key is optional; missing keys take the library defaults. Flags on
//! the command line override file keys. The manifest is written atomically
//! next to each command's primary output.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dkdm::DkdmConfig;
use crate::error::{Error, Result};
use crate::norl::NorlConfig;
use crate::trainer::{AdamConfig, Curriculum, PretrainConfig, TrainerConfig};

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub refactor: RefactorSection,
    #[serde(default)]
    pub dkdm: DkdmSection,
    #[serde(default)]
    pub norl: NorlSection,
    #[serde(default)]
    pub model: ModelSection,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Condition-embedding width.
    pub d_embed: Option<u32>,
    /// Hidden layer widths.
    pub hidden: Option<Vec<u32>>,
}

impl ModelSection {
    pub fn d_embed(&self) -> u32 {
        self.d_embed.unwrap_or(8)
    }

    pub fn hidden(&self) -> Vec<u32> {
        self.hidden.clone().unwrap_or_else(|| vec![64, 64])
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub eta: Option<f64>,
    pub eta_final: Option<f64>,
    pub p_null: Option<f64>,
    pub contract_samples: Option<usize>,
    pub t_inference: Option<usize>,
}

impl PretrainSection {
    pub fn resolve(&self) -> PretrainConfig {
        let d = PretrainConfig::default();
        PretrainConfig {
            iterations: self.iterations.unwrap_or(d.iterations),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            adam: AdamConfig { eta: self.eta.unwrap_or(d.adam.eta), ..d.adam },
            eta_final: self.eta_final.unwrap_or(d.eta_final),
            p_null: self.p_null.unwrap_or(d.p_null),
            contract_samples: self.contract_samples.unwrap_or(d.contract_samples),
            check_contract: true,
            t_inference: self.t_inference.unwrap_or(d.t_inference),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RefactorSection {
    pub iterations: Option<usize>,
    pub eta: Option<f64>,
    pub eta_final: Option<f64>,
    pub t_inference: Option<usize>,
    pub probe_every: Option<usize>,
    pub probe_samples: Option<usize>,
    pub target_score: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DkdmSection {
    pub p_impl: Option<f64>,
    pub p_expl: Option<f64>,
    pub p_found: Option<f64>,
    pub lambda: Option<f64>,
    pub clamp_lo: Option<f64>,
    pub clamp_hi: Option<f64>,
    pub normalizer_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub guidance: Option<f64>,
}

impl DkdmSection {
    pub fn resolve(&self) -> DkdmConfig {
        let d = DkdmConfig::default();
        DkdmConfig {
            p_impl: self.p_impl.unwrap_or(d.p_impl),
            p_expl: self.p_expl.unwrap_or(d.p_expl),
            p_found: self.p_found.unwrap_or(d.p_found),
            lambda: self.lambda.unwrap_or(d.lambda),
            clamp_lo: self.clamp_lo.unwrap_or(d.clamp_lo),
            clamp_hi: self.clamp_hi.unwrap_or(d.clamp_hi),
            normalizer_eps: self.normalizer_eps.unwrap_or(d.normalizer_eps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            guidance: self.guidance.unwrap_or(d.guidance),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NorlSection {
    pub beta: Option<f64>,
    pub m_unrelated: Option<usize>,
    pub n_filter: Option<usize>,
    pub t_lo: Option<f64>,
    pub t_hi: Option<f64>,
    pub guidance: Option<f64>,
    pub include_positive: Option<bool>,
}

impl NorlSection {
    pub fn resolve(&self) -> NorlConfig {
        let d = NorlConfig::default();
        NorlConfig {
            beta: self.beta.unwrap_or(d.beta),
            m_unrelated: self.m_unrelated.unwrap_or(d.m_unrelated),
            n_filter: self.n_filter.unwrap_or(d.n_filter),
            t_lo: self.t_lo.unwrap_or(d.t_lo),
            t_hi: self.t_hi.unwrap_or(d.t_hi),
            guidance: self.guidance.unwrap_or(d.guidance),
            include_positive: self.include_positive.unwrap_or(d.include_positive),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("bad config: {e}")))
    }

    /// Trainer configuration with ablation flags applied.
    pub fn trainer(
        &self,
        norl_enabled: bool,
        afkc_enabled: bool,
        curriculum: Curriculum,
    ) -> TrainerConfig {
        let d = TrainerConfig::default();
        TrainerConfig {
            iterations: self.refactor.iterations.unwrap_or(d.iterations),
            adam: AdamConfig { eta: self.refactor.eta.unwrap_or(d.adam.eta), ..d.adam },
            eta_final: self.refactor.eta_final.unwrap_or(d.eta_final),
            dkdm: self.dkdm.resolve(),
            norl: self.norl.resolve(),
            norl_enabled,
            afkc_enabled,
            curriculum,
            t_inference: self.refactor.t_inference.unwrap_or(d.t_inference),
            probe_every: self.refactor.probe_every.unwrap_or(d.probe_every),
            probe_samples: self.refactor.probe_samples.unwrap_or(d.probe_samples),
            target_score: self.refactor.target_score.unwrap_or(d.target_score),
        }
    }
}

/// Run record written next to each command's primary output.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
    /// Resolved configuration snapshot, serialized as TOML text.
    pub config: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            config: String::new(),
            notes: Vec::new(),
        }
    }

    pub fn set_duration(&mut self, d: Duration) {
        self.duration_secs = d.as_secs_f64();
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        for out in &self.outputs {
            if !out.exists() {
                return Err(Error::contract(format!(
                    "manifest names missing output {}",
                    out.display()
                )));
            }
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
        let tmp = path.with_extension("manifest.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(format!("bad manifest: {e}")))
    }
}

/// Manifest path convention: `<output>.manifest` alongside the output.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut os = output.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}
