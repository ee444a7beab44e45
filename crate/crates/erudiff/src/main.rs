//! Command-line entry point for the knowledge-refactoring pipeline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use erudiff::config::{manifest_path, RunConfig, RunManifest};
use erudiff::corpus::{build_world, TokenKind, WorldSpec};
use erudiff::error::Error;
use erudiff::evalsuite::{evaluate, forgetting_pair, forgetting_score, save_svg};
use erudiff::flowcore::{load_checkpoint, save_checkpoint, Hyper, ModelParams, Schedule};
use erudiff::norl::{filter_failures, FailureSet};
use erudiff::trainer::{log_to_csv, pretrain, refactor, Curriculum, LOG_HEADER};
use erudiff::worldfile::{load_world, save_world};

const CONFIG_KEYS: &str = "Config file keys (TOML, all optional):\n\
  [model]    d_embed, hidden\n\
  [pretrain] iterations, batch_size, eta, eta_final, p_null, contract_samples,\n             t_inference\n\
  [refactor] iterations, eta, eta_final, t_inference, probe_every, probe_samples,\n             target_score\n\
  [dkdm]     p_impl, p_expl, p_found (default 0.8/0.1/0.1), lambda (0.1),\n\
             clamp_lo/clamp_hi (0.02/0.98), normalizer_eps, batch_size, guidance\n\
  [norl]     beta (0.1), m_unrelated (16), n_filter (1000), t_lo/t_hi,\n\
             guidance, include_positive\n\
Command-line flags override file keys. ERUDIFF_SEED supplies the default seed.";

#[derive(Parser)]
#[command(name = "erudiff", version, about = "Knowledge refactoring for conditional flow models on synthetic 2D worlds")]
struct Cli {
    /// Worker threads (the implementation is deterministic and single-threaded;
    /// values above 1 are accepted for interface compatibility).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// RNG seed; defaults to ERUDIFF_SEED or 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a synthetic world file and print its token table.
    #[command(after_help = CONFIG_KEYS)]
    World {
        /// Number of knowledge entries.
        #[arg(long)]
        entries: u32,
        /// Foundational tokens per entry.
        #[arg(long, default_value_t = 2)]
        found: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Flow-matching pretraining on the world's pretraining distributions.
    #[command(after_help = CONFIG_KEYS)]
    Pretrain {
        #[arg(long)]
        world: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Training-loss log CSV (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score explicit conditions under the reward oracle and flag failures.
    #[command(after_help = CONFIG_KEYS)]
    Filter {
        #[arg(long)]
        world: PathBuf,
        /// Reference (pretrained) checkpoint.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Rollouts per condition; overrides [norl] n_filter.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Refactor implicit knowledge toward the explicit distributions.
    #[command(after_help = CONFIG_KEYS)]
    Refactor {
        #[arg(long)]
        world: PathBuf,
        /// Reference (pretrained) checkpoint.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Failure set from `filter`; required unless --no-norl.
        #[arg(long)]
        failures: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Disable the reinforcement phase.
        #[arg(long)]
        no_norl: bool,
        /// Disable consolidation: category probabilities become (1, 0, 0).
        #[arg(long)]
        no_afkc: bool,
        /// Uniform rollout-length sampling instead of the geometric curriculum.
        #[arg(long)]
        uniform_curriculum: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint against the analytic oracles.
    #[command(after_help = CONFIG_KEYS)]
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Pre-refactoring checkpoint; enables the forgetting score.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        /// Per-condition metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Scatter/contour plot.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Training log whose normalized dkdm losses become the SVG
        /// convergence curve.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<Error>() {
                Some(Error::InvalidArgument(_))
                | Some(Error::UnknownToken(_))
                | Some(Error::NoDistribution(_)) => 2,
                Some(Error::Contract(_)) | Some(Error::NonFinite(_)) => 3,
                Some(Error::Io(_)) | Some(Error::Format(_)) => 4,
                None => {
                    if err.downcast_ref::<std::io::Error>().is_some() {
                        4
                    } else {
                        2
                    }
                }
            }
        }
    };
    std::process::exit(code);
}

fn resolved_seed(common: &Common) -> anyhow::Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    match std::env::var("ERUDIFF_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::invalid(format!("bad ERUDIFF_SEED `{v}`")).into()),
        Err(_) => Ok(0),
    }
}

fn check_overwrite(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        ))
        .into());
    }
    Ok(())
}

fn load_run_config(common: &Common) -> anyhow::Result<RunConfig> {
    match &common.config {
        Some(path) => {
            Ok(RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn config_snapshot<T: serde::Serialize>(value: &T) -> String {
    toml::to_string_pretty(value).unwrap_or_default()
}

fn print_token_table(world: &WorldSpec) {
    println!("id\tkind\tentry");
    for tok in &world.tokens {
        let entry = world
            .entries
            .iter()
            .find(|e| {
                e.implicit.id == tok.id
                    || e.explicit.id == tok.id
                    || e.found.iter().any(|f| f.id == tok.id)
            })
            .map(|e| e.entry_id.to_string())
            .unwrap_or_else(|| "-".to_string());
        println!("{}\t{}\t{}", tok.id, tok.kind.as_str(), entry);
    }
}

fn model_hyper(world: &WorldSpec, cfg: &RunConfig) -> Hyper {
    Hyper::new(world.vocab_size() as u32, cfg.model.d_embed(), cfg.model.hidden())
}

fn check_model_matches(world: &WorldSpec, params: &ModelParams) -> anyhow::Result<()> {
    if params.hyper.vocab as usize != world.vocab_size() {
        return Err(Error::invalid(format!(
            "checkpoint vocabulary {} does not match world vocabulary {}",
            params.hyper.vocab,
            world.vocab_size()
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(Error::invalid("--threads must be >= 1").into());
    }
    let started = Instant::now();
    match cli.command {
        Command::World { entries, found, out, common } => {
            let seed = resolved_seed(&common)?;
            check_overwrite(&out, common.force)?;
            let world = build_world(entries, found, seed)?;
            save_world(&world, &out)?;
            print_token_table(&world);

            let mut manifest = RunManifest::new("world", seed);
            manifest.outputs.push(out.clone());
            manifest.config = format!("entries = {entries}\nfound = {found}\n");
            manifest.set_duration(started.elapsed());
            manifest.save(&manifest_path(&out))?;
        }
        Command::Pretrain { world, out, log, common } => {
            let seed = resolved_seed(&common)?;
            check_overwrite(&out, common.force)?;
            let cfg = load_run_config(&common)?;
            let w = load_world(&world)?;
            let hyper = model_hyper(&w, &cfg);
            let pcfg = cfg.pretrain.resolve();
            let outcome = pretrain(&w, &hyper, &pcfg, seed)?;
            save_checkpoint(&outcome.params, &out)?;

            let log_path = log.unwrap_or_else(|| default_log_path(&out));
            let mut text = String::from("iteration,loss\n");
            for (i, l) in outcome.losses.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(&log_path, text)?;
            println!(
                "pretrained {} iterations; final loss {:.4}",
                outcome.losses.len(),
                outcome.losses.last().unwrap_or(&f64::NAN)
            );

            let mut manifest = RunManifest::new("pretrain", seed);
            manifest.inputs.push(world);
            manifest.outputs.push(out.clone());
            manifest.outputs.push(log_path);
            manifest.config = config_snapshot(&cfg);
            manifest.set_duration(started.elapsed());
            manifest.save(&manifest_path(&out))?;
        }
        Command::Filter { world, reference, n, out, common } => {
            let seed = resolved_seed(&common)?;
            check_overwrite(&out, common.force)?;
            let cfg = load_run_config(&common)?;
            let w = load_world(&world)?;
            let params = load_checkpoint(&reference)?;
            check_model_matches(&w, &params)?;
            let mut ncfg = cfg.norl.resolve();
            if let Some(n) = n {
                ncfg.n_filter = n;
            }
            let schedule = Schedule::uniform(cfg.refactor.t_inference.unwrap_or(16))?;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let failures = filter_failures(&params, &w, &ncfg, &schedule, &mut rng)?;
            failures.save(&out)?;
            println!(
                "scored {} samples, threshold {:.4}, {} in the failure set",
                ncfg.n_filter,
                failures.threshold,
                failures.items.len()
            );
            if failures.is_empty() {
                eprintln!("warning: empty failure set; refactor will need --no-norl");
            }

            let mut manifest = RunManifest::new("filter", seed);
            manifest.inputs.push(world);
            manifest.inputs.push(reference);
            manifest.outputs.push(out.clone());
            manifest.config = config_snapshot(&cfg);
            manifest.set_duration(started.elapsed());
            manifest.save(&manifest_path(&out))?;
        }
        Command::Refactor {
            world,
            reference,
            failures,
            out,
            log,
            no_norl,
            no_afkc,
            uniform_curriculum,
            common,
        } => {
            let seed = resolved_seed(&common)?;
            check_overwrite(&out, common.force)?;
            let cfg = load_run_config(&common)?;
            if !no_norl && failures.is_none() {
                return Err(Error::invalid(
                    "NO-RL is enabled but no --failures given; pass --failures or --no-norl",
                )
                .into());
            }
            let w = load_world(&world)?;
            let reference_params = load_checkpoint(&reference)?;
            check_model_matches(&w, &reference_params)?;
            let failure_set = match &failures {
                Some(path) => Some(FailureSet::load(path)?),
                None => None,
            };
            let curriculum = if uniform_curriculum {
                Curriculum::Uniform
            } else {
                Curriculum::TAware
            };
            let tcfg = cfg.trainer(!no_norl, !no_afkc, curriculum);
            let outcome = refactor(&reference_params, &w, &tcfg, failure_set.as_ref(), seed)?;
            save_checkpoint(&outcome.params, &out)?;

            let log_path = log.unwrap_or_else(|| default_log_path(&out));
            std::fs::write(&log_path, log_to_csv(&outcome.log))?;
            println!(
                "refactored for {} iterations{}",
                outcome.iterations_run,
                if outcome.early_stopped { " (early stop)" } else { "" }
            );

            let mut manifest = RunManifest::new("refactor", seed);
            manifest.inputs.push(world);
            manifest.inputs.push(reference);
            if let Some(f) = failures {
                manifest.inputs.push(f);
            }
            manifest.outputs.push(out.clone());
            manifest.outputs.push(log_path);
            manifest.config = config_snapshot(&cfg);
            manifest.notes.push(format!(
                "norl_enabled = {}, afkc_enabled = {}, curriculum = {}",
                !no_norl,
                !no_afkc,
                if uniform_curriculum { "uniform" } else { "taware" }
            ));
            manifest.set_duration(started.elapsed());
            manifest.save(&manifest_path(&out))?;
        }
        Command::Eval { world, model, baseline, samples, out, svg, curve, common } => {
            let seed = resolved_seed(&common)?;
            check_overwrite(&out, common.force)?;
            let cfg = load_run_config(&common)?;
            let w = load_world(&world)?;
            let params = load_checkpoint(&model)?;
            check_model_matches(&w, &params)?;
            let schedule = Schedule::uniform(cfg.refactor.t_inference.unwrap_or(16))?;
            let (report, samples_by_token) =
                evaluate(&params, &w, &schedule, samples, 1.0, seed)?;
            let mut csv = report.to_csv();

            if let Some(base_path) = &baseline {
                let base = load_checkpoint(base_path)?;
                check_model_matches(&w, &base)?;
                let (_, base_samples) = evaluate(&base, &w, &schedule, samples, 1.0, seed)?;
                let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
                let mut terms = Vec::new();
                for tok in w.foundational_tokens() {
                    let target: Vec<_> = {
                        let mix = w.fact_mixture(tok)?;
                        (0..samples)
                            .map(|_| mix.sample_one(&mut rng))
                            .collect::<erudiff::Result<_>>()?
                    };
                    terms.push(forgetting_pair(
                        &base_samples[&tok.id],
                        &samples_by_token[&tok.id],
                        &target,
                    )?);
                }
                let score = forgetting_score(&terms)?;
                csv.push_str(&format!("# forgetting_score {score}\n"));
                println!("forgetting_score {score:.6}");
            }
            std::fs::write(&out, csv)?;
            for row in &report.rows {
                println!(
                    "token {} ({}): knowledge {:.4} mmd2 {:.5} reward {:.3}",
                    row.condition_id,
                    row.kind.as_str(),
                    row.knowledge_score,
                    row.mmd2,
                    row.mean_reward
                );
            }
            let implicit_mean = report.mean_knowledge(TokenKind::Implicit);
            println!("mean implicit knowledge score {implicit_mean:.4}");

            let mut manifest = RunManifest::new("eval", seed);
            manifest.inputs.push(world);
            manifest.inputs.push(model);
            if let Some(b) = baseline {
                manifest.inputs.push(b);
            }
            manifest.outputs.push(out.clone());

            if let Some(svg_path) = svg {
                let convergence = match &curve {
                    Some(path) => read_convergence(path)?,
                    None => Vec::new(),
                };
                save_svg(&w, &samples_by_token, &convergence, &svg_path)?;
                manifest.outputs.push(svg_path);
            }
            manifest.config = config_snapshot(&cfg);
            manifest.set_duration(started.elapsed());
            manifest.save(&manifest_path(&out))?;
        }
    }
    Ok(())
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".log.csv");
    PathBuf::from(os)
}

/// Normalized dkdm losses from a refactor training log.
fn read_convergence(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != LOG_HEADER {
        return Err(Error::format(format!("{} is not a training log", path.display())).into());
    }
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 4 && fields[1] == "dkdm" {
            out.push(fields[3].parse::<f64>().map_err(|_| {
                Error::format(format!("bad normalized loss in {}", path.display()))
            })?);
        }
    }
    Ok(out)
}
