//! Subcommands of the `atd` binary.

pub mod ablation;
pub mod manifest;
pub mod plot;

use std::path::{Path, PathBuf};

use atd_core::attention::{collect_attention, read_attention_dump, write_attention_dump};
use atd_core::checkpoint::load_checkpoint;
use atd_core::config::RunConfig;
use atd_core::metrics::{evaluate, SuccessMode};
use atd_core::training::{build_datasets, evaluate_split, train, Datasets, Split};
use atd_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::{prepare_out_dir, RunGuard};

#[derive(Debug, Parser)]
#[command(name = "atd", version, about = "Dual-branch navigation agent on synthetic topological worlds")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat TOML config; keys as accepted by `--set`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed: data seed for `generate-world`, training seed otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace an existing, non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Config override `KEY=VALUE`, applied after `--config`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// Training worlds with train and held-out episodes.
    Seen,
    Unseen,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Seen,
    Unseen,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate worlds and episodes.
    GenerateWorld {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Warm up the branches, then train the policy.
    Train {
        /// Directory written by `generate-world --split all`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// One of none, full, se_only, im_only, baseline.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unseen")]
        split: EvalSplit,
        /// Evaluate only the first N episodes; 0 means all.
        #[arg(long, default_value_t = 0)]
        episodes: usize,
        /// Success means ending exactly on the goal node.
        #[arg(long)]
        goal_set: bool,
    },
    /// Export grounding attention matrices from greedy rollouts.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unseen")]
        split: EvalSplit,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
    },
    /// Render SR/SPL curves of a training run and, optionally, attention heatmaps.
    Plot {
        /// Training output directory containing `eval_log.jsonl`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Directory written by `dump-attention`.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        max_heatmaps: usize,
    },
    /// Train every variant under several seeds on one dataset.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,se_only,im_only,baseline")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateWorld { .. } => "generate-world",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::DumpAttention { .. } => "dump-attention",
            Command::Plot { .. } => "plot",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(g: &GlobalArgs, data_seed_flag: bool) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut errs = Vec::new();
    for kv in &g.overrides {
        match kv.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cfg.set(k.trim(), v) {
                    errs.push(e);
                }
            }
            None => errs.push(format!("override '{kv}' is not KEY=VALUE")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if let Some(s) = g.seed {
        if data_seed_flag {
            cfg.data.seed = s;
        } else {
            cfg.train.seed = s;
        }
    }
    if let Some(w) = g.workers {
        cfg.train.workers = w;
    }
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs) -> Result<PathBuf> {
    g.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Datasets> {
    match data {
        Some(d) => Datasets::load(d),
        None => build_datasets(&cfg.data),
    }
}

fn pick(data: &Datasets, s: EvalSplit) -> &Split {
    match s {
        EvalSplit::Train => &data.train,
        EvalSplit::Seen => &data.seen,
        EvalSplit::Unseen => &data.unseen,
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// With `--config` or `--set` given, the checkpoint must match that model config.
fn expected_model(g: &GlobalArgs, cfg: &RunConfig) -> Option<atd_core::config::ModelConfig> {
    (g.config.is_some() || !g.overrides.is_empty()).then(|| cfg.model.clone())
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let g = &cli.global;
    let name = cli.command.name();
    match &cli.command {
        Command::GenerateWorld { split } => {
            let cfg = resolve_config(g, true)?;
            let out = out_dir(g)?;
            prepare_out_dir(&out, g.force)?;
            let mut guard = RunGuard::start(&out, name, args, &cfg, vec![])?;
            let data = build_datasets(&cfg.data)?;
            if matches!(split, SplitArg::Seen | SplitArg::All) {
                data.save_seen(&out)?;
                guard.output(out.join("train"));
                guard.output(out.join("seen"));
            }
            if matches!(split, SplitArg::Unseen | SplitArg::All) {
                data.unseen.save(&out.join("unseen"))?;
                guard.output(out.join("unseen"));
            }
            guard.finish()?;
        }
        Command::Train { data, ablate, max_steps } => {
            let mut cfg = resolve_config(g, false)?;
            if let Some(v) = ablate {
                cfg.model.variant = v.clone();
            }
            if let Some(n) = max_steps {
                cfg.train.max_steps = *n;
            }
            cfg.validate()?;
            let out = out_dir(g)?;
            prepare_out_dir(&out, g.force)?;
            let mut guard = RunGuard::start(&out, name, args, &cfg, data.iter().cloned().collect())?;
            let ds = load_data(&cfg, data.as_deref())?;
            let outcome = train(&cfg, &ds, Some(&out))?;
            if let Some(last) = outcome.log.evals.last() {
                std::fs::write(out.join("final_unseen_report.json"), serde_json::to_string_pretty(&last.unseen)?)?;
                std::fs::write(out.join("final_seen_report.json"), serde_json::to_string_pretty(&last.seen)?)?;
            }
            for f in ["train_log.jsonl", "warmup_log.jsonl", "eval_log.jsonl", "checkpoints"] {
                guard.output(out.join(f));
            }
            guard.finish()?;
        }
        Command::Eval { checkpoint, data, split, episodes, goal_set } => {
            let cfg = resolve_config(g, false)?;
            let (model, store, _) = load_checkpoint(checkpoint, expected_model(g, &cfg).as_ref())?;
            let out = out_dir(g)?;
            prepare_out_dir(&out, g.force)?;
            let mut inputs = vec![checkpoint.clone()];
            inputs.extend(data.iter().cloned());
            let mut guard = RunGuard::start(&out, name, args, &cfg, inputs)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let sp = pick(&ds, *split);
            let (mut report, trajs) =
                evaluate_split(&model, &store, sp, *episodes, cfg.train.step_cap, cfg.train.workers)?;
            if *goal_set {
                let graphs: Vec<_> = sp.worlds.iter().map(|w| w.graph.clone()).collect();
                report = evaluate(&graphs, &sp.episodes[..trajs.len()], &trajs, report.epsilon, SuccessMode::GoalSet)?;
            }
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            write_jsonl(&out.join("trajectories.jsonl"), &trajs)?;
            guard.output(out.join("report.json"));
            guard.output(out.join("trajectories.jsonl"));
            guard.finish()?;
        }
        Command::DumpAttention { checkpoint, data, split, episodes } => {
            let cfg = resolve_config(g, false)?;
            let (model, store, manifest) = load_checkpoint(checkpoint, expected_model(g, &cfg).as_ref())?;
            let out = out_dir(g)?;
            prepare_out_dir(&out, g.force)?;
            let mut inputs = vec![checkpoint.clone()];
            inputs.extend(data.iter().cloned());
            let mut guard = RunGuard::start(&out, name, args, &cfg, inputs)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let records = collect_attention(&model, &store, pick(&ds, *split), *episodes, cfg.train.step_cap)?;
            write_attention_dump(&out, manifest.model.sgca_layers, &manifest.model.variant, &records)?;
            guard.output(out.join(atd_core::attention::HEADER_FILE));
            guard.output(out.join(atd_core::attention::DATA_FILE));
            guard.finish()?;
        }
        Command::Plot { run, attention, max_heatmaps } => {
            if run.is_none() && attention.is_none() {
                return Err(Error::Config("plot needs --run and/or --attention".into()));
            }
            let cfg = resolve_config(g, false)?;
            let out = out_dir(g)?;
            prepare_out_dir(&out, g.force)?;
            let inputs = run.iter().chain(attention.iter()).cloned().collect();
            let mut guard = RunGuard::start(&out, name, args, &cfg, inputs)?;
            if let Some(r) = run {
                let log = plot::read_eval_log(&r.join("eval_log.jsonl"))?;
                for p in plot::plot_curves(&log, &out)? {
                    guard.output(p);
                }
            }
            if let Some(a) = attention {
                let (_, records) = read_attention_dump(a)?;
                for p in plot::plot_heatmaps(&records, &out.join("attention"), *max_heatmaps)? {
                    guard.output(p);
                }
            }
            guard.finish()?;
        }
        Command::Ablate { variants, seeds, data } => {
            let cfg = resolve_config(g, false)?;
            for v in variants {
                let mut c = cfg.clone();
                c.model.variant = v.clone();
                c.validate()?;
            }
            let out = out_dir(g)?;
            // finished runs inside an existing grid directory are reused
            std::fs::create_dir_all(&out)?;
            let mut guard = RunGuard::start(&out, name, args, &cfg, data.iter().cloned().collect())?;
            let ds = load_data(&cfg, data.as_deref())?;
            ablation::run_grid(&cfg, &ds, variants, seeds, &out)?;
            guard.output(out.join(ablation::SUMMARY_FILE));
            guard.finish()?;
        }
    }
    Ok(())
}
