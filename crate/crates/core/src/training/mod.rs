//! Two-stage training: branch warm-up on the auxiliary losses, then policy
//! training on `λ·L_bc + L_pid`.

mod data;
pub mod gradcheck;
mod labels;
mod rollout;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::brains::{brain_losses, BrainTargets};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graphworld::{observations, START_HEADING};
use crate::metrics::{evaluate, MetricsReport, SuccessMode, Trajectory};
use crate::model::{Model, BRAIN_PREFIX};
use crate::params::{AdamW, ParamId, ParamStore};
use crate::policy::TopoMemory;
use crate::tensor::Matrix;

pub use data::{build_datasets, build_split, Datasets, Split, WorldData, SPLIT_DIRS, UNSEEN_WORLD_OFFSET};
pub use labels::{pseudo_labeler, pseudo_labelers, LabelContext, MemoryGraph, PseudoLabeler};
pub use rollout::{
    bc_loss, greedy_rollout, pid_rollout_loss, rollout, sampling_rng, Driver, EpisodeEnv, RolloutOutput,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_bc: f64,
    pub loss_pid: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupLog {
    pub step: usize,
    pub loss_left: f64,
    pub loss_right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub seen: MetricsReport,
    pub unseen: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub warmup: Vec<WarmupLog>,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub log: TrainLog,
    /// Step and unseen SR of the best evaluation point.
    pub best: Option<(usize, f64)>,
}

/// Per-parameter gradients, sorted by id.
type Grads = Vec<(ParamId, Matrix)>;

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Order-preserving map, parallel when a pool is given.
fn map_ordered<T: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Adds `src` into `acc` in the order given.
fn accumulate(acc: &mut Vec<(ParamId, Matrix)>, src: Vec<(ParamId, Matrix)>) {
    for (id, m) in src {
        match acc.binary_search_by_key(&id, |(i, _)| *i) {
            Ok(pos) => acc[pos].1.add_assign(&m),
            Err(pos) => acc.insert(pos, (id, m)),
        }
    }
}

fn scale_grads(grads: &mut [(ParamId, Matrix)], s: f64) {
    for (_, m) in grads.iter_mut() {
        m.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

fn grad_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, m)| m.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// One episode's forward and backward pass on a single tape.
#[allow(clippy::too_many_arguments)]
pub fn episode_gradients(
    model: &Model,
    store: &ParamStore,
    env: EpisodeEnv,
    lambda: f64,
    labeler: &dyn PseudoLabeler,
    rng: ChaCha8Rng,
    step_cap: usize,
) -> Result<(f64, f64, Grads)> {
    let mut g = Graph::new();
    let instr = model.encode(&mut g, store, &env.episode.instruction)?;
    let bc = bc_loss(model, &mut g, store, &instr, env)?;
    let (pid, _) = pid_rollout_loss(model, &mut g, store, &instr, env, labeler, rng, step_cap)?;
    let weighted = g.scale(bc, lambda);
    let total = g.add(weighted, pid);
    let (lb, lp) = (g.value(bc).item(), g.value(pid).item());
    let grads = g.backward(total).param_grads(&g);
    Ok((lb, lp, grads))
}

/// Teacher-forced branch losses along one ground-truth path, averaged over steps.
fn warmup_gradients(model: &Model, store: &ParamStore, env: EpisodeEnv) -> Result<(f64, f64, Grads)> {
    let mut g = Graph::new();
    let ep = env.episode;
    let instr = model.encode(&mut g, store, &ep.instruction)?;
    let mut mem = TopoMemory::new();
    let mut heading = START_HEADING;
    let mut terms = Vec::new();
    let (mut sum_l, mut sum_r) = (0.0, 0.0);
    for (t, &v) in ep.gt_path.iter().enumerate() {
        let obs = observations(env.world, v, heading)?;
        let own = env.world.view_feature(v);
        let summary = model.visited_summary(&mem, v, own, t);
        let state = model.brains.left_forward(&mut g, store, &instr, &obs, &summary)?;
        let imag = model.brains.right_forward(&mut g, store, &instr, &obs)?;
        let targets = BrainTargets {
            hop_index: t,
            candidate_landmarks: obs.iter().map(|o| env.world.landmark(o.candidate)).collect(),
        };
        let (l, r) = brain_losses(&mut g, &state, &imag, &targets)?;
        sum_l += g.value(l).item();
        sum_r += g.value(r).item();
        terms.push(g.add(l, r));
        let n = obs.len();
        mem.update(v, own, &obs, vec![None; n], t)?;
        if let Some(&next) = ep.gt_path.get(t + 1) {
            heading = env.world.heading_between(v, next);
        }
    }
    let k = terms.len() as f64;
    let cat = g.concat_rows(&terms);
    let total = g.sum(cat);
    let mean = g.scale(total, 1.0 / k);
    let grads = g.backward(mean).param_grads(&g);
    Ok((sum_l / k, sum_r / k, grads))
}

/// Greedy rollouts over a split's episodes (the first `limit` if nonzero).
pub fn evaluate_split(
    model: &Model,
    store: &ParamStore,
    split: &Split,
    limit: usize,
    step_cap: usize,
    workers: usize,
) -> Result<(MetricsReport, Vec<Trajectory>)> {
    let n = if limit == 0 { split.episodes.len() } else { limit.min(split.episodes.len()) };
    let pool = pool(workers)?;
    let idx: Vec<usize> = (0..n).collect();
    let trajs: Vec<Result<Trajectory>> = map_ordered(pool.as_ref(), &idx, |&i| {
        greedy_rollout(model, store, split.env(i)?, step_cap).map(|o| o.trajectory)
    });
    let trajs: Vec<Trajectory> = trajs.into_iter().collect::<Result<_>>()?;
    let graphs: Vec<_> = split.worlds.iter().map(|w| w.graph.clone()).collect();
    let radius = split.episodes.first().map_or(crate::config::DEFAULT_SUCCESS_RADIUS, |e| e.success_radius);
    let report = evaluate(&graphs, &split.episodes[..n], &trajs, radius, SuccessMode::Threshold)?;
    Ok((report, trajs))
}

struct LogFiles {
    dir: PathBuf,
    steps: BufWriter<File>,
    warmup: BufWriter<File>,
    evals: BufWriter<File>,
}

impl LogFiles {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |n: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(n))?)) };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: open("train_log.jsonl")?,
            warmup: open("warmup_log.jsonl")?,
            evals: open("eval_log.jsonl")?,
        })
    }

    fn line(w: &mut BufWriter<File>, value: &impl Serialize) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.warmup.flush()?;
        self.evals.flush()?;
        Ok(())
    }
}

fn nan_abort(out: Option<&Path>, step: usize, episode_ids: &[String], bc: &[f64], pid: &[f64]) -> Error {
    let detail = serde_json::json!({
        "step": step,
        "episodes": episode_ids,
        "loss_bc": bc.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
        "loss_pid": pid.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
    });
    if let Some(dir) = out {
        let _ = std::fs::write(dir.join("nan_dump.json"), detail.to_string());
    }
    Error::NonFinite(format!("loss at step {step}: {detail}"))
}

/// Runs both stages. With `out` set, logs stream to JSON-lines files and
/// checkpoints land in `out/checkpoints/{last,best}`.
pub fn train(cfg: &RunConfig, data: &Datasets, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_disjoint()?;
    let tc = &cfg.train;
    let (model, mut store) = Model::new(&cfg.model, tc.seed)?;
    let labeler = pseudo_labeler(&tc.pseudo_label)?;
    let pool = pool(tc.workers)?;
    let mut files = out.map(LogFiles::create).transpose()?;
    let mut log = TrainLog::default();

    // stage 1: branch warm-up
    let mut opt = AdamW::new(tc.warmup_learning_rate, tc.weight_decay);
    for step in 1..=tc.warmup_steps {
        let picks = data.train.sample_batch(tc.seed ^ 0x5757, step as u64, tc.batch_size);
        let results = map_ordered(pool.as_ref(), &picks, |&i| warmup_gradients(&model, &store, data.train.env(i)?));
        let mut acc = Vec::new();
        let (mut l, mut r) = (0.0, 0.0);
        for res in results {
            let (a, b, grads) = res?;
            l += a;
            r += b;
            accumulate(&mut acc, grads);
        }
        let k = picks.len() as f64;
        scale_grads(&mut acc, 1.0 / k);
        if !(l.is_finite() && r.is_finite()) {
            return Err(Error::NonFinite(format!("warm-up loss at step {step}")));
        }
        opt.step(&mut store, &acc);
        let entry = WarmupLog { step, loss_left: l / k, loss_right: r / k };
        if let Some(f) = files.as_mut() {
            LogFiles::line(&mut f.warmup, &entry)?;
        }
        log.warmup.push(entry);
    }
    if tc.brain_freeze {
        store.set_trainable_prefix(BRAIN_PREFIX, false);
    }

    // stage 2: policy
    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);
    let mut best: Option<(usize, f64)> = None;
    for step in 1..=tc.max_steps {
        let picks = data.train.sample_batch(tc.seed, step as u64, tc.batch_size);
        let jobs: Vec<(usize, usize)> = picks.iter().copied().enumerate().collect();
        let results = map_ordered(pool.as_ref(), &jobs, |&(slot, i)| {
            let rng = sampling_rng(tc.seed, step as u64, slot as u64);
            episode_gradients(&model, &store, data.train.env(i)?, tc.lambda, labeler, rng, tc.step_cap)
        });
        let mut acc = Vec::new();
        let mut bcs = Vec::with_capacity(jobs.len());
        let mut pids = Vec::with_capacity(jobs.len());
        for res in results {
            let (b, p, grads) = res?;
            bcs.push(b);
            pids.push(p);
            accumulate(&mut acc, grads);
        }
        let k = jobs.len() as f64;
        let loss_bc = bcs.iter().sum::<f64>() / k;
        let loss_pid = pids.iter().sum::<f64>() / k;
        if !(loss_bc.is_finite() && loss_pid.is_finite()) {
            let ids: Vec<String> = picks.iter().map(|&i| data.train.episodes[i].id.clone()).collect();
            return Err(nan_abort(out, step, &ids, &bcs, &pids));
        }
        scale_grads(&mut acc, 1.0 / k);
        let entry =
            StepLog { step, loss_bc, loss_pid, loss_total: tc.lambda * loss_bc + loss_pid, grad_norm: grad_norm(&acc) };
        opt.step(&mut store, &acc);
        if let Some(f) = files.as_mut() {
            LogFiles::line(&mut f.steps, &entry)?;
        }
        log.steps.push(entry);

        if (tc.eval_every > 0 && step % tc.eval_every == 0) || step == tc.max_steps {
            let (seen, _) = evaluate_split(&model, &store, &data.seen, tc.eval_episodes, tc.step_cap, tc.workers)?;
            let (unseen, _) = evaluate_split(&model, &store, &data.unseen, tc.eval_episodes, tc.step_cap, tc.workers)?;
            let sr = unseen.aggregate.sr;
            log::info!("step {step}: seen SR {:.3}, unseen SR {:.3}", seen.aggregate.sr, sr);
            let entry = EvalLog { step, seen, unseen };
            if let Some(f) = files.as_mut() {
                LogFiles::line(&mut f.evals, &entry)?;
                f.flush()?;
                save_checkpoint(&f.dir.join("checkpoints").join("last"), &cfg.model, &store, step)?;
            }
            log.evals.push(entry);
            if best.is_none_or(|(_, b)| sr > b) {
                best = Some((step, sr));
                if let Some(f) = files.as_ref() {
                    save_checkpoint(&f.dir.join("checkpoints").join("best"), &cfg.model, &store, step)?;
                }
            }
        }
    }
    if let Some(f) = files.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutcome { model, store, log, best })
}

/// Picks `n` episode indices uniformly with replacement.
fn sample_indices(len: usize, seed: u64, step: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ModelConfig, TrainConfig};

    pub(crate) fn toy_run(variant: &str, lambda: f64) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                ff_mult: 2,
                state_tokens: 2,
                imagination_tokens: 2,
                brain_blocks: 1,
                sgca_layers: 1,
                cross_rounds: 1,
                variant: variant.into(),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_steps: 3,
                warmup_steps: 2,
                eval_every: 2,
                lambda,
                learning_rate: 1e-3,
                warmup_learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            data: DataConfig {
                train_worlds: 3,
                unseen_worlds: 2,
                train_episodes_per_world: 2,
                ..DataConfig::default()
            },
        }
    }

    #[test]
    fn logged_total_matches_weighted_sum() {
        for lambda in [0.0, 0.5, 1.0] {
            let cfg = toy_run("full", lambda);
            let data = build_datasets(&cfg.data).unwrap();
            let out = train(&cfg, &data, None).unwrap();
            assert_eq!(out.log.steps.len(), 3);
            assert_eq!(out.log.warmup.len(), 2);
            assert_eq!(out.log.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 3]);
            for s in &out.log.steps {
                assert!((s.loss_total - (lambda * s.loss_bc + s.loss_pid)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn brains_stay_frozen_during_policy_training() {
        let cfg = toy_run("full", 1.0);
        let data = build_datasets(&cfg.data).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        let mut warm = cfg.clone();
        warm.train.max_steps = 0;
        // same warm-up, no policy steps
        let before = train(
            &RunConfig { train: TrainConfig { max_steps: 1, lambda: 0.0, ..warm.train }, ..cfg.clone() },
            &data,
            None,
        )
        .unwrap();
        for id in out.store.ids() {
            let name = out.store.name(id);
            if name.starts_with(BRAIN_PREFIX) {
                assert_eq!(out.store.value(id), before.store.value(before.store.id(name).unwrap()), "{name}");
            }
        }
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_run("baseline", 1.0);
        let data = build_datasets(&cfg.data).unwrap();
        train(&cfg, &data, Some(dir.path())).unwrap();
        let lines = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let evals = std::fs::read_to_string(dir.path().join("eval_log.jsonl")).unwrap();
        assert_eq!(evals.lines().count(), 2);
        assert!(dir.path().join("checkpoints/best/manifest.json").exists());
        assert!(dir.path().join("checkpoints/last/manifest.json").exists());
    }

    #[test]
    fn parallel_workers_match_serial() {
        let cfg = toy_run("full", 1.0);
        let data = build_datasets(&cfg.data).unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let mut par = cfg.clone();
        par.train.workers = 2;
        let b = train(&par, &data, None).unwrap();
        assert_eq!(a.log, b.log);
    }
}
