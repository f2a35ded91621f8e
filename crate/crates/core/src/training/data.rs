//! Seen/unseen world splits and their episodes.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::graphworld::{
    generate_world, read_episodes, read_world, sample_episodes, write_episodes, write_world, DistanceTable, Episode,
    NavGraph, WorldConfig,
};

use super::rollout::EpisodeEnv;

/// Unseen world ids start here, so they can never collide with training ids.
pub const UNSEEN_WORLD_OFFSET: u64 = 1_000_000;

pub struct WorldData {
    pub graph: NavGraph,
    pub table: DistanceTable,
}

impl WorldData {
    pub fn new(graph: NavGraph) -> Self {
        let table = DistanceTable::new(&graph);
        Self { graph, table }
    }
}

pub struct Split {
    pub worlds: Vec<WorldData>,
    pub episodes: Vec<Episode>,
    index: HashMap<u64, usize>,
}

impl Split {
    pub fn new(worlds: Vec<WorldData>, episodes: Vec<Episode>) -> Result<Self> {
        let index: HashMap<u64, usize> = worlds.iter().enumerate().map(|(i, w)| (w.graph.world_id, i)).collect();
        if index.len() != worlds.len() {
            return Err(Error::Format("duplicate world id in split".into()));
        }
        for ep in &episodes {
            if !index.contains_key(&ep.world_id) {
                return Err(Error::Format(format!("episode {} refers to unknown world {}", ep.id, ep.world_id)));
            }
        }
        Ok(Self { worlds, episodes, index })
    }

    pub fn world_ids(&self) -> BTreeSet<u64> {
        self.index.keys().copied().collect()
    }

    pub fn world(&self, id: u64) -> Option<&WorldData> {
        self.index.get(&id).map(|&i| &self.worlds[i])
    }

    pub fn env(&self, episode: usize) -> Result<EpisodeEnv<'_>> {
        let ep =
            self.episodes.get(episode).ok_or_else(|| Error::Format(format!("episode index {episode} out of range")))?;
        let w = &self.worlds[self.index[&ep.world_id]];
        Ok(EpisodeEnv { world: &w.graph, table: &w.table, episode: ep })
    }

    /// `dir/worlds/world_<id>.jsonl` per world plus `dir/episodes.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let wdir = dir.join("worlds");
        std::fs::create_dir_all(&wdir)?;
        for w in &self.worlds {
            write_world(&w.graph, &wdir.join(format!("world_{}.jsonl", w.graph.world_id)))?;
        }
        write_episodes(&self.episodes, &dir.join("episodes.jsonl"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut worlds = Vec::new();
        for entry in std::fs::read_dir(dir.join("worlds"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                worlds.push(WorldData::new(read_world(&path)?));
            }
        }
        worlds.sort_by_key(|w| w.graph.world_id);
        Self::new(worlds, read_episodes(&dir.join("episodes.jsonl"))?)
    }

    /// `n` episode indices drawn uniformly with replacement.
    pub fn sample_batch(&self, seed: u64, step: u64, n: usize) -> Vec<usize> {
        super::sample_indices(self.episodes.len(), seed, step, n)
    }
}

pub struct Datasets {
    pub train: Split,
    /// Held-out episodes on training worlds.
    pub seen: Split,
    pub unseen: Split,
}

pub const SPLIT_DIRS: [&str; 3] = ["train", "seen", "unseen"];

impl Datasets {
    pub fn save(&self, root: &Path) -> Result<()> {
        self.save_seen(root)?;
        self.unseen.save(&root.join("unseen"))
    }

    /// Training worlds with their train and held-out episodes.
    pub fn save_seen(&self, root: &Path) -> Result<()> {
        self.train.save(&root.join("train"))?;
        self.seen.save(&root.join("seen"))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let out = Self {
            train: Split::load(&root.join("train"))?,
            seen: Split::load(&root.join("seen"))?,
            unseen: Split::load(&root.join("unseen"))?,
        };
        out.check_disjoint()?;
        Ok(out)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let a = self.train.world_ids();
        let b = self.unseen.world_ids();
        let shared: Vec<String> = a.intersection(&b).map(u64::to_string).collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("train and unseen splits share world ids: {}", shared.join(", "))))
        }
    }
}

fn world_seed(data_seed: u64, world_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(world_id);
    rng.random()
}

/// One world with a node count drawn from the configured range. Seeds that
/// admit no feasible episode are skipped deterministically.
fn build_world(cfg: &DataConfig, world_id: u64) -> Result<WorldData> {
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed(cfg.seed, world_id));
    let mut last = None;
    for _ in 0..cfg.world.max_retries.max(1) {
        let node_count = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let wc = WorldConfig { node_count, ..cfg.world.clone() };
        match generate_world(&wc, world_id, rng.random()) {
            Ok(g) => match sample_episodes(&g, &cfg.episode, 1, 0) {
                Ok(_) => return Ok(WorldData::new(g)),
                Err(e @ Error::Infeasible(_)) => last = Some(e),
                Err(e) => return Err(e),
            },
            Err(e @ Error::Infeasible(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Infeasible(format!("world {world_id}"))))
}

fn episodes_for(cfg: &DataConfig, w: &WorldData, count: usize, salt: u64, tag: &str) -> Result<Vec<Episode>> {
    let seed = world_seed(cfg.seed ^ salt, w.graph.world_id);
    let mut eps = sample_episodes(&w.graph, &cfg.episode, count, seed)?;
    for (i, e) in eps.iter_mut().enumerate() {
        e.id = format!("w{}-{tag}{i}", w.graph.world_id);
    }
    Ok(eps)
}

/// Worlds `first..first+count` with `per_world` episodes each.
pub fn build_split(cfg: &DataConfig, first: u64, count: usize, per_world: usize, tag: &str) -> Result<Split> {
    let worlds: Vec<WorldData> = (0..count as u64).map(|i| build_world(cfg, first + i)).collect::<Result<_>>()?;
    let mut episodes = Vec::new();
    for w in &worlds {
        episodes.extend(episodes_for(cfg, w, per_world, 0, tag)?);
    }
    Split::new(worlds, episodes)
}

/// Train worlds `0..train_worlds`; unseen worlds from `UNSEEN_WORLD_OFFSET`;
/// seen-eval episodes on the first `min(unseen_worlds, train_worlds)` train
/// worlds, drawn from a separate stream.
pub fn build_datasets(cfg: &DataConfig) -> Result<Datasets> {
    if cfg.train_worlds == 0 || cfg.unseen_worlds == 0 {
        return Err(Error::Config("train_worlds and unseen_worlds must be positive".into()));
    }
    let train = build_split(cfg, 0, cfg.train_worlds, cfg.train_episodes_per_world, "e")?;
    let unseen = build_split(cfg, UNSEEN_WORLD_OFFSET, cfg.unseen_worlds, cfg.eval_episodes_per_world, "u")?;
    let k = cfg.unseen_worlds.min(cfg.train_worlds);
    let mut worlds = Vec::with_capacity(k);
    let mut episodes = Vec::new();
    for w in &train.worlds[..k] {
        episodes.extend(episodes_for(cfg, w, cfg.eval_episodes_per_world, 0x5EE4, "s")?);
        worlds.push(WorldData::new(w.graph.clone()));
    }
    let seen = Split::new(worlds, episodes)?;
    let out = Datasets { train, seen, unseen };
    out.check_disjoint()?;
    Ok(out)
}
