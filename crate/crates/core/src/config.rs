//! Run configuration.
//!
//! Config files are flat `key = value` TOML; every key maps onto one field of
//! [`RunConfig`]. Command-line overrides use the same keys and are applied
//! after the file, so they win.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphworld::{EpisodeConfig, WorldConfig, NUM_SPECIAL_TOKENS};

/// Success threshold in meters: an episode succeeds when the navigation
/// error is strictly below it.
pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Query tokens of the state-estimation branch (rows of the state embedding).
    pub state_tokens: usize,
    /// Query tokens per candidate in the imagination branch.
    pub imagination_tokens: usize,
    pub brain_blocks: usize,
    pub sgca_layers: usize,
    /// Cosine-attention temperature; `None` means `1/sqrt(d_model)`.
    pub sgca_temperature: Option<f64>,
    /// Rounds of (instruction cross-attention, graph-aware self-attention).
    pub cross_rounds: usize,
    /// Ceiling applied to raw meter distances before the attention bias.
    pub distance_clip: f64,
    /// Allow already-visited memory nodes as action targets.
    pub score_visited: bool,
    pub landmark_vocab: usize,
    pub feature_dim: usize,
    /// Classes of the progress head, also the width of the step one-hot in
    /// the visited summary.
    pub progress_slots: usize,
    pub variant: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            state_tokens: 4,
            imagination_tokens: 4,
            brain_blocks: 2,
            sgca_layers: 4,
            sgca_temperature: None,
            cross_rounds: 2,
            distance_clip: 30.0,
            score_visited: true,
            landmark_vocab: 6,
            feature_dim: 16,
            progress_slots: 16,
            variant: "full".into(),
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL_TOKENS + self.landmark_vocab
    }

    pub fn summary_dim(&self) -> usize {
        self.feature_dim + self.progress_slots
    }

    pub fn temperature(&self) -> f64 {
        self.sgca_temperature.unwrap_or(1.0 / (self.d_model as f64).sqrt())
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            errs.push(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if !(1..=4).contains(&self.sgca_layers) {
            errs.push(format!("sgca_layers {} outside 1..=4", self.sgca_layers));
        }
        if let Some(t) = self.sgca_temperature {
            if !(t > 0.0) {
                errs.push(format!("sgca_temperature {t} must be > 0"));
            }
        }
        if self.state_tokens == 0 || self.imagination_tokens == 0 {
            errs.push("state_tokens and imagination_tokens must be >= 1".into());
        }
        if self.cross_rounds == 0 {
            errs.push("cross_rounds must be >= 1".into());
        }
        if self.feature_dim < self.landmark_vocab {
            errs.push("feature_dim must be >= landmark_vocab".into());
        }
        if !(self.distance_clip > 0.0) {
            errs.push("distance_clip must be > 0".into());
        }
        errs
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub brain_freeze: bool,
    pub warmup_steps: usize,
    pub warmup_learning_rate: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Decisions per sampled rollout before truncation.
    pub step_cap: usize,
    /// `combined` or `partial`.
    pub pseudo_label: String,
    /// Episodes per split used at evaluation points (0 = all).
    pub eval_episodes: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 2,
            learning_rate: 1e-5,
            weight_decay: 0.05,
            lambda: 1.0,
            brain_freeze: true,
            warmup_steps: 5000,
            warmup_learning_rate: 1e-5,
            max_steps: 20_000,
            eval_every: 1000,
            step_cap: 15,
            pseudo_label: "combined".into(),
            eval_episodes: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0) {
            errs.push(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.warmup_learning_rate > 0.0) {
            errs.push(format!("warmup_learning_rate {} must be > 0", self.warmup_learning_rate));
        }
        if !(self.lambda >= 0.0) {
            errs.push(format!("lambda {} must be >= 0", self.lambda));
        }
        if self.weight_decay < 0.0 {
            errs.push("weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.step_cap == 0 {
            errs.push("step_cap must be >= 1".into());
        }
        if self.workers == 0 {
            errs.push("workers must be >= 1".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Seed for world and episode generation, independent of the training seed.
    pub seed: u64,
    pub world: WorldConfig,
    /// Node counts are drawn uniformly from this inclusive range per world.
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub episode: EpisodeConfig,
    pub train_worlds: usize,
    pub unseen_worlds: usize,
    pub train_episodes_per_world: usize,
    pub eval_episodes_per_world: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            min_nodes: 8,
            max_nodes: 12,
            episode: EpisodeConfig::default(),
            train_worlds: 200,
            unseen_worlds: 50,
            train_episodes_per_world: 20,
            eval_episodes_per_world: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let table: BTreeMap<String, toml::Value> =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut errs = Vec::new();
        for (k, v) in table {
            let raw = match v {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            if let Err(e) = self.set(&k, &raw) {
                errs.push(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Set one flat key. Returns a message naming the key on failure.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.trim().parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "d_model" => m.d_model = p(key, value)?,
            "heads" => m.heads = p(key, value)?,
            "ff_mult" => m.ff_mult = p(key, value)?,
            "state_tokens" => m.state_tokens = p(key, value)?,
            "imagination_tokens" => m.imagination_tokens = p(key, value)?,
            "brain_blocks" => m.brain_blocks = p(key, value)?,
            "sgca_layers" => m.sgca_layers = p(key, value)?,
            "sgca_temperature" => {
                m.sgca_temperature = match value.trim() {
                    "auto" | "" => None,
                    v => Some(p(key, v)?),
                }
            }
            "cross_rounds" => m.cross_rounds = p(key, value)?,
            "distance_clip" => m.distance_clip = p(key, value)?,
            "score_visited" => m.score_visited = p(key, value)?,
            "progress_slots" => m.progress_slots = p(key, value)?,
            "variant" | "ablate" => m.variant = value.trim().to_string(),
            "landmark_vocab" => {
                let v: usize = p(key, value)?;
                m.landmark_vocab = v;
                d.world.landmark_vocab = v;
            }
            "feature_dim" => {
                let v: usize = p(key, value)?;
                m.feature_dim = v;
                d.world.feature_dim = v;
            }
            "seed" => t.seed = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "learning_rate" => t.learning_rate = p(key, value)?,
            "weight_decay" => t.weight_decay = p(key, value)?,
            "lambda" => t.lambda = p(key, value)?,
            "brain_freeze" => t.brain_freeze = p(key, value)?,
            "warmup_steps" => t.warmup_steps = p(key, value)?,
            "warmup_learning_rate" => t.warmup_learning_rate = p(key, value)?,
            "max_steps" => t.max_steps = p(key, value)?,
            "eval_every" => t.eval_every = p(key, value)?,
            "step_cap" => t.step_cap = p(key, value)?,
            "pseudo_label" => t.pseudo_label = value.trim().to_string(),
            "eval_episodes" => t.eval_episodes = p(key, value)?,
            "workers" => t.workers = p(key, value)?,
            "data_seed" => d.seed = p(key, value)?,
            "min_nodes" => d.min_nodes = p(key, value)?,
            "max_nodes" => d.max_nodes = p(key, value)?,
            "max_degree" => d.world.max_degree = p(key, value)?,
            "min_separation" => d.world.min_separation = p(key, value)?,
            "spacing" => d.world.spacing = p(key, value)?,
            "extra_edge_prob" => d.world.extra_edge_prob = p(key, value)?,
            "noise_std" => d.world.noise_std = p(key, value)?,
            "min_hops" => d.episode.min_hops = p(key, value)?,
            "max_hops" => d.episode.max_hops = p(key, value)?,
            "success_radius" => d.episode.success_radius = p(key, value)?,
            "train_worlds" => d.train_worlds = p(key, value)?,
            "unseen_worlds" => d.unseen_worlds = p(key, value)?,
            "train_episodes_per_world" => d.train_episodes_per_world = p(key, value)?,
            "eval_episodes_per_world" => d.eval_episodes_per_world = p(key, value)?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Every key accepted by [`RunConfig::set`] with its current value.
    pub fn to_flat(&self) -> BTreeMap<&'static str, toml::Value> {
        use toml::Value::{Boolean as B, Float as F, String as S};
        let i = |v: usize| toml::Value::Integer(v as i64);
        let u = |v: u64| toml::Value::Integer(v as i64);
        let (m, t, d) = (&self.model, &self.train, &self.data);
        BTreeMap::from([
            ("d_model", i(m.d_model)),
            ("heads", i(m.heads)),
            ("ff_mult", i(m.ff_mult)),
            ("state_tokens", i(m.state_tokens)),
            ("imagination_tokens", i(m.imagination_tokens)),
            ("brain_blocks", i(m.brain_blocks)),
            ("sgca_layers", i(m.sgca_layers)),
            ("sgca_temperature", m.sgca_temperature.map_or(S("auto".into()), F)),
            ("cross_rounds", i(m.cross_rounds)),
            ("distance_clip", F(m.distance_clip)),
            ("score_visited", B(m.score_visited)),
            ("progress_slots", i(m.progress_slots)),
            ("variant", S(m.variant.clone())),
            ("landmark_vocab", i(m.landmark_vocab)),
            ("feature_dim", i(m.feature_dim)),
            ("seed", u(t.seed)),
            ("batch_size", i(t.batch_size)),
            ("learning_rate", F(t.learning_rate)),
            ("weight_decay", F(t.weight_decay)),
            ("lambda", F(t.lambda)),
            ("brain_freeze", B(t.brain_freeze)),
            ("warmup_steps", i(t.warmup_steps)),
            ("warmup_learning_rate", F(t.warmup_learning_rate)),
            ("max_steps", i(t.max_steps)),
            ("eval_every", i(t.eval_every)),
            ("step_cap", i(t.step_cap)),
            ("pseudo_label", S(t.pseudo_label.clone())),
            ("eval_episodes", i(t.eval_episodes)),
            ("workers", i(t.workers)),
            ("data_seed", u(d.seed)),
            ("min_nodes", i(d.min_nodes)),
            ("max_nodes", i(d.max_nodes)),
            ("max_degree", i(d.world.max_degree)),
            ("min_separation", F(d.world.min_separation)),
            ("spacing", F(d.world.spacing)),
            ("extra_edge_prob", F(d.world.extra_edge_prob)),
            ("noise_std", F(d.world.noise_std)),
            ("min_hops", i(d.episode.min_hops)),
            ("max_hops", i(d.episode.max_hops)),
            ("success_radius", F(d.episode.success_radius)),
            ("train_worlds", i(d.train_worlds)),
            ("unseen_worlds", i(d.unseen_worlds)),
            ("train_episodes_per_world", i(d.train_episodes_per_world)),
            ("eval_episodes_per_world", i(d.eval_episodes_per_world)),
        ])
    }

    /// Flat TOML that [`RunConfig::from_file`] reads back to an equal config.
    pub fn to_toml_string(&self) -> String {
        self.to_flat().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Every validation failure, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = self.model.validate();
        errs.extend(self.train.validate());
        if let Err(e) = crate::variants::variant(&self.model.variant) {
            errs.push(e.to_string());
        }
        if let Err(e) = crate::training::pseudo_labeler(&self.train.pseudo_label) {
            errs.push(e.to_string());
        }
        if self.data.min_nodes < 6 || self.data.min_nodes > self.data.max_nodes {
            errs.push(format!("node range {}..={} invalid", self.data.min_nodes, self.data.max_nodes));
        }
        if self.model.landmark_vocab != self.data.world.landmark_vocab
            || self.model.feature_dim != self.data.world.feature_dim
        {
            errs.push("model and world disagree on landmark_vocab/feature_dim".into());
        }
        if self.model.progress_slots <= self.data.episode.max_hops {
            errs.push(format!(
                "progress_slots {} must exceed max_hops {}",
                self.model.progress_slots, self.data.episode.max_hops
            ));
        }
        if !(self.data.episode.success_radius > 0.0) {
            errs.push("success_radius must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}
