//! Line-delimited JSON world and episode files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, NavGraph, WorldConfig};
use crate::error::{Error, Result};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum WorldLine {
    Header { version: u32, world_id: u64, seed: u64, config: WorldConfig },
    Node { id: usize, pos: [f64; 2], landmark: usize, feature: Vec<f64> },
    Edge { u: usize, v: usize, length: f64 },
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    version: u32,
    #[serde(flatten)]
    episode: Episode,
}

pub fn write_world(graph: &NavGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = WorldLine::Header {
        version: WORLD_FORMAT_VERSION,
        world_id: graph.world_id,
        seed: graph.seed,
        config: graph.config.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for v in graph.nodes() {
        let line = WorldLine::Node {
            id: v,
            pos: graph.position(v),
            landmark: graph.landmark(v),
            feature: graph.view_feature(v).to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    for (u, v, length) in graph.edges() {
        writeln!(w, "{}", serde_json::to_string(&WorldLine::Edge { u, v, length })?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<NavGraph> {
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut nodes: Vec<(usize, [f64; 2], usize, Vec<f64>)> = Vec::new();
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: WorldLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match parsed {
            WorldLine::Header { version, world_id, seed, config } => {
                if version != WORLD_FORMAT_VERSION {
                    return Err(Error::Format(format!("unsupported world version {version}")));
                }
                header = Some((world_id, seed, config));
            }
            WorldLine::Node { id, pos, landmark, feature } => nodes.push((id, pos, landmark, feature)),
            WorldLine::Edge { u, v, length } => edges.push((u, v, length)),
        }
    }
    let (world_id, seed, config) = header.ok_or_else(|| Error::Format("missing header line".into()))?;
    nodes.sort_by_key(|n| n.0);
    if nodes.iter().enumerate().any(|(i, n)| n.0 != i) {
        return Err(Error::Format("node ids are not 0..n".into()));
    }
    let positions = nodes.iter().map(|n| n.1).collect();
    let landmarks = nodes.iter().map(|n| n.2).collect();
    let features = nodes.into_iter().map(|n| n.3).collect();
    NavGraph::from_parts(world_id, seed, config, positions, landmarks, features, &edges)
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ep in episodes {
        let line = EpisodeLine { version: WORLD_FORMAT_VERSION, episode: ep.clone() };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EpisodeLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if parsed.version != WORLD_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported episode version {}", parsed.version)));
        }
        out.push(parsed.episode);
    }
    Ok(out)
}
