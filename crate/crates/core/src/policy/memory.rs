use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphworld::{NodeId, Observation};

const EDGE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Visited,
    Frontier,
    Current,
}

impl NodeStatus {
    pub fn index(self) -> usize {
        match self {
            NodeStatus::Visited => 0,
            NodeStatus::Frontier => 1,
            NodeStatus::Current => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryNode<E> {
    pub id: NodeId,
    pub status: NodeStatus,
    /// Views pooled into the node's visual embedding.
    pub views: Vec<Vec<f64>>,
    /// The node's own view, known once it has been stood on.
    pub own_view: Option<Vec<f64>>,
    pub v_atd: Option<E>,
    pub last_step_seen: usize,
}

impl<E> MemoryNode<E> {
    pub fn mean_view(&self) -> Vec<f64> {
        let n = self.views.len() as f64;
        let mut out = vec![0.0; self.views[0].len()];
        for v in &self.views {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// The agent's partial map. Nodes keep insertion order, which fixes the
/// policy's sequence order.
#[derive(Clone, Debug)]
pub struct TopoMemory<E> {
    nodes: Vec<MemoryNode<E>>,
    slot: HashMap<NodeId, usize>,
    edges: BTreeMap<(NodeId, NodeId), f64>,
    adjacency: Vec<Vec<(usize, f64)>>,
    /// All-pairs shortest distances between slots.
    dist: Vec<Vec<f64>>,
    current: Option<usize>,
}

impl<E> Default for TopoMemory<E> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            slot: HashMap::new(),
            edges: BTreeMap::new(),
            adjacency: Vec::new(),
            dist: Vec::new(),
            current: None,
        }
    }
}

impl<E: Clone> TopoMemory<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[MemoryNode<E>] {
        &self.nodes
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slot.contains_key(&id)
    }

    pub fn slot_of(&self, id: NodeId) -> Result<usize> {
        self.slot.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&MemoryNode<E>> {
        Ok(&self.nodes[self.slot_of(id)?])
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current.map(|s| self.nodes[s].id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.edges.iter().map(|(&(u, v), &w)| (u, v, w))
    }

    pub fn neighbors(&self, id: NodeId) -> Result<Vec<(NodeId, f64)>> {
        let s = self.slot_of(id)?;
        Ok(self.adjacency[s].iter().map(|&(t, w)| (self.nodes[t].id, w)).collect())
    }

    pub fn frontier(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Frontier).map(|n| n.id).collect()
    }

    /// Nodes the policy may select besides STOP, in memory order.
    pub fn action_nodes(&self, include_visited: bool) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| match n.status {
                NodeStatus::Frontier => true,
                NodeStatus::Visited => include_visited,
                NodeStatus::Current => false,
            })
            .map(|n| n.id)
            .collect()
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(self.dist[self.slot_of(a)?][self.slot_of(b)?])
    }

    /// Slot-indexed distance matrix.
    pub fn distance_matrix(&self) -> &[Vec<f64>] {
        &self.dist
    }

    /// Shortest memory path; ties go to the smaller node id.
    pub fn path(&self, a: NodeId, b: NodeId) -> Result<Vec<NodeId>> {
        let (sa, sb) = (self.slot_of(a)?, self.slot_of(b)?);
        if !self.dist[sa][sb].is_finite() {
            return Err(Error::Unreachable(a, b));
        }
        let mut path = vec![a];
        let mut at = sa;
        while at != sb {
            let remaining = self.dist[at][sb];
            let next = self.adjacency[at]
                .iter()
                .filter(|&&(t, w)| (w + self.dist[t][sb] - remaining).abs() <= 1e-9 * remaining.max(1.0))
                .min_by_key(|&&(t, _)| self.nodes[t].id)
                .map(|&(t, _)| t)
                .ok_or(Error::Unreachable(a, b))?;
            path.push(self.nodes[next].id);
            at = next;
        }
        Ok(path)
    }

    fn insert(&mut self, id: NodeId, status: NodeStatus, step: usize) -> usize {
        let s = self.nodes.len();
        self.nodes.push(MemoryNode {
            id,
            status,
            views: Vec::new(),
            own_view: None,
            v_atd: None,
            last_step_seen: step,
        });
        self.slot.insert(id, s);
        self.adjacency.push(Vec::new());
        for row in &mut self.dist {
            row.push(f64::INFINITY);
        }
        let mut row = vec![f64::INFINITY; s + 1];
        row[s] = 0.0;
        self.dist.push(row);
        s
    }

    fn add_edge(&mut self, a: usize, b: usize, w: f64) -> Result<()> {
        let (u, v) = (self.nodes[a].id, self.nodes[b].id);
        let key = (u.min(v), u.max(v));
        if let Some(&stored) = self.edges.get(&key) {
            if (stored - w).abs() > EDGE_TOLERANCE {
                return Err(Error::EdgeLength { u: key.0, v: key.1, stored, observed: w });
            }
            return Ok(());
        }
        self.edges.insert(key, w);
        self.adjacency[a].push((b, w));
        self.adjacency[b].push((a, w));
        if w < self.dist[a][b] {
            let n = self.nodes.len();
            let (da, db) = (self.dist[a].clone(), self.dist[b].clone());
            for i in 0..n {
                for j in i..n {
                    let via = (da[i] + w + db[j]).min(db[i] + w + da[j]);
                    if via < self.dist[i][j] {
                        self.dist[i][j] = via;
                        self.dist[j][i] = via;
                    }
                }
            }
        }
        Ok(())
    }

    /// Stand on `current` and record what is seen from there. `v_atd` runs
    /// parallel to `obs`.
    pub fn update(
        &mut self,
        current: NodeId,
        own_view: &[f64],
        obs: &[Observation],
        v_atd: Vec<Option<E>>,
        step: usize,
    ) -> Result<()> {
        if v_atd.len() != obs.len() {
            return Err(Error::Shape(format!("{} imagination vectors for {} observations", v_atd.len(), obs.len())));
        }
        let cur = match self.slot.get(&current) {
            Some(&s) => s,
            None if self.nodes.is_empty() => self.insert(current, NodeStatus::Current, step),
            None => return Err(Error::UnknownNode(current)),
        };
        if let Some(prev) = self.current {
            self.nodes[prev].status = NodeStatus::Visited;
        }
        self.current = Some(cur);
        {
            let node = &mut self.nodes[cur];
            node.status = NodeStatus::Current;
            node.own_view = Some(own_view.to_vec());
            node.views = std::iter::once(own_view.to_vec()).chain(obs.iter().map(|o| o.view.clone())).collect();
            node.last_step_seen = step;
        }
        for (o, atd) in obs.iter().zip(v_atd) {
            let s = match self.slot.get(&o.candidate) {
                Some(&s) => s,
                None => self.insert(o.candidate, NodeStatus::Frontier, step),
            };
            self.add_edge(cur, s, o.distance)?;
            let node = &mut self.nodes[s];
            if node.status == NodeStatus::Frontier {
                node.views = vec![o.view.clone()];
            }
            if atd.is_some() {
                node.v_atd = atd;
            }
            node.last_step_seen = step;
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        let currents = self.nodes.iter().filter(|n| n.status == NodeStatus::Current).count();
        if !self.nodes.is_empty() && currents != 1 {
            return Err(Error::InvalidPath(format!("{currents} current nodes in memory")));
        }
        for (s, n) in self.nodes.iter().enumerate() {
            if n.status == NodeStatus::Frontier
                && !self.adjacency[s].iter().any(|&(t, _)| self.nodes[t].status != NodeStatus::Frontier)
            {
                return Err(Error::InvalidPath(format!("frontier node {} has no explored neighbour", n.id)));
            }
        }
        let n = self.nodes.len();
        for i in 0..n {
            if self.dist[i][i] != 0.0 {
                return Err(Error::InvalidPath("nonzero distance diagonal".into()));
            }
            for j in 0..n {
                if self.dist[i][j] != self.dist[j][i] {
                    return Err(Error::InvalidPath("asymmetric distance cache".into()));
                }
                for k in 0..n {
                    if self.dist[i][j] > self.dist[i][k] + self.dist[k][j] + 1e-9 {
                        return Err(Error::InvalidPath("triangle inequality violated".into()));
                    }
                }
            }
        }
        Ok(())
    }
}
