use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{NavGraph, NodeId};
use crate::error::{Error, Result};

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    node: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on (dist, node).
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra over any adjacency function.
pub(crate) fn dijkstra<'a, F>(n: usize, source: NodeId, neighbors: F) -> (Vec<f64>, Vec<Option<NodeId>>)
where
    F: Fn(NodeId) -> &'a [(NodeId, f64)],
{
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry { dist: 0.0, node: source });
    while let Some(Entry { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in neighbors(u) {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = Some(u);
                heap.push(Entry { dist: nd, node: v });
            }
        }
    }
    (dist, pred)
}

/// Minimum-length path from `a` to `b` and its length in meters.
pub fn shortest_path(graph: &NavGraph, a: NodeId, b: NodeId) -> Result<(Vec<NodeId>, f64)> {
    graph.check_node(a)?;
    graph.check_node(b)?;
    if a == b {
        return Ok((vec![a], 0.0));
    }
    let (dist, pred) = dijkstra(graph.node_count(), a, |u| graph.neighbors(u));
    if !dist[b].is_finite() {
        return Err(Error::Unreachable(a, b));
    }
    let mut path = vec![b];
    let mut cur = b;
    while let Some(p) = pred[cur] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    Ok((path, dist[b]))
}

/// All-pairs shortest distances and hop counts along the chosen shortest paths.
#[derive(Clone, Debug)]
pub struct DistanceTable {
    n: usize,
    dist: Vec<f64>,
    pred: Vec<Option<NodeId>>,
}

impl DistanceTable {
    pub fn new(graph: &NavGraph) -> Self {
        let n = graph.node_count();
        let mut dist = Vec::with_capacity(n * n);
        let mut pred = Vec::with_capacity(n * n);
        for s in 0..n {
            let (d, p) = dijkstra(n, s, |u| graph.neighbors(u));
            dist.extend(d);
            pred.extend(p);
        }
        Self { n, dist, pred }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.dist[a * self.n + b]
    }

    pub fn try_distance(&self, a: NodeId, b: NodeId) -> Result<f64> {
        if a >= self.n {
            return Err(Error::UnknownNode(a));
        }
        if b >= self.n {
            return Err(Error::UnknownNode(b));
        }
        let d = self.distance(a, b);
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Unreachable(a, b))
        }
    }

    pub fn path(&self, a: NodeId, b: NodeId) -> Vec<NodeId> {
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            match self.pred[a * self.n + cur] {
                Some(p) => {
                    path.push(p);
                    cur = p;
                }
                None => break,
            }
        }
        path.reverse();
        path
    }

    pub fn hops(&self, a: NodeId, b: NodeId) -> usize {
        self.path(a, b).len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::super::{NavGraph, WorldConfig};
    use super::*;

    fn line() -> NavGraph {
        let cfg = WorldConfig { node_count: 3, ..WorldConfig::default() };
        NavGraph::from_parts(
            0,
            0,
            cfg,
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![0, 1, 2],
            vec![vec![0.0]; 3],
            &[(0, 1, 1.0), (1, 2, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn identity_and_line() {
        let g = line();
        assert_eq!(shortest_path(&g, 1, 1).unwrap(), (vec![1], 0.0));
        assert_eq!(shortest_path(&g, 0, 2).unwrap(), (vec![0, 1, 2], 2.0));
        assert_eq!(shortest_path(&g, 2, 0).unwrap().1, 2.0);
    }

    #[test]
    fn unknown_node_is_an_error() {
        assert!(matches!(shortest_path(&line(), 0, 9), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn disconnected_is_an_error() {
        let cfg = WorldConfig { node_count: 3, ..WorldConfig::default() };
        let g = NavGraph::from_parts(
            0,
            0,
            cfg,
            vec![[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]],
            vec![0, 1, 2],
            vec![vec![0.0]; 3],
            &[(0, 1, 1.0)],
        )
        .unwrap();
        assert!(matches!(shortest_path(&g, 0, 2), Err(Error::Unreachable(0, 2))));
    }

    #[test]
    fn table_agrees_with_single_source() {
        let g = super::super::generate_world(&WorldConfig::default(), 0, 4).unwrap();
        let t = DistanceTable::new(&g);
        for a in g.nodes() {
            for b in g.nodes() {
                let (p, d) = shortest_path(&g, a, b).unwrap();
                assert_eq!(t.distance(a, b), d);
                assert_eq!(t.path(a, b), p);
            }
        }
    }
}
