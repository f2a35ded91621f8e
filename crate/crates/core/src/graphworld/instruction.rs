use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{NavGraph, NodeId};
use crate::error::{Error, Result};

/// Every episode starts facing +x.
pub const START_HEADING: f64 = 0.0;

/// STOP, FORWARD, LEFT, RIGHT precede the landmark tokens.
pub const NUM_SPECIAL_TOKENS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Stop,
    Forward,
    Left,
    Right,
    Landmark(usize),
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Stop => 0,
            Token::Forward => 1,
            Token::Left => 2,
            Token::Right => 3,
            Token::Landmark(l) => NUM_SPECIAL_TOKENS + l,
        }
    }

    pub fn from_id(id: usize) -> Token {
        match id {
            0 => Token::Stop,
            1 => Token::Forward,
            2 => Token::Left,
            3 => Token::Right,
            l => Token::Landmark(l - NUM_SPECIAL_TOKENS),
        }
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Bucket a relative turn angle into thirds of the circle.
pub fn direction_token(turn: f64) -> Token {
    let t = wrap_angle(turn);
    if t.abs() < PI / 3.0 {
        Token::Forward
    } else if t > 0.0 {
        Token::Left
    } else {
        Token::Right
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub candidate: NodeId,
    pub view: Vec<f64>,
    /// Relative to the current heading, in `[-π, π)`; positive is to the left.
    pub direction: f64,
    pub distance: f64,
}

/// One observation per neighbor of `current`, sorted by direction then id.
pub fn observations(graph: &NavGraph, current: NodeId, heading: f64) -> Result<Vec<Observation>> {
    graph.check_node(current)?;
    let mut out: Vec<Observation> = graph
        .neighbors(current)
        .iter()
        .map(|&(v, len)| Observation {
            candidate: v,
            view: graph.view_feature(v).to_vec(),
            direction: wrap_angle(graph.heading_between(current, v) - heading),
            distance: len,
        })
        .collect();
    out.sort_by(|a, b| a.direction.total_cmp(&b.direction).then(a.candidate.cmp(&b.candidate)));
    Ok(out)
}

/// Rule-based speaker: per hop a direction token then the destination
/// landmark, finishing with STOP.
pub fn instruction_for_path(graph: &NavGraph, path: &[NodeId]) -> Result<Vec<usize>> {
    let Some(&first) = path.first() else {
        return Err(Error::InvalidPath("empty path".into()));
    };
    graph.check_node(first)?;
    let mut tokens = Vec::with_capacity(2 * path.len() + 1);
    let mut heading = START_HEADING;
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        graph.check_node(b)?;
        if graph.edge_length(a, b).is_none() {
            return Err(Error::InvalidPath(format!("{a} and {b} are not adjacent")));
        }
        let bearing = graph.heading_between(a, b);
        tokens.push(direction_token(bearing - heading).id());
        tokens.push(Token::Landmark(graph.landmark(b)).id());
        heading = bearing;
    }
    tokens.push(Token::Stop.id());
    Ok(tokens)
}
