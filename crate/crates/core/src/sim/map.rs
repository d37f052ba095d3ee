//! Waypoint route graph.
//!
//! Map files are line oriented:
//!
//! ```text
//! node <id> <x> <y>
//! edge <id> <from> <to> <length_m> <limit_kmh> [lanes <n>]
//! light <edge> <offset_m> red
//! goal <name> <node>
//! intersection <node>
//! ```
//!
//! `#` starts a comment. Ids are referenced after they are declared.

use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown {what} {id:?}")]
    UnknownId { line: usize, what: &'static str, id: String },
    #[error("line {line}: duplicate {what} {id:?}")]
    Duplicate { line: usize, what: &'static str, id: String },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub length: f64,
    pub limit_kmh: f64,
    pub lanes: u32,
}

impl Edge {
    pub fn limit_mps(&self) -> f64 {
        self.limit_kmh / 3.6
    }
}

/// A stop line with a fixed red phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficLight {
    pub edge: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Goal {
    pub name: String,
    pub node: usize,
}

/// Turn direction relative to the incoming heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub fn parse(s: &str) -> Option<Turn> {
        match s {
            "left" => Some(Turn::Left),
            "straight" => Some(Turn::Straight),
            "right" => Some(Turn::Right),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Straight => "straight",
            Turn::Right => "right",
        }
    }
}

/// Heading change below this many degrees counts as straight.
const STRAIGHT_TOLERANCE_DEG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RouteMap {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub lights: Vec<TrafficLight>,
    pub goals: Vec<Goal>,
    pub intersections: BTreeSet<usize>,
    node_index: HashMap<String, usize>,
    edge_index: HashMap<String, usize>,
}

impl RouteMap {
    pub fn parse(text: &str) -> Result<RouteMap, MapError> {
        let mut map = RouteMap {
            nodes: Vec::new(),
            edges: Vec::new(),
            lights: Vec::new(),
            goals: Vec::new(),
            intersections: BTreeSet::new(),
            node_index: HashMap::new(),
            edge_index: HashMap::new(),
        };
        let mut intersection_lines = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let syntax = |reason: &str| MapError::Syntax {
                line,
                reason: format!("{reason}: {content:?}"),
            };
            match fields[0] {
                "node" => {
                    let [_, id, x, y] = fields[..] else {
                        return Err(syntax("expected `node <id> <x> <y>`"));
                    };
                    let x = parse_f64(x, line)?;
                    let y = parse_f64(y, line)?;
                    if map.node_index.contains_key(id) {
                        return Err(MapError::Duplicate { line, what: "node", id: id.into() });
                    }
                    map.node_index.insert(id.to_string(), map.nodes.len());
                    map.nodes.push(Node { id: id.to_string(), x, y });
                }
                "edge" => {
                    let (id, from, to, length, limit, lanes) = match fields[..] {
                        [_, id, from, to, length, limit] => (id, from, to, length, limit, 1),
                        [_, id, from, to, length, limit, "lanes", n] => {
                            let n: u32 = n.parse().map_err(|_| syntax("lane count must be a positive integer"))?;
                            (id, from, to, length, limit, n)
                        }
                        _ => return Err(syntax("expected `edge <id> <from> <to> <length_m> <limit_kmh> [lanes <n>]`")),
                    };
                    let from = map.node_ref(from, line)?;
                    let to = map.node_ref(to, line)?;
                    let length = parse_f64(length, line)?;
                    let limit_kmh = parse_f64(limit, line)?;
                    if length <= 0.0 {
                        return Err(MapError::Invalid { line, reason: format!("edge {id} length must be > 0") });
                    }
                    if limit_kmh <= 0.0 {
                        return Err(MapError::Invalid { line, reason: format!("edge {id} speed limit must be > 0") });
                    }
                    if lanes == 0 {
                        return Err(MapError::Invalid { line, reason: format!("edge {id} needs at least one lane") });
                    }
                    if map.edge_index.contains_key(id) {
                        return Err(MapError::Duplicate { line, what: "edge", id: id.into() });
                    }
                    map.edge_index.insert(id.to_string(), map.edges.len());
                    map.edges.push(Edge { id: id.to_string(), from, to, length, limit_kmh, lanes });
                }
                "light" => {
                    let [_, edge, offset, "red"] = fields[..] else {
                        return Err(syntax("expected `light <edge> <offset_m> red`"));
                    };
                    let edge = map.edge_ref(edge, line)?;
                    let offset = parse_f64(offset, line)?;
                    if !(0.0..=map.edges[edge].length).contains(&offset) {
                        return Err(MapError::Invalid {
                            line,
                            reason: format!("stop line offset {offset} outside edge {}", map.edges[edge].id),
                        });
                    }
                    map.lights.push(TrafficLight { edge, offset });
                }
                "goal" => {
                    let [_, name, node] = fields[..] else {
                        return Err(syntax("expected `goal <name> <node>`"));
                    };
                    let node = map.node_ref(node, line)?;
                    if map.goals.iter().any(|g| g.name == name) {
                        return Err(MapError::Duplicate { line, what: "goal", id: name.into() });
                    }
                    map.goals.push(Goal { name: name.to_string(), node });
                }
                "intersection" => {
                    let [_, node] = fields[..] else {
                        return Err(syntax("expected `intersection <node>`"));
                    };
                    let node = map.node_ref(node, line)?;
                    map.intersections.insert(node);
                    intersection_lines.push((line, node));
                }
                other => return Err(syntax(&format!("unknown record {other:?}"))),
            }
        }

        for (line, node) in intersection_lines {
            let outgoing = map.outgoing(node).count();
            if outgoing < 2 {
                return Err(MapError::Invalid {
                    line,
                    reason: format!("intersection {} has {outgoing} outgoing edge(s), needs at least 2", map.nodes[node].id),
                });
            }
        }
        Ok(map)
    }

    fn node_ref(&self, id: &str, line: usize) -> Result<usize, MapError> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| MapError::UnknownId { line, what: "node", id: id.into() })
    }

    fn edge_ref(&self, id: &str, line: usize) -> Result<usize, MapError> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| MapError::UnknownId { line, what: "edge", id: id.into() })
    }

    pub fn edge_by_id(&self, id: &str) -> Option<usize> {
        self.edge_index.get(id).copied()
    }

    pub fn node_by_id(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn goal(&self, name: &str) -> Option<&Goal> {
        self.goals.iter().find(|g| g.name == name)
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().enumerate().filter(move |(_, e)| e.from == node).map(|(i, _)| i)
    }

    pub fn lights_on(&self, edge: usize) -> impl Iterator<Item = (usize, &TrafficLight)> + '_ {
        self.lights.iter().enumerate().filter(move |(_, l)| l.edge == edge)
    }

    fn heading(&self, edge: usize) -> f64 {
        let e = &self.edges[edge];
        let (a, b) = (&self.nodes[e.from], &self.nodes[e.to]);
        (b.y - a.y).atan2(b.x - a.x)
    }

    /// Classifies the turn from `incoming` onto `outgoing` by heading change.
    pub fn turn_between(&self, incoming: usize, outgoing: usize) -> Turn {
        let mut delta = self.heading(outgoing) - self.heading(incoming);
        while delta > std::f64::consts::PI {
            delta -= std::f64::consts::TAU;
        }
        while delta < -std::f64::consts::PI {
            delta += std::f64::consts::TAU;
        }
        if delta.abs().to_degrees() < STRAIGHT_TOLERANCE_DEG {
            Turn::Straight
        } else if delta > 0.0 {
            Turn::Left
        } else {
            Turn::Right
        }
    }

    /// Shortest edge sequence from `from_node` to `goal_node` by length.
    pub fn shortest_path(&self, from_node: usize, goal_node: usize) -> Option<Vec<usize>> {
        if from_node == goal_node {
            return Some(Vec::new());
        }
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
            }
        }

        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut via: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[from_node] = 0.0;
        heap.push(Item(0.0, from_node));
        while let Some(Item(d, node)) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            if node == goal_node {
                break;
            }
            for e in self.outgoing(node) {
                let next = self.edges[e].to;
                let nd = d + self.edges[e].length;
                if nd < dist[next] {
                    dist[next] = nd;
                    via[next] = Some(e);
                    heap.push(Item(nd, next));
                }
            }
        }
        let mut path = Vec::new();
        let mut node = goal_node;
        while node != from_node {
            let e = via[node]?;
            path.push(e);
            node = self.edges[e].from;
        }
        path.reverse();
        Some(path)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, MapError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(MapError::Syntax { line, reason: format!("{s:?} is not a finite number") }),
    }
}
