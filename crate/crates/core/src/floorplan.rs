//! Location graphs: the floor plan over all locations and the four-view
//! graph inside one location, plus seen/unseen splits.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use petgraph::algo::{connected_components, dijkstra};
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};

use crate::error::{GlnError, Result};
use crate::numerics::Matrix;

pub type LocationId = usize;

/// Neighbor lists of a small undirected graph, optionally with self-loops.
///
/// Each undirected edge appears in both endpoint lists, i.e. as two directed
/// edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
    self_loops: bool,
}

impl Topology {
    pub fn from_edges(n: usize, edges: &[(usize, usize)], self_loops: bool) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        if self_loops {
            for (i, nbrs) in neighbors.iter_mut().enumerate() {
                nbrs.push(i);
            }
        }
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nbrs in &mut neighbors {
            nbrs.sort_unstable();
        }
        Topology {
            neighbors,
            self_loops,
        }
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// `|N(i)|`, counting the self-loop when enabled.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i < self.node_count() && self.neighbors[i].binary_search(&j).is_ok()
    }

    /// The normalization constant `√(|N(i)|·|N(j)|)` of edge `(i, j)`.
    pub fn gcn_norm(&self, i: usize, j: usize) -> Result<f64> {
        if !self.is_edge(i, j) {
            return Err(GlnError::Parameter(format!("({i}, {j}) is not an edge")));
        }
        Ok(((self.degree(i) * self.degree(j)) as f64).sqrt())
    }

    /// Dense `Â` with `Â_ij = 1/gcn_norm(i, j)` on edges and 0 elsewhere.
    pub fn normalized_adjacency(&self) -> Matrix {
        let n = self.node_count();
        let mut a = Matrix::zeros(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                a[(i, j)] = 1.0 / ((self.degree(i) * self.degree(j)) as f64).sqrt();
            }
        }
        a
    }
}

/// The four camera directions of one sample, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Front = 0,
    Behind = 1,
    Right = 2,
    Left = 3,
}

impl View {
    pub const ALL: [View; 4] = [View::Front, View::Behind, View::Right, View::Left];
}

pub const VIEW_COUNT: usize = 4;

/// The quadrilateral graph over the four views: edges 1–2, 2–3, 3–4, 4–1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewGraph {
    pub self_loops: bool,
}

impl ViewGraph {
    pub const EDGES: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];

    pub fn new(self_loops: bool) -> Self {
        ViewGraph { self_loops }
    }

    pub fn topology(&self) -> Topology {
        Topology::from_edges(VIEW_COUNT, &Self::EDGES, self.self_loops)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// Shortest path along plan edges, each weighted by its Euclidean length.
    Geodesic,
}

/// Locations with metric coordinates and undirected adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorPlan {
    coords: Vec<[f64; 2]>,
    edges: Vec<(LocationId, LocationId)>,
}

impl FloorPlan {
    /// Validates and builds a plan over dense ids `0..coords.len()`.
    pub fn new(coords: Vec<[f64; 2]>, edges: Vec<(LocationId, LocationId)>) -> Result<Self> {
        let k = coords.len();
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GlnError::Data("non-finite coordinate".into()));
        }
        let mut seen = HashSet::new();
        for &(a, b) in &edges {
            for id in [a, b] {
                if id >= k {
                    return Err(GlnError::Data(format!("edge ({a}, {b}) references unknown id {id}")));
                }
            }
            if a == b {
                return Err(GlnError::Data(format!("self-edge on location {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(GlnError::Data(format!("duplicate edge ({a}, {b})")));
            }
        }
        let plan = FloorPlan { coords, edges };
        if k > 0 && !plan.is_connected() {
            warn!("floor plan with {k} locations is not connected");
        }
        Ok(plan)
    }

    pub fn location_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, id: LocationId) -> Result<[f64; 2]> {
        self.coords.get(id).copied().ok_or(GlnError::Index {
            what: "location",
            index: id,
            len: self.coords.len(),
        })
    }

    pub fn edges(&self) -> &[(LocationId, LocationId)] {
        &self.edges
    }

    pub fn topology(&self, self_loops: bool) -> Topology {
        Topology::from_edges(self.location_count(), &self.edges, self_loops)
    }

    fn graph(&self) -> UnGraph<(), f64> {
        let mut g = UnGraph::with_capacity(self.coords.len(), self.edges.len());
        for _ in &self.coords {
            g.add_node(());
        }
        for &(a, b) in &self.edges {
            g.add_edge(NodeIndex::new(a), NodeIndex::new(b), euclid(self.coords[a], self.coords[b]));
        }
        g
    }

    pub fn is_connected(&self) -> bool {
        connected_components(&self.graph()) <= 1
    }

    /// Localization error in meters between a predicted and an actual location.
    pub fn error_distance(&self, predicted: LocationId, actual: LocationId) -> Result<f64> {
        Ok(euclid(self.coord(predicted)?, self.coord(actual)?))
    }

    pub fn distance(&self, predicted: LocationId, actual: LocationId, metric: DistanceMetric) -> Result<f64> {
        match metric {
            DistanceMetric::Euclidean => self.error_distance(predicted, actual),
            DistanceMetric::Geodesic => {
                self.coord(predicted)?;
                self.coord(actual)?;
                let g = self.graph();
                let costs = dijkstra(&g, NodeIndex::new(actual), Some(NodeIndex::new(predicted)), |e| {
                    *e.weight()
                });
                Ok(costs
                    .get(&NodeIndex::new(predicted))
                    .copied()
                    .unwrap_or(f64::INFINITY))
            }
        }
    }

    /// Coordinates standardized to zero mean and unit variance per axis, as a `k×2` matrix.
    /// An axis with zero variance is only centered.
    pub fn normalized_coords(&self) -> Matrix {
        let k = self.coords.len();
        let mut out = Matrix::zeros(k, 2);
        if k == 0 {
            return out;
        }
        for axis in 0..2 {
            let mean = self.coords.iter().map(|c| c[axis]).sum::<f64>() / k as f64;
            let var = self.coords.iter().map(|c| (c[axis] - mean).powi(2)).sum::<f64>() / k as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for (i, c) in self.coords.iter().enumerate() {
                out[(i, axis)] = (c[axis] - mean) / scale;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("floorplan v1 {} {}\n", self.coords.len(), self.edges.len());
        for (i, c) in self.coords.iter().enumerate() {
            let _ = writeln!(s, "node {i} {} {}", c[0], c[1]);
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "edge {a} {b}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlnError::io(path, e))
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Original file ids of a loaded plan, indexed by dense id.
pub type IdMap = Vec<u64>;

/// Original id → dense id.
pub fn dense_lookup(ids: &IdMap) -> HashMap<u64, LocationId> {
    ids.iter().enumerate().map(|(dense, &raw)| (raw, dense)).collect()
}

pub fn load_floorplan(path: &Path) -> Result<(FloorPlan, IdMap)> {
    let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
    parse_floorplan(&text, &path.display().to_string())
}

/// Parses the line-oriented plan format. Sparse ids are remapped to
/// `0..k` in ascending order of the original id.
pub fn parse_floorplan(text: &str, source: &str) -> Result<(FloorPlan, IdMap)> {
    let perr = |line: usize, msg: String| GlnError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut header: Option<(usize, usize)> = None;
    let mut nodes: Vec<(u64, [f64; 2], usize)> = Vec::new();
    let mut raw_edges: Vec<(u64, u64, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<&str> {
            fields
                .get(i)
                .copied()
                .ok_or_else(|| perr(lineno, format!("missing field {i} in `{line}`")))
        };
        match fields[0] {
            "floorplan" => {
                if header.is_some() {
                    return Err(perr(lineno, "duplicate header".into()));
                }
                if num(1)? != "v1" || fields.len() != 4 {
                    return Err(perr(lineno, "expected `floorplan v1 <k> <num_edges>`".into()));
                }
                let k = parse_num(num(2)?, lineno, &perr)?;
                let e = parse_num(num(3)?, lineno, &perr)?;
                header = Some((k, e));
            }
            "node" if header.is_some() => {
                if fields.len() != 4 {
                    return Err(perr(lineno, "expected `node <id> <x> <y>`".into()));
                }
                let id: u64 = parse_num(num(1)?, lineno, &perr)?;
                let x: f64 = parse_num(num(2)?, lineno, &perr)?;
                let y: f64 = parse_num(num(3)?, lineno, &perr)?;
                nodes.push((id, [x, y], lineno));
            }
            "edge" if header.is_some() => {
                if fields.len() != 3 {
                    return Err(perr(lineno, "expected `edge <id_a> <id_b>`".into()));
                }
                let a: u64 = parse_num(num(1)?, lineno, &perr)?;
                let b: u64 = parse_num(num(2)?, lineno, &perr)?;
                raw_edges.push((a, b, lineno));
            }
            "node" | "edge" => return Err(perr(lineno, "record before header".into())),
            other => return Err(perr(lineno, format!("unknown record `{other}`"))),
        }
    }

    let (k, e) = header.ok_or_else(|| perr(1, "missing `floorplan v1` header".into()))?;
    if nodes.len() != k {
        return Err(perr(0, format!("header declares {k} nodes, found {}", nodes.len())));
    }
    if raw_edges.len() != e {
        return Err(perr(0, format!("header declares {e} edges, found {}", raw_edges.len())));
    }

    let mut ids: IdMap = nodes.iter().map(|n| n.0).collect();
    ids.sort_unstable();
    let mut dense: HashMap<u64, usize> = HashMap::with_capacity(k);
    for (i, &id) in ids.iter().enumerate() {
        if dense.insert(id, i).is_some() {
            let line = nodes.iter().filter(|n| n.0 == id).nth(1).map_or(0, |n| n.2);
            return Err(perr(line, format!("duplicate node id {id}")));
        }
    }
    let mut coords = vec![[0.0; 2]; k];
    for (id, c, _) in &nodes {
        coords[dense[id]] = *c;
    }
    let mut edges = Vec::with_capacity(e);
    let mut seen = HashSet::new();
    for (a, b, line) in raw_edges {
        let da = *dense
            .get(&a)
            .ok_or_else(|| perr(line, format!("edge references unknown id {a}")))?;
        let db = *dense
            .get(&b)
            .ok_or_else(|| perr(line, format!("edge references unknown id {b}")))?;
        if da == db {
            return Err(perr(line, format!("self-edge on id {a}")));
        }
        if !seen.insert((da.min(db), da.max(db))) {
            return Err(perr(line, format!("duplicate edge ({a}, {b})")));
        }
        edges.push((da, db));
    }
    Ok((FloorPlan::new(coords, edges)?, ids))
}

fn parse_num<T: std::str::FromStr>(
    s: &str,
    line: usize,
    perr: &impl Fn(usize, String) -> GlnError,
) -> Result<T> {
    s.parse()
        .map_err(|_| perr(line, format!("cannot parse `{s}` as a number")))
}

/// Seen/unseen partition of the plan's locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    is_seen: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlternationRule {
    /// Parity of BFS depth from the lowest id of each component.
    #[default]
    BfsDepth,
    /// Parity of the location id.
    IndexParity,
}

impl Split {
    pub fn from_flags(is_seen: Vec<bool>) -> Self {
        Split { is_seen }
    }

    pub fn location_count(&self) -> usize {
        self.is_seen.len()
    }

    pub fn is_seen(&self, id: LocationId) -> bool {
        self.is_seen.get(id).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.is_seen
    }

    pub fn seen(&self) -> Vec<LocationId> {
        (0..self.is_seen.len()).filter(|&i| self.is_seen[i]).collect()
    }

    pub fn unseen(&self) -> Vec<LocationId> {
        (0..self.is_seen.len()).filter(|&i| !self.is_seen[i]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, &seen) in self.is_seen.iter().enumerate() {
            let _ = writeln!(s, "{} {i}", if seen { "seen" } else { "unseen" });
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlnError::io(path, e))
    }

    pub fn load(path: &Path, k: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), k)
    }

    /// Parses `seen <id>` / `unseen <id>` lines; every id in `0..k` must appear once.
    pub fn parse(text: &str, source: &str, k: usize) -> Result<Self> {
        Self::parse_with(text, source, k, |id| (id < k as u64).then_some(id as usize))
    }

    /// Like [`Split::load`], with ids written as the plan file's original ids.
    pub fn load_mapped(path: &Path, ids: &IdMap) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        Self::parse_mapped(&text, &path.display().to_string(), ids)
    }

    pub fn parse_mapped(text: &str, source: &str, ids: &IdMap) -> Result<Self> {
        let dense = dense_lookup(ids);
        Self::parse_with(text, source, ids.len(), |raw| dense.get(&raw).copied())
    }

    /// Text form with original plan ids.
    pub fn to_text_mapped(&self, ids: &IdMap) -> String {
        let mut s = String::new();
        for (i, &seen) in self.is_seen.iter().enumerate() {
            let _ = writeln!(s, "{} {}", if seen { "seen" } else { "unseen" }, ids[i]);
        }
        s
    }

    fn parse_with(text: &str, source: &str, k: usize, to_dense: impl Fn(u64) -> Option<usize>) -> Result<Self> {
        let perr = |line: usize, msg: String| GlnError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut flags: Vec<Option<bool>> = vec![None; k];
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(perr(idx + 1, format!("expected `seen|unseen <id>`, got `{line}`")));
            }
            let seen = match fields[0] {
                "seen" => true,
                "unseen" => false,
                other => return Err(perr(idx + 1, format!("unknown tag `{other}`"))),
            };
            let raw: u64 = parse_num(fields[1], idx + 1, &perr)?;
            let id = to_dense(raw).ok_or_else(|| perr(idx + 1, format!("unknown location {raw}")))?;
            let slot = &mut flags[id];
            if slot.replace(seen).is_some() {
                return Err(perr(idx + 1, format!("location {id} listed twice")));
            }
        }
        let missing: Vec<usize> = (0..k).filter(|&i| flags[i].is_none()).collect();
        if !missing.is_empty() {
            return Err(perr(0, format!("locations without assignment: {missing:?}")));
        }
        Ok(Split {
            is_seen: flags.into_iter().map(Option::unwrap).collect(),
        })
    }
}

/// Assigns seen and unseen classes one every other across the plan.
///
/// With [`AlternationRule::BfsDepth`], each component is traversed
/// breadth-first from its lowest id; even depth is seen, odd depth unseen.
/// On odd cycles the depth at first visit decides.
pub fn alternating_split(plan: &FloorPlan, rule: AlternationRule) -> Split {
    let k = plan.location_count();
    match rule {
        AlternationRule::IndexParity => Split {
            is_seen: (0..k).map(|i| i % 2 == 0).collect(),
        },
        AlternationRule::BfsDepth => {
            let topo = plan.topology(false);
            let mut depth: Vec<Option<usize>> = vec![None; k];
            let mut queue = VecDeque::new();
            for root in 0..k {
                if depth[root].is_some() {
                    continue;
                }
                depth[root] = Some(0);
                queue.push_back(root);
                while let Some(u) = queue.pop_front() {
                    let du = depth[u].unwrap_or(0);
                    for &v in &topo.neighbors()[u] {
                        if depth[v].is_none() {
                            depth[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
            }
            Split {
                is_seen: depth.into_iter().map(|d| d.unwrap_or(0) % 2 == 0).collect(),
            }
        }
    }
}
