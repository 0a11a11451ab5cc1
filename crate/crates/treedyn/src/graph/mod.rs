//! Multi-resolution graph encoding of segmented states.
//!
//! A [`ResolutionVector`] picks, per segment, either a farthest-point-sampled
//! subset of particles (high resolution) or a single aggregate vertex at the
//! segment centroid (low resolution). Vertices are wired by symmetrized
//! k-nearest-neighbor edges, with k grown until the graph is one connected
//! component. Queries are encoded as two full-resolution halves (start and
//! goal) joined by correspondence edges.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::State;

/// Encoding parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphParams {
    /// Vertices kept per high-resolution segment (capped by segment size).
    pub n_high: usize,
    /// Initial k for the k-NN edge pass.
    pub knn: usize,
    /// Per-vertex velocity history length (per-step displacements).
    pub vel_history: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { n_high: 4, knn: 4, vel_history: 2 }
    }
}

/// Per-segment resolution selector; entries live in [0, 1] and are binarized
/// at 0.5 wherever a discrete choice is needed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolutionVector(pub Vec<f64>);

impl ResolutionVector {
    pub fn full(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn minimal(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn random_binary<R: Rng>(k: usize, rng: &mut R) -> Self {
        Self((0..k).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Threshold every entry at 0.5.
    pub fn binarized(&self) -> Self {
        Self(self.0.iter().map(|&w| if w >= 0.5 { 1.0 } else { 0.0 }).collect())
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Number of high-resolution entries after binarization.
    pub fn count_high(&self) -> usize {
        self.0.iter().filter(|&&w| w >= 0.5).count()
    }

    /// Compact bit string, segment 0 first, e.g. `"10110010"`.
    pub fn bits(&self) -> String {
        self.0.iter().map(|&w| if w >= 0.5 { '1' } else { '0' }).collect()
    }

    pub fn from_bits(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                _ => Err(Error::Config(format!("invalid resolution bit '{c}'"))),
            })
            .collect::<Result<Vec<f64>>>()
            .map(Self)
    }
}

/// What a graph vertex stands for.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum VertexKind {
    /// A selected particle (index into the state's particle arrays).
    Particle(usize),
    /// A whole low-resolution segment, placed at its centroid.
    Aggregate,
    EndEffector,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vertex {
    pub kind: VertexKind,
    /// Segment id; `None` for the end-effector.
    pub segment: Option<usize>,
    pub pos: Vector3<f64>,
    /// Per-step displacements, most recent first; uniform length per graph.
    pub vel_hist: Vec<Vector3<f64>>,
    /// Particle indices this vertex represents: the nearest-cluster for a
    /// high-resolution vertex, the whole segment for an aggregate, empty for
    /// the end-effector. Within one graph the member sets partition 0..P.
    pub members: Vec<usize>,
}

impl Vertex {
    pub fn is_aggregate(&self) -> bool {
        matches!(self.kind, VertexKind::Aggregate)
    }

    pub fn is_end_effector(&self) -> bool {
        matches!(self.kind, VertexKind::EndEffector)
    }
}

/// Directed edge with geometric features; `rel_pos` points from `src` to
/// `dst`, `build_len` is the distance when connectivity was last built.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel_pos: Vector3<f64>,
    pub distance: f64,
    pub unit_dir: Vector3<f64>,
    pub is_cross: bool,
    pub build_len: f64,
}

fn make_edge(src: usize, dst: usize, from: &Vector3<f64>, to: &Vector3<f64>, is_cross: bool) -> Edge {
    let rel = to - from;
    let d = rel.norm();
    let unit = if d > 1e-12 { rel / d } else { Vector3::zeros() };
    Edge { src, dst, rel_pos: rel, distance: d, unit_dir: unit, is_cross, build_len: d }
}

/// A multi-resolution planning graph.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Graph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub global_feats: Vec<f64>,
    pub n_segments: usize,
    /// Index of the end-effector vertex.
    pub ee_index: usize,
}

impl Graph {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Refresh geometric edge features from current vertex positions,
    /// keeping `build_len` untouched.
    pub fn refresh_edge_features(&mut self) {
        for e in &mut self.edges {
            let rel = self.vertices[e.dst].pos - self.vertices[e.src].pos;
            let d = rel.norm();
            e.rel_pos = rel;
            e.distance = d;
            e.unit_dir = if d > 1e-12 { rel / d } else { Vector3::zeros() };
        }
    }

    /// True when some edge has stretched beyond twice its build length.
    pub fn needs_rewire(&self) -> bool {
        self.edges.iter().any(|e| e.distance > 2.0 * e.build_len)
    }

    /// Rebuild k-NN connectivity from current vertex positions.
    pub fn rewire(&mut self, params: &GraphParams) {
        let positions: Vec<Vector3<f64>> = self.vertices.iter().map(|v| v.pos).collect();
        let pairs = knn_connected_pairs(&positions, params.knn);
        self.edges = pairs
            .into_iter()
            .map(|(a, b)| make_edge(a, b, &positions[a], &positions[b], false))
            .collect();
    }
}

/// Union-find component count over `n` nodes.
fn component_count(n: usize, pairs: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut comps = n;
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            comps -= 1;
        }
    }
    comps
}

/// Symmetrized k-NN pairs (both directions), growing k until the graph is a
/// single component. Ties break on particle order for determinism.
fn knn_connected_pairs(positions: &[Vector3<f64>], k0: usize) -> Vec<(usize, usize)> {
    let n = positions.len();
    if n <= 1 {
        return Vec::new();
    }
    let mut k = k0.max(1);
    loop {
        let mut undirected: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            let mut by_dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((positions[i] - positions[j]).norm(), j))
                .collect();
            by_dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in by_dist.iter().take(k) {
                undirected.push((i.min(j), i.max(j)));
            }
        }
        undirected.sort_unstable();
        undirected.dedup();
        if component_count(n, &undirected) == 1 || k >= n - 1 {
            let mut directed = Vec::with_capacity(undirected.len() * 2);
            for (a, b) in undirected {
                directed.push((a, b));
                directed.push((b, a));
            }
            return directed;
        }
        k += 1;
    }
}

/// Farthest-point sampling over `points`, starting from `start`, keeping `n`
/// indices (all of them if `n >= points.len()`). Ties break to the lowest
/// index; the result is sorted ascending.
fn farthest_point_indices(points: &[Vector3<f64>], n: usize, start: usize) -> Vec<usize> {
    let total = points.len();
    if n >= total {
        return (0..total).collect();
    }
    let mut selected = vec![start];
    let mut min_dist: Vec<f64> = points.iter().map(|p| (p - points[start]).norm()).collect();
    while selected.len() < n {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, &d) in min_dist.iter().enumerate() {
            if !selected.contains(&i) && d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, md) in min_dist.iter_mut().enumerate() {
            let d = (points[i] - points[best]).norm();
            if d < *md {
                *md = d;
            }
        }
    }
    selected.sort_unstable();
    selected
}

/// Per-particle per-step displacement history (most recent first) from a
/// window of consecutive states ending at the current one. Missing history is
/// padded by replicating the oldest available entry; a single state falls
/// back to `velocity * dt_like` — here velocities are m/s, so the caller
/// passes the step scale.
fn particle_disp_history(states: &[State], vel_history: usize, dt: f64) -> Vec<Vec<Vector3<f64>>> {
    let cur = states.last().expect("nonempty state window");
    let p = cur.n_particles();
    let mut hist = vec![Vec::with_capacity(vel_history); p];
    for h in 0..vel_history {
        // Displacement from states[len-2-h] to states[len-1-h].
        if states.len() >= h + 2 {
            let a = &states[states.len() - 2 - h];
            let b = &states[states.len() - 1 - h];
            for i in 0..p {
                hist[i].push(b.positions[i] - a.positions[i]);
            }
        } else {
            for (i, hh) in hist.iter_mut().enumerate() {
                let pad = if let Some(&last) = hh.last() { last } else { cur.velocities[i] * dt };
                hh.push(pad);
            }
        }
    }
    hist
}

fn segment_partition(state: &State) -> Result<Vec<Vec<usize>>> {
    let k = state.n_segments();
    if k == 0 {
        return Err(Error::Construction("state has no segments".into()));
    }
    let mut segs = vec![Vec::new(); k];
    for (i, &s) in state.segment_of.iter().enumerate() {
        segs[s].push(i);
    }
    if let Some(empty) = segs.iter().position(|s| s.is_empty()) {
        return Err(Error::Construction(format!("segment {empty} has no particles")));
    }
    Ok(segs)
}

/// The particle indices each segment contributes at full resolution,
/// FPS-selected from the lowest particle index. Shared by [`build_graph`] and
/// [`build_query_graph`] so both halves of a query pick identical indices.
fn full_res_selection(state: &State, params: &GraphParams) -> Result<Vec<Vec<usize>>> {
    let segs = segment_partition(state)?;
    Ok(segs
        .iter()
        .map(|seg| {
            let pts: Vec<Vector3<f64>> = seg.iter().map(|&i| state.positions[i]).collect();
            farthest_point_indices(&pts, params.n_high, 0)
                .into_iter()
                .map(|local| seg[local])
                .collect()
        })
        .collect())
}

/// Assign every particle of `seg` to its nearest selected vertex (ties to
/// the earliest selected index); returns member lists parallel to `chosen`.
fn cluster_members(state: &State, seg: &[usize], chosen: &[usize]) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); chosen.len()];
    for &p in seg {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, &c) in chosen.iter().enumerate() {
            let d = (state.positions[p] - state.positions[c]).norm();
            if d < best_d - 1e-15 {
                best_d = d;
                best = ci;
            }
        }
        members[best].push(p);
    }
    members
}

fn omega_checked(state: &State, omega: &ResolutionVector) -> Result<ResolutionVector> {
    let k = state.n_segments();
    if omega.len() != k {
        return Err(Error::Dimension(format!(
            "resolution vector length {} does not match segment count {k}",
            omega.len()
        )));
    }
    Ok(omega.binarized())
}

/// State window variant of [`build_graph`]: the trailing `states` window
/// supplies true velocity history (the last element is the current state).
pub fn build_graph_with_history(
    states: &[State],
    omega: &ResolutionVector,
    params: &GraphParams,
    dt: f64,
) -> Result<Graph> {
    let state = states.last().ok_or_else(|| Error::Construction("empty state window".into()))?;
    let omega = omega_checked(state, &omega.clone())?;
    let segs = segment_partition(state)?;
    let disp_hist = particle_disp_history(states, params.vel_history, dt);
    let selection = full_res_selection(state, params)?;

    let mut vertices: Vec<Vertex> = Vec::new();
    for (k, seg) in segs.iter().enumerate() {
        if omega.0[k] >= 0.5 {
            let chosen = &selection[k];
            let members = cluster_members(state, seg, chosen);
            for (ci, &c) in chosen.iter().enumerate() {
                vertices.push(Vertex {
                    kind: VertexKind::Particle(c),
                    segment: Some(k),
                    pos: state.positions[c],
                    vel_hist: disp_hist[c].clone(),
                    members: members[ci].clone(),
                });
            }
        } else {
            let inv = 1.0 / seg.len() as f64;
            let pos = seg.iter().map(|&i| state.positions[i]).sum::<Vector3<f64>>() * inv;
            let vel_hist = (0..params.vel_history)
                .map(|h| seg.iter().map(|&i| disp_hist[i][h]).sum::<Vector3<f64>>() * inv)
                .collect();
            vertices.push(Vertex {
                kind: VertexKind::Aggregate,
                segment: Some(k),
                pos,
                vel_hist,
                members: seg.clone(),
            });
        }
    }
    let ee_index = vertices.len();
    vertices.push(Vertex {
        kind: VertexKind::EndEffector,
        segment: None,
        pos: state.ee_pos,
        vel_hist: state.ee_vel_hist.iter().take(params.vel_history).copied().collect(),
        members: Vec::new(),
    });

    let positions: Vec<Vector3<f64>> = vertices.iter().map(|v| v.pos).collect();
    let edges = knn_connected_pairs(&positions, params.knn)
        .into_iter()
        .map(|(a, b)| make_edge(a, b, &positions[a], &positions[b], false))
        .collect();

    Ok(Graph { vertices, edges, global_feats: vec![0.0], n_segments: segs.len(), ee_index })
}

/// Encode `state` under `omega` (entries binarized at 0.5). Velocity history
/// deeper than the state's instantaneous velocity is padded by replication.
pub fn build_graph(
    state: &State,
    omega: &ResolutionVector,
    params: &GraphParams,
    dt: f64,
) -> Result<Graph> {
    build_graph_with_history(std::slice::from_ref(state), omega, params, dt)
}

/// Start and goal states encoded at full resolution and joined by
/// correspondence edges.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryGraph {
    /// Both halves' vertices and their within-half edges. Vertices
    /// `0..half_count` are the start half; the goal half mirrors them in the
    /// same order at `half_count..2*half_count`.
    pub base: Graph,
    /// Correspondence edges between matching vertices, both directions.
    pub cross_edges: Vec<Edge>,
    pub half_count: usize,
}

impl QueryGraph {
    pub fn is_goal_half(&self, vertex: usize) -> bool {
        vertex >= self.half_count
    }

    /// Base graph with cross edges appended — the form consumed by the GNN.
    pub fn full_graph(&self) -> Graph {
        let mut g = self.base.clone();
        g.edges.extend(self.cross_edges.iter().cloned());
        g
    }
}

/// Build the start–goal query encoding. Downsampling is keyed off the start
/// state so both halves select identical particle indices.
pub fn build_query_graph(s1: &State, s_goal: &State, params: &GraphParams, dt: f64) -> Result<QueryGraph> {
    if s1.n_particles() != s_goal.n_particles() {
        return Err(Error::Query(format!(
            "start/goal particle counts differ: {} vs {}",
            s1.n_particles(),
            s_goal.n_particles()
        )));
    }
    if s1.segment_of != s_goal.segment_of {
        return Err(Error::Query("start/goal segment labels differ".into()));
    }
    let k = s1.n_segments();
    let full = ResolutionVector::full(k);
    let start_half = build_graph(s1, &full, params, dt)?;
    let n_half = start_half.n_vertices();

    // Goal half: same vertex identities (selection keyed off s1), goal-state
    // geometry.
    let disp_hist = particle_disp_history(std::slice::from_ref(s_goal), params.vel_history, dt);
    let mut goal_vertices: Vec<Vertex> = Vec::with_capacity(n_half);
    for v in &start_half.vertices {
        match v.kind {
            VertexKind::Particle(p) => goal_vertices.push(Vertex {
                kind: VertexKind::Particle(p),
                segment: v.segment,
                pos: s_goal.positions[p],
                vel_hist: disp_hist[p].clone(),
                members: v.members.clone(),
            }),
            VertexKind::Aggregate => unreachable!("full resolution has no aggregates"),
            VertexKind::EndEffector => goal_vertices.push(Vertex {
                kind: VertexKind::EndEffector,
                segment: None,
                pos: s_goal.ee_pos,
                vel_hist: s_goal.ee_vel_hist.iter().take(params.vel_history).copied().collect(),
                members: Vec::new(),
            }),
        }
    }
    let goal_positions: Vec<Vector3<f64>> = goal_vertices.iter().map(|v| v.pos).collect();
    let goal_edges: Vec<Edge> = knn_connected_pairs(&goal_positions, params.knn)
        .into_iter()
        .map(|(a, b)| make_edge(a + n_half, b + n_half, &goal_positions[a], &goal_positions[b], false))
        .collect();

    let mut vertices = start_half.vertices.clone();
    vertices.append(&mut goal_vertices);
    let mut edges = start_half.edges.clone();
    edges.extend(goal_edges);

    let mut cross_edges = Vec::with_capacity(2 * n_half);
    for i in 0..n_half {
        let a = &vertices[i].pos.clone();
        let b = &vertices[i + n_half].pos.clone();
        cross_edges.push(make_edge(i, i + n_half, a, b, true));
        cross_edges.push(make_edge(i + n_half, i, b, a, true));
    }
    let base = Graph {
        vertices,
        edges,
        global_feats: vec![0.0],
        n_segments: k,
        ee_index: start_half.ee_index,
    };
    Ok(QueryGraph { base, cross_edges, half_count: n_half })
}

/// One entry of the pointset view of a graph.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PointEntry {
    pub pos: Vector3<f64>,
    /// The selected particle for a high-resolution vertex, `None` for an
    /// aggregate.
    pub particle: Option<usize>,
    /// All particles the vertex represents.
    pub members: Vec<usize>,
    pub is_aggregate: bool,
}

/// Object vertices (end-effector excluded) as positions plus the particle
/// sets they stand for.
pub fn graph_to_pointset(graph: &Graph) -> Vec<PointEntry> {
    graph
        .vertices
        .iter()
        .filter(|v| !v.is_end_effector())
        .map(|v| PointEntry {
            pos: v.pos,
            particle: match v.kind {
                VertexKind::Particle(p) => Some(p),
                _ => None,
            },
            members: v.members.clone(),
            is_aggregate: v.is_aggregate(),
        })
        .collect()
}

/// Number of connected components of a graph's edge set (diagnostic; every
/// constructed graph must report 1).
pub fn graph_components(graph: &Graph) -> usize {
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.src, e.dst)).collect();
    component_count(graph.n_vertices(), &pairs)
}
