//! Encode–process–decode message-passing network.
//!
//! Node, edge, and global features are embedded by three-layer MLPs; each of
//! the L processor layers computes per-edge messages, sum-aggregates them at
//! the destination vertex, and applies residual node and global updates; a
//! decoder MLP reads per-vertex outputs off the final node embeddings. The
//! forward pass is generic over [`Ctx`], so inference and gradient recording
//! share one implementation.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::tape::{Ctx, Eval, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::stream_rng;

/// Width of the geometric edge feature vector:
/// relative position (3), distance (1), unit direction (3), cross-edge flag (1).
pub const EDGE_FEATURE_DIM: usize = 8;

/// Named parameter tensors, deterministically ordered.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamSet(pub BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.0.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.0.values().map(|t| t.data().len()).sum()
    }

    /// Zero every tensor (testing aid: a zero network must output zeros).
    pub fn zeroed(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        )
    }

    /// Add Gaussian noise to every entry. Gradient checks need this: freshly
    /// initialised biases are zero, which parks some ReLU pre-activations
    /// exactly on their kink, where one-sided derivatives differ and finite
    /// differences cannot agree with any single subgradient.
    pub fn jitter(&mut self, std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v += normal.sample(rng);
            }
        }
    }
}

/// Shape of one GNN instance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GnnConfig {
    pub node_in: usize,
    pub global_in: usize,
    pub hidden: usize,
    /// Message-passing rounds.
    pub layers: usize,
    pub node_out: usize,
}

/// Network weights plus their shape description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GnnParams {
    pub cfg: GnnConfig,
    pub set: ParamSet,
}

fn mlp_init(set: &mut ParamSet, prefix: &str, dims: [usize; 4], rng: &mut ChaCha20Rng) {
    let mut d_in = dims[0];
    for (i, &d_out) in dims[1..].iter().enumerate() {
        set.insert(format!("{prefix}.w{i}"), Tensor::randn_he(d_in, d_out, d_in, rng));
        set.insert(format!("{prefix}.b{i}"), Tensor::zeros(1, d_out));
        d_in = d_out;
    }
}

/// Three fully-connected layers with ReLU between them (none after the last).
fn mlp_forward<C: Ctx>(ctx: &mut C, set: &ParamSet, prefix: &str, x: &C::H) -> C::H {
    let mut h = x.clone();
    for i in 0..3 {
        let w = ctx.param(&format!("{prefix}.w{i}"), set.get(&format!("{prefix}.w{i}")));
        let b = ctx.param(&format!("{prefix}.b{i}"), set.get(&format!("{prefix}.b{i}")));
        h = ctx.matmul(&h, &w);
        h = ctx.add_bias_row(&h, &b);
        if i < 2 {
            h = ctx.relu(&h);
        }
    }
    h
}

impl GnnParams {
    /// Deterministic He-initialized weights.
    pub fn init(cfg: GnnConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("GNN needs at least one processor layer".into()));
        }
        if cfg.hidden == 0 || cfg.node_in == 0 || cfg.node_out == 0 {
            return Err(Error::Config("GNN dimensions must be positive".into()));
        }
        let mut rng = stream_rng(seed, "gnn-init", 0);
        let h = cfg.hidden;
        let mut set = ParamSet::default();
        mlp_init(&mut set, "enc_node", [cfg.node_in, h, h, h], &mut rng);
        mlp_init(&mut set, "enc_edge", [EDGE_FEATURE_DIM, h, h, h], &mut rng);
        mlp_init(&mut set, "enc_glob", [cfg.global_in, h, h, h], &mut rng);
        for l in 0..cfg.layers {
            mlp_init(&mut set, &format!("msg{l}"), [4 * h, h, h, h], &mut rng);
            mlp_init(&mut set, &format!("node{l}"), [3 * h, h, h, h], &mut rng);
            mlp_init(&mut set, &format!("glob{l}"), [2 * h, h, h, h], &mut rng);
        }
        mlp_init(&mut set, "dec", [h, h, h, cfg.node_out], &mut rng);
        Ok(Self { cfg, set })
    }
}

/// Geometric edge features of a graph as an E x 8 tensor.
pub fn edge_feature_tensor(graph: &Graph) -> Tensor {
    let rows: Vec<Vec<f64>> = graph
        .edges
        .iter()
        .map(|e| {
            vec![
                e.rel_pos.x,
                e.rel_pos.y,
                e.rel_pos.z,
                e.distance,
                e.unit_dir.x,
                e.unit_dir.y,
                e.unit_dir.z,
                if e.is_cross { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    if rows.is_empty() {
        Tensor::zeros(0, EDGE_FEATURE_DIM)
    } else {
        Tensor::from_rows(&rows)
    }
}

/// Handles to the embeddings a forward pass produces.
pub struct GnnOutput<H> {
    /// Decoded per-vertex outputs, N x node_out.
    pub node_decoded: H,
    /// Final node embeddings, N x hidden.
    pub node_hidden: H,
    /// Final global embedding, 1 x hidden.
    pub global_hidden: H,
}

/// Run encode–process–decode under any execution context.
///
/// `node_inputs` is N x node_in, `global_inputs` is 1 x global_in; edge
/// features come from the graph's current geometry.
pub fn gnn_forward<C: Ctx>(
    ctx: &mut C,
    params: &GnnParams,
    graph: &Graph,
    node_inputs: &Tensor,
    global_inputs: &Tensor,
) -> Result<GnnOutput<C::H>> {
    let n = graph.n_vertices();
    let cfg = &params.cfg;
    if node_inputs.rows() != n || node_inputs.cols() != cfg.node_in {
        return Err(Error::Dimension(format!(
            "node inputs {}x{} do not match {n} vertices x {} features",
            node_inputs.rows(),
            node_inputs.cols(),
            cfg.node_in
        )));
    }
    if global_inputs.rows() != 1 || global_inputs.cols() != cfg.global_in {
        return Err(Error::Dimension(format!(
            "global inputs {}x{} do not match 1x{}",
            global_inputs.rows(),
            global_inputs.cols(),
            cfg.global_in
        )));
    }
    if !node_inputs.is_finite() || !global_inputs.is_finite() {
        return Err(Error::Numeric("non-finite network inputs".into()));
    }

    let src_idx: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
    let dst_idx: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
    let n_edges = graph.edges.len();

    let node_in = ctx.input(node_inputs.clone());
    let edge_in = ctx.input(edge_feature_tensor(graph));
    let glob_in = ctx.input(global_inputs.clone());

    let mut node_h = mlp_forward(ctx, &params.set, "enc_node", &node_in);
    let mut edge_h = mlp_forward(ctx, &params.set, "enc_edge", &edge_in);
    let mut glob_h = mlp_forward(ctx, &params.set, "enc_glob", &glob_in);

    for l in 0..cfg.layers {
        // Messages over edges, then residual edge update.
        let src_h = ctx.gather_rows(&node_h, &src_idx);
        let dst_h = ctx.gather_rows(&node_h, &dst_idx);
        let glob_e = ctx.repeat_row(&glob_h, n_edges);
        let msg_in = ctx.concat_cols(&[src_h, dst_h, edge_h.clone(), glob_e]);
        let msg = mlp_forward(ctx, &params.set, &format!("msg{l}"), &msg_in);
        edge_h = ctx.add(&edge_h, &msg);

        // Sum incoming messages at each destination, residual node update.
        let agg = ctx.scatter_add_rows(&edge_h, &dst_idx, n);
        let glob_n = ctx.repeat_row(&glob_h, n);
        let node_upd_in = ctx.concat_cols(&[node_h.clone(), agg, glob_n]);
        let node_upd = mlp_forward(ctx, &params.set, &format!("node{l}"), &node_upd_in);
        node_h = ctx.add(&node_h, &node_upd);

        // Residual global update from mean-pooled node state.
        let pooled = ctx.mean_rows(&node_h);
        let glob_upd_in = ctx.concat_cols(&[glob_h.clone(), pooled]);
        let glob_upd = mlp_forward(ctx, &params.set, &format!("glob{l}"), &glob_upd_in);
        glob_h = ctx.add(&glob_h, &glob_upd);
    }

    let node_decoded = mlp_forward(ctx, &params.set, "dec", &node_h);
    let out_val = ctx.value(&node_decoded);
    if !out_val.is_finite() {
        return Err(Error::Numeric("non-finite network activations".into()));
    }
    Ok(GnnOutput { node_decoded, node_hidden: node_h, global_hidden: glob_h })
}

/// Inference-only forward returning plain tensors.
pub fn gnn_infer(
    params: &GnnParams,
    graph: &Graph,
    node_inputs: &Tensor,
    global_inputs: &Tensor,
) -> Result<GnnOutput<Tensor>> {
    gnn_forward(&mut Eval, params, graph, node_inputs, global_inputs)
}

/// Max relative error between tape gradients and central finite differences
/// of the weighted squared-error loss on one graph. Diagnostic used by the
/// gradient-correctness tests.
///
/// A coordinate whose ±h perturbation pushes some ReLU pre-activation across
/// zero makes the central difference average two different slopes; such
/// coordinates are re-estimated with progressively smaller steps, which
/// converges to the local derivative the tape reports.
pub fn gradient_check(
    params: &GnnParams,
    graph: &Graph,
    node_inputs: &Tensor,
    global_inputs: &Tensor,
    target: &Tensor,
    row_weights: &[f64],
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = gnn_forward(&mut tape, params, graph, node_inputs, global_inputs)?;
    let loss = tape.weighted_sq_err(&out.node_decoded, target, row_weights);
    let grads = tape.backward(loss)?;

    let loss_of = |p: &GnnParams| -> Result<f64> {
        let mut ev = Eval;
        let out = gnn_forward(&mut ev, p, graph, node_inputs, global_inputs)?;
        Ok(ev.weighted_sq_err(&out.node_decoded, target, row_weights).scalar())
    };

    let rel_err = |fd: f64, ad: f64| (fd - ad).abs() / (1.0 + fd.abs().max(ad.abs()));
    let mut max_rel = 0.0f64;
    for (name, grad) in &grads {
        for i in 0..grad.data().len() {
            let ad = grad.data()[i];
            let mut step = h;
            let mut rel = f64::INFINITY;
            for _ in 0..3 {
                let mut plus = params.clone();
                plus.set.get_mut(name).data_mut()[i] += step;
                let mut minus = params.clone();
                minus.set.get_mut(name).data_mut()[i] -= step;
                let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * step);
                rel = rel.min(rel_err(fd, ad));
                if rel < 1e-4 {
                    break;
                }
                step /= 32.0; // probable kink straddle: shrink and retry
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphParams, ResolutionVector};
    use crate::sim::{build_world, WorldConfig};

    fn small_world_graph() -> Graph {
        let cfg = WorldConfig {
            branch_depth: 2,
            particles_per_branch: 3,
            anchor_indices: vec![0],
            ..WorldConfig::default()
        };
        let (w, s) = build_world(&cfg).unwrap();
        build_graph(&s, &ResolutionVector::full(w.n_segments), &GraphParams::default(), w.cfg.dt)
            .unwrap()
    }

    fn node_inputs_for(graph: &Graph, width: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, "test-inputs", 0);
        Tensor::randn_he(graph.n_vertices(), width, width, &mut rng)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let graph = small_world_graph();
        let mut params =
            GnnParams::init(GnnConfig { node_in: 4, global_in: 1, hidden: 8, layers: 2, node_out: 3 }, 1)
                .unwrap();
        params.set = params.set.zeroed();
        let out = gnn_infer(
            &params,
            &graph,
            &node_inputs_for(&graph, 4, 2),
            &Tensor::zeros(1, 1),
        )
        .unwrap();
        let decoded = out.node_decoded;
        assert!(decoded.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eval_matches_tape_forward() {
        let graph = small_world_graph();
        let params =
            GnnParams::init(GnnConfig { node_in: 4, global_in: 1, hidden: 8, layers: 3, node_out: 2 }, 3)
                .unwrap();
        let ni = node_inputs_for(&graph, 4, 5);
        let gi = Tensor::from_vec(1, 1, vec![0.25]);
        let a = gnn_infer(&params, &graph, &ni, &gi).unwrap().node_decoded;
        let mut tape = Tape::new();
        let b_h = gnn_forward(&mut tape, &params, &graph, &ni, &gi).unwrap().node_decoded;
        assert_eq!(a, tape.value(&b_h));
    }

    #[test]
    fn single_vertex_graph_runs_without_messages() {
        // One vertex, zero edges: the forward pass must still work.
        let graph = Graph {
            vertices: vec![crate::graph::Vertex {
                kind: crate::graph::VertexKind::EndEffector,
                segment: None,
                pos: nalgebra::Vector3::zeros(),
                vel_hist: vec![nalgebra::Vector3::zeros(); 2],
                members: vec![],
            }],
            edges: vec![],
            global_feats: vec![0.0],
            n_segments: 0,
            ee_index: 0,
        };
        let params =
            GnnParams::init(GnnConfig { node_in: 3, global_in: 1, hidden: 6, layers: 2, node_out: 2 }, 7)
                .unwrap();
        let out = gnn_infer(
            &params,
            &graph,
            &Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.4]),
            &Tensor::zeros(1, 1),
        )
        .unwrap();
        assert_eq!((out.node_decoded.rows(), out.node_decoded.cols()), (1, 2));
        assert!(out.node_decoded.is_finite());
    }

    #[test]
    fn permutation_equivariance() {
        let graph = small_world_graph();
        let n = graph.n_vertices();
        let params =
            GnnParams::init(GnnConfig { node_in: 4, global_in: 1, hidden: 8, layers: 3, node_out: 2 }, 11)
                .unwrap();
        let ni = node_inputs_for(&graph, 4, 13);
        let gi = Tensor::from_vec(1, 1, vec![0.5]);
        let out = gnn_infer(&params, &graph, &ni, &gi).unwrap();

        // Reverse the vertex order.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inv[old_i] = new_i;
        }
        let mut pgraph = graph.clone();
        pgraph.vertices = perm.iter().map(|&i| graph.vertices[i].clone()).collect();
        for e in &mut pgraph.edges {
            e.src = inv[e.src];
            e.dst = inv[e.dst];
        }
        pgraph.ee_index = inv[graph.ee_index];
        let pni = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| ni.data()[i * 4..(i + 1) * 4].to_vec())
                .collect::<Vec<_>>(),
        );
        let pout = gnn_infer(&params, &pgraph, &pni, &gi).unwrap();

        for new_i in 0..n {
            let old_i = perm[new_i];
            for c in 0..2 {
                let a = out.node_decoded.get(old_i, c);
                let b = pout.node_decoded.get(new_i, c);
                assert!((a - b).abs() < 1e-10, "node {old_i} col {c}: {a} vs {b}");
            }
        }
        for c in 0..8 {
            let a = out.global_hidden.get(0, c);
            let b = pout.global_hidden.get(0, c);
            assert!((a - b).abs() < 1e-10, "global col {c}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let graph = small_world_graph();
        let mut params =
            GnnParams::init(GnnConfig { node_in: 4, global_in: 1, hidden: 4, layers: 2, node_out: 2 }, 17)
                .unwrap();
        params.set.jitter(0.05, &mut stream_rng(29, "grad-jitter", 0));
        let ni = node_inputs_for(&graph, 4, 19);
        let gi = Tensor::from_vec(1, 1, vec![0.3]);
        let mut rng = stream_rng(23, "grad-target", 0);
        let target = Tensor::randn_he(graph.n_vertices(), 2, 2, &mut rng);
        let weights = vec![1.0; graph.n_vertices()];
        let max_rel =
            gradient_check(&params, &graph, &ni, &gi, &target, &weights, 1e-4).unwrap();
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let graph = small_world_graph();
        let params =
            GnnParams::init(GnnConfig { node_in: 4, global_in: 1, hidden: 8, layers: 1, node_out: 3 }, 1)
                .unwrap();
        let bad = Tensor::zeros(graph.n_vertices(), 7);
        assert!(matches!(
            gnn_infer(&params, &graph, &bad, &Tensor::zeros(1, 1)),
            Err(Error::Dimension(_))
        ));
    }
}
