//! Encoder-processor-decoder graph network over the physical graph.
//!
//! Node features are [u, v, p, one-hot node type]; edge features are the
//! relative position, its norm, and the field difference across the edge.
//! Each of the K processor blocks updates edge latents from their
//! endpoints, averages them onto the quad cells, averages cells back onto
//! nodes, and applies a node update, with additive skip connections.
//! Encoder and processor MLP outputs are layernormed, the decoder is not.
//! All aggregation orders are canonical (edge list order, cell-id order),
//! so the forward pass is bitwise deterministic and node-permutation
//! equivariant.

use crate::diffengine::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeType, PhysGraph};
use crate::residual::{column, FlowField};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::rc::Rc;

pub const NODE_FEATURES: usize = 3 + NodeType::COUNT;
pub const EDGE_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GNConfig {
    pub latent: usize,
    pub k_blocks: usize,
}

impl Default for GNConfig {
    fn default() -> Self {
        Self { latent: 64, k_blocks: 12 }
    }
}

/// Two-layer MLP with SiLU, optionally followed by a layer norm.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln: Option<(Array2<f64>, Array2<f64>)>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, inp: usize, hidden: usize, out: usize, ln: bool) -> Self {
        let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let bound = (1.0 / rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        Self {
            w1: uniform(rng, inp, hidden),
            b1: Array2::zeros((1, hidden)),
            w2: uniform(rng, hidden, out),
            b2: Array2::zeros((1, out)),
            ln: ln.then(|| (Array2::ones((1, out)), Array2::zeros((1, out)))),
        }
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.w1, &self.b1, &self.w2, &self.b2];
        if let Some((g, b)) = &self.ln {
            v.push(g);
            v.push(b);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        if let Some((g, b)) = &mut self.ln {
            v.push(g);
            v.push(b);
        }
        v
    }
}

/// All network parameters; tensor order is fixed by `tensors()` and shared
/// by the optimizer state and the checkpoint format.
#[derive(Debug, Clone)]
pub struct GNParams {
    pub config: GNConfig,
    pub enc_node: Mlp,
    pub enc_edge: Mlp,
    pub proc: Vec<(Mlp, Mlp)>,
    pub dec: Mlp,
}

impl GNParams {
    pub fn init(config: GNConfig, seed: u64) -> Self {
        let d = config.latent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            config,
            enc_node: Mlp::init(&mut rng, NODE_FEATURES, d, d, true),
            enc_edge: Mlp::init(&mut rng, EDGE_FEATURES, d, d, true),
            proc: (0..config.k_blocks)
                .map(|_| {
                    (
                        Mlp::init(&mut rng, 3 * d, d, d, true),
                        Mlp::init(&mut rng, 2 * d, d, d, true),
                    )
                })
                .collect(),
            dec: Mlp::init(&mut rng, d, d, 3, false),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = self.enc_node.tensors();
        v.extend(self.enc_edge.tensors());
        for (e, n) in &self.proc {
            v.extend(e.tensors());
            v.extend(n.tensors());
        }
        v.extend(self.dec.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.enc_node.tensors_mut();
        v.extend(self.enc_edge.tensors_mut());
        for (e, n) in &mut self.proc {
            v.extend(e.tensors_mut());
            v.extend(n.tensors_mut());
        }
        v.extend(self.dec.tensors_mut());
        v
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln: Option<(Var, Var)>,
}

pub struct GNParamVars {
    pub enc_node: MlpVars,
    pub enc_edge: MlpVars,
    pub proc: Vec<(MlpVars, MlpVars)>,
    pub dec: MlpVars,
}

impl GNParamVars {
    /// Register every tensor as a differentiable leaf on the tape.
    pub fn leaves(t: &mut Tape, p: &GNParams) -> Self {
        let mlp = |t: &mut Tape, m: &Mlp| MlpVars {
            w1: t.leaf(m.w1.clone()),
            b1: t.leaf(m.b1.clone()),
            w2: t.leaf(m.w2.clone()),
            b2: t.leaf(m.b2.clone()),
            ln: m.ln.as_ref().map(|(g, b)| (t.leaf(g.clone()), t.leaf(b.clone()))),
        };
        Self {
            enc_node: mlp(t, &p.enc_node),
            enc_edge: mlp(t, &p.enc_edge),
            proc: p.proc.iter().map(|(e, n)| (mlp(t, e), mlp(t, n))).collect(),
            dec: mlp(t, &p.dec),
        }
    }

    /// Tape vars in the same order as `GNParams::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mlp = |m: &MlpVars| {
            let mut v = vec![m.w1, m.b1, m.w2, m.b2];
            if let Some((g, b)) = m.ln {
                v.push(g);
                v.push(b);
            }
            v
        };
        let mut v = mlp(&self.enc_node);
        v.extend(mlp(&self.enc_edge));
        for (e, n) in &self.proc {
            v.extend(mlp(e));
            v.extend(mlp(n));
        }
        v.extend(mlp(&self.dec));
        v
    }
}

fn apply_mlp(t: &mut Tape, m: &MlpVars, x: Var) -> Result<Var> {
    let h = t.matmul(x, m.w1)?;
    let h = t.add_row(h, m.b1)?;
    let h = t.silu(h);
    let y = t.matmul(h, m.w2)?;
    let y = t.add_row(y, m.b2)?;
    match m.ln {
        Some((g, b)) => t.layernorm(y, g, b),
        None => Ok(y),
    }
}

/// Constant graph structure shared by every forward pass on one mesh.
pub struct GraphPrep {
    pub n_nodes: usize,
    pub n_edges: usize,
    onehot: Rc<Array2<f64>>,
    edge_geo: Rc<Array2<f64>>,
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    cell_edge: [Rc<Vec<usize>>; 4],
    inc_cell: Rc<Vec<usize>>,
    inc_node: Rc<Vec<usize>>,
    inv_nc: Rc<Array2<f64>>,
}

impl GraphPrep {
    pub fn new(pg: &PhysGraph) -> Result<Self> {
        let n = pg.n_nodes;
        let mut onehot = Array2::zeros((n, NodeType::COUNT));
        for r in 0..n {
            onehot[[r, pg.node_type[r].one_hot_index()]] = 1.0;
        }

        let ne = pg.edges.len();
        let mut edge_geo = Array2::zeros((ne, 3));
        let mut src = Vec::with_capacity(ne);
        let mut dst = Vec::with_capacity(ne);
        let mut edge_id = HashMap::with_capacity(ne);
        for (k, &(r, s)) in pg.edges.iter().enumerate() {
            let dx = pg.coords[r][0] - pg.coords[s][0];
            let dy = pg.coords[r][1] - pg.coords[s][1];
            edge_geo[[k, 0]] = dx;
            edge_geo[[k, 1]] = dy;
            edge_geo[[k, 2]] = dx.hypot(dy);
            src.push(r);
            dst.push(s);
            edge_id.insert((r, s), k);
        }

        let mut cell_edge: [Vec<usize>; 4] = Default::default();
        for c in &pg.cells {
            for k in 0..4 {
                let pair = (c[k], c[(k + 1) % 4]);
                let id = *edge_id
                    .get(&pair)
                    .ok_or_else(|| Error::Topology(format!("cell edge {pair:?} not in edge list")))?;
                cell_edge[k].push(id);
            }
        }

        let mut inc_cell = Vec::with_capacity(4 * pg.cells.len());
        let mut inc_node = Vec::with_capacity(4 * pg.cells.len());
        for (ci, c) in pg.cells.iter().enumerate() {
            for &r in c {
                inc_cell.push(ci);
                inc_node.push(r);
            }
        }
        let inv_nc = column(
            &pg.node_cells
                .iter()
                .map(|cs| if cs.is_empty() { 0.0 } else { 1.0 / cs.len() as f64 })
                .collect::<Vec<_>>(),
        );

        Ok(Self {
            n_nodes: n,
            n_edges: ne,
            onehot: Rc::new(onehot),
            edge_geo: Rc::new(edge_geo),
            src: Rc::new(src),
            dst: Rc::new(dst),
            cell_edge: cell_edge.map(Rc::new),
            inc_cell: Rc::new(inc_cell),
            inc_node: Rc::new(inc_node),
            inv_nc: Rc::new(inv_nc),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.inc_cell.len() / 4
    }

    /// Stack graphs into one block-diagonal graph for minibatching.
    pub fn disjoint_union(parts: &[&GraphPrep]) -> Result<GraphPrep> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("disjoint_union of nothing".into()));
        }
        let vcat = |f: &dyn Fn(&GraphPrep) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            Rc::new(ndarray::concatenate(ndarray::Axis(0), &views).expect("row concat"))
        };
        let shift = |f: &dyn Fn(&GraphPrep) -> &Vec<usize>, off: &dyn Fn(&GraphPrep) -> usize| {
            let mut out = Vec::new();
            let mut at = 0;
            for p in parts {
                out.extend(f(p).iter().map(|&k| k + at));
                at += off(p);
            }
            Rc::new(out)
        };
        Ok(GraphPrep {
            n_nodes: parts.iter().map(|p| p.n_nodes).sum(),
            n_edges: parts.iter().map(|p| p.n_edges).sum(),
            onehot: vcat(&|p| &p.onehot),
            edge_geo: vcat(&|p| &p.edge_geo),
            src: shift(&|p| &p.src, &|p| p.n_nodes),
            dst: shift(&|p| &p.dst, &|p| p.n_nodes),
            cell_edge: std::array::from_fn(|k| {
                shift(&|p| &p.cell_edge[k], &|p| p.n_edges)
            }),
            inc_cell: shift(&|p| &p.inc_cell, &|p| p.n_cells()),
            inc_node: shift(&|p| &p.inc_node, &|p| p.n_nodes),
            inv_nc: vcat(&|p| &p.inv_nc),
        })
    }
}

/// Encode (n, 3) field columns into node and edge latents.
pub fn encode(t: &mut Tape, prep: &GraphPrep, pv: &GNParamVars, f: Var) -> Result<(Var, Var)> {
    let onehot = t.constant((*prep.onehot).clone());
    let x_in = t.concat_cols(&[f, onehot])?;
    let x = apply_mlp(t, &pv.enc_node, x_in)?;

    let geo = t.constant((*prep.edge_geo).clone());
    let fr = t.gather_rows(f, Rc::clone(&prep.src))?;
    let fs = t.gather_rows(f, Rc::clone(&prep.dst))?;
    let df = t.sub(fr, fs)?;
    let e_in = t.concat_cols(&[geo, df])?;
    let e = apply_mlp(t, &pv.enc_edge, e_in)?;
    Ok((x, e))
}

/// Average edge latents onto cells (quarter weights), then cells onto
/// nodes (1/N_c weights).
fn aggregate(t: &mut Tape, prep: &GraphPrep, e: Var) -> Result<Var> {
    let mut cell = t.gather_rows(e, Rc::clone(&prep.cell_edge[0]))?;
    for k in 1..4 {
        let g = t.gather_rows(e, Rc::clone(&prep.cell_edge[k]))?;
        cell = t.add(cell, g)?;
    }
    let cell = t.scale(cell, 0.25);
    let gathered = t.gather_rows(cell, Rc::clone(&prep.inc_cell))?;
    let summed = t.scatter_add_rows(gathered, Rc::clone(&prep.inc_node), prep.n_nodes)?;
    t.mul_const(summed, Rc::clone(&prep.inv_nc))
}

/// One processor block with additive skip connections.
pub fn process_block(
    t: &mut Tape,
    prep: &GraphPrep,
    block: &(MlpVars, MlpVars),
    x: Var,
    e: Var,
) -> Result<(Var, Var)> {
    let xr = t.gather_rows(x, Rc::clone(&prep.src))?;
    let xs = t.gather_rows(x, Rc::clone(&prep.dst))?;
    let e_cat = t.concat_cols(&[e, xr, xs])?;
    let e_upd = apply_mlp(t, &block.0, e_cat)?;
    let e_new = t.add(e_upd, e)?;

    let agg = aggregate(t, prep, e_new)?;
    let x_cat = t.concat_cols(&[x, agg])?;
    let x_upd = apply_mlp(t, &block.1, x_cat)?;
    let x_new = t.add(x_upd, x)?;
    Ok((x_new, e_new))
}

/// Decode node latents to (u, v, p) columns, no layer norm.
pub fn decode(t: &mut Tape, pv: &GNParamVars, x: Var) -> Result<Var> {
    apply_mlp(t, &pv.dec, x)
}

/// Full differentiable forward pass from an (n, 3) field var.
pub fn forward_on_tape(
    t: &mut Tape,
    prep: &GraphPrep,
    pv: &GNParamVars,
    f: Var,
) -> Result<Var> {
    let (mut x, mut e) = encode(t, prep, pv, f)?;
    for block in &pv.proc {
        (x, e) = process_block(t, prep, block, x, e)?;
    }
    decode(t, pv, x)
}

/// Plain inference: run the network on a field and return the prediction.
pub fn forward(pg: &PhysGraph, params: &GNParams, field: &FlowField) -> Result<FlowField> {
    let prep = GraphPrep::new(pg)?;
    let mut t = Tape::new();
    let pv = GNParamVars::leaves(&mut t, params);
    let f = field_var(&mut t, field);
    let out = forward_on_tape(&mut t, &prep, &pv, f)?;
    Ok(field_from_var(&t, out))
}

/// Pack a flow field into a constant (n, 3) tape var.
pub fn field_var(t: &mut Tape, f: &FlowField) -> Var {
    let n = f.len();
    let mut a = Array2::zeros((n, 3));
    for r in 0..n {
        a[[r, 0]] = f.u[r];
        a[[r, 1]] = f.v[r];
        a[[r, 2]] = f.p[r];
    }
    t.constant(a)
}

pub fn field_from_var(t: &Tape, v: Var) -> FlowField {
    let a = t.value(v);
    let n = a.nrows();
    let mut f = FlowField::zeros(n);
    for r in 0..n {
        f.u[r] = a[[r, 0]];
        f.v[r] = a[[r, 1]];
        f.p[r] = a[[r, 2]];
    }
    f
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GCFDMGN\x01";

/// Write parameters: magic, latent, depth, scalar count, then the flat
/// little-endian doubles in tensor order. Round-trips bit-exactly.
pub fn save_checkpoint(params: &GNParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.config.latent as u64).to_le_bytes())?;
    w.write_all(&(params.config.k_blocks as u64).to_le_bytes())?;
    w.write_all(&(params.n_scalars() as u64).to_le_bytes())?;
    for tensor in params.tensors() {
        for &x in tensor.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GNParams> {
    let path = path.as_ref();
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), msg: msg.into() };
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut dyn std::io::Read| -> Result<u64> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let latent = read_u64(&mut r)? as usize;
    let k_blocks = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    if latent == 0 || k_blocks == 0 {
        return Err(bad("degenerate config in header"));
    }
    let mut params = GNParams::init(GNConfig { latent, k_blocks }, 0);
    if params.n_scalars() != count {
        return Err(bad("scalar count does not match config"));
    }
    let mut buf = [0u8; 8];
    for tensor in params.tensors_mut() {
        for x in tensor.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_physical_graph;
    use crate::mesh::generate_cavity;

    fn small_params(d: usize, k: usize, seed: u64) -> GNParams {
        GNParams::init(GNConfig { latent: d, k_blocks: k }, seed)
    }

    fn ramp_field(n: usize) -> FlowField {
        let mut f = FlowField::zeros(n);
        for r in 0..n {
            f.u[r] = 0.1 * r as f64;
            f.v[r] = -0.05 * r as f64;
            f.p[r] = 0.02 * r as f64;
        }
        f
    }

    #[test]
    fn shapes_with_default_config() {
        let mesh = generate_cavity(4, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let prep = GraphPrep::new(&pg).unwrap();
        let params = GNParams::init(GNConfig::default(), 1);
        let mut t = Tape::new();
        let pv = GNParamVars::leaves(&mut t, &params);
        let f = field_var(&mut t, &ramp_field(pg.n_nodes));
        let (x, e) = encode(&mut t, &prep, &pv, f).unwrap();
        assert_eq!(t.value(x).dim(), (16, 64));
        assert_eq!(t.value(e).dim(), (prep.n_edges, 64));
        let (x, e) = process_block(&mut t, &prep, &pv.proc[0], x, e).unwrap();
        assert_eq!(t.value(x).dim(), (16, 64));
        assert_eq!(t.value(e).dim(), (prep.n_edges, 64));
        let out = forward_on_tape(&mut t, &prep, &pv, f).unwrap();
        assert_eq!(t.value(out).dim(), (16, 3));
    }

    #[test]
    fn identical_nodes_get_identical_latents() {
        let mesh = generate_cavity(5, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let prep = GraphPrep::new(&pg).unwrap();
        let params = small_params(8, 1, 2);
        let mut t = Tape::new();
        let pv = GNParamVars::leaves(&mut t, &params);
        let f = field_var(&mut t, &FlowField::zeros(pg.n_nodes));
        let (x, e) = encode(&mut t, &prep, &pv, f).unwrap();
        // two interior nodes with equal (zero) fields and equal type
        let interior: Vec<usize> = (0..pg.n_nodes)
            .filter(|&r| pg.node_type[r] == NodeType::Interior)
            .collect();
        let xv = t.value(x);
        for &r in &interior[1..] {
            assert_eq!(xv.row(interior[0]), xv.row(r));
        }
        // a horizontal and a vertical edge have different latents
        let ev = t.value(e);
        let horiz = pg.edges.iter().position(|&(r, s)| {
            (pg.coords[r][1] - pg.coords[s][1]).abs() < 1e-14
        });
        let vert = pg.edges.iter().position(|&(r, s)| {
            (pg.coords[r][0] - pg.coords[s][0]).abs() < 1e-14
        });
        assert_ne!(ev.row(horiz.unwrap()), ev.row(vert.unwrap()));
    }

    #[test]
    fn cell_incidence_counts() {
        let mesh = generate_cavity(5, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let corner = pg.global_ids[0][0];
        let center = pg.global_ids[0][2 * 5 + 2];
        assert_eq!(pg.node_cells[corner].len(), 1);
        assert_eq!(pg.node_cells[center].len(), 4);
    }

    #[test]
    fn cell_mean_of_equal_edges_is_identity() {
        let mesh = generate_cavity(4, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let prep = GraphPrep::new(&pg).unwrap();
        let mut t = Tape::new();
        let e = t.constant(Array2::from_elem((prep.n_edges, 3), 1.5));
        let agg = aggregate(&mut t, &prep, e).unwrap();
        assert!(t.value(agg).iter().all(|&x| (x - 1.5).abs() <= 1e-14));
    }

    #[test]
    fn decoder_maps_constant_latent_to_constant_rows() {
        let params = small_params(6, 1, 3);
        let mut t = Tape::new();
        let pv = GNParamVars::leaves(&mut t, &params);
        let x = t.constant(Array2::from_elem((4, 6), 0.3));
        let y = decode(&mut t, &pv, x).unwrap();
        let yv = t.value(y);
        assert_eq!(yv.dim(), (4, 3));
        for r in 1..4 {
            assert_eq!(yv.row(0), yv.row(r));
        }
        assert!(yv.row(0).iter().any(|&v| v.abs() > 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mesh = generate_cavity(4, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let params = small_params(8, 2, 5);
        let f = ramp_field(pg.n_nodes);
        let a = forward(&pg, &params, &f).unwrap();
        let b = forward(&pg, &params, &f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_equivariance_is_bitwise() {
        let mesh = generate_cavity(4, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let n = pg.n_nodes;
        let perm: Vec<usize> = (0..n).map(|r| (r * 7 + 3) % n).collect();

        let mut permuted = PhysGraph {
            n_nodes: n,
            coords: vec![[0.0; 2]; n],
            node_type: vec![NodeType::Interior; n],
            edges: pg.edges.iter().map(|&(r, s)| (perm[r], perm[s])).collect(),
            cells: pg.cells.iter().map(|c| c.map(|r| perm[r])).collect(),
            node_cells: vec![Vec::new(); n],
            bc_velocity: vec![None; n],
            pressure_anchor: pg.pressure_anchor.map(|a| perm[a]),
            global_ids: Vec::new(),
        };
        for r in 0..n {
            permuted.coords[perm[r]] = pg.coords[r];
            permuted.node_type[perm[r]] = pg.node_type[r];
            permuted.node_cells[perm[r]] = pg.node_cells[r].clone();
            permuted.bc_velocity[perm[r]] = pg.bc_velocity[r];
        }

        let params = small_params(8, 2, 7);
        let f = ramp_field(n);
        let mut fp = FlowField::zeros(n);
        for r in 0..n {
            fp.u[perm[r]] = f.u[r];
            fp.v[perm[r]] = f.v[r];
            fp.p[perm[r]] = f.p[r];
        }
        let out = forward(&pg, &params, &f).unwrap();
        let out_p = forward(&permuted, &params, &fp).unwrap();
        for r in 0..n {
            assert_eq!(out.u[r].to_bits(), out_p.u[perm[r]].to_bits());
            assert_eq!(out.v[r].to_bits(), out_p.v[perm[r]].to_bits());
            assert_eq!(out.p[r].to_bits(), out_p.p[perm[r]].to_bits());
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        use crate::graph::to_computational_graph;
        use crate::metrics::compute_metrics;
        use crate::residual::{GcAssembly, LossWeights};

        let mesh = generate_cavity(5, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let cg = to_computational_graph(&pg, &mesh);
        let m = compute_metrics(&mesh, &cg).unwrap();
        let asm = GcAssembly::new(&pg, &cg, &m, 100.0).unwrap();
        let prep = GraphPrep::new(&pg).unwrap();
        let params = small_params(4, 1, 11);
        let field = ramp_field(pg.n_nodes);
        let w = LossWeights::default();

        let template = GNParamVars::leaves(&mut Tape::new(), &params);
        let points: Vec<Array2<f64>> = params.tensors().into_iter().cloned().collect();
        let err = crate::diffengine::grad_check(
            |t, vs| {
                // rebuild the param structure over the provided leaves
                let mut it = vs.iter().copied();
                let mlp = |it: &mut dyn Iterator<Item = Var>, has_ln: bool| MlpVars {
                    w1: it.next().unwrap(),
                    b1: it.next().unwrap(),
                    w2: it.next().unwrap(),
                    b2: it.next().unwrap(),
                    ln: has_ln.then(|| (it.next().unwrap(), it.next().unwrap())),
                };
                let pv = GNParamVars {
                    enc_node: mlp(&mut it, true),
                    enc_edge: mlp(&mut it, true),
                    proc: template
                        .proc
                        .iter()
                        .map(|_| (mlp(&mut it, true), mlp(&mut it, true)))
                        .collect(),
                    dec: mlp(&mut it, false),
                };
                let f = field_var(t, &field);
                let out = forward_on_tape(t, &prep, &pv, f)?;
                let u = t.slice_cols(out, 0, 1)?;
                let v = t.slice_cols(out, 1, 2)?;
                let p = t.slice_cols(out, 2, 3)?;
                let r = asm.residuals(t, u, v, p)?;
                asm.loss(t, &r, &w)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "param grad err {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = small_params(8, 3, 13);
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, params.config);
        for (a, b) in back.tensors().iter().zip(params.tensors()) {
            assert_eq!(a.dim(), b.dim());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
        assert!(load_checkpoint(dir.path().join("junk.ckpt")).is_err());
    }
}
