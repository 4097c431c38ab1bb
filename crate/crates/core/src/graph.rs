//! The two graph views of a multi-block mesh.
//!
//! `PhysGraph` is the connected physical-space graph the network sees:
//! interface nodes appear once, every grid edge is directed both ways, and
//! quad cells carry the incidence needed for cell-based message passing.
//!
//! `CompGraph` is the block-separated computational-space graph the
//! residual engine sees: interface nodes are duplicated per block, a gather
//! map pulls physical node values onto the copies, and a per-node stencil
//! table resolves (i-1, i+1, j-1, j+1) neighbors within the block or across
//! an interface (halo), so interface nodes keep the full three-point stencil.

use crate::mesh::{BcKind, MultiBlockMesh, Side};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    Interior,
    Wall,
    MovingLid,
    Inlet,
    Outlet,
}

impl NodeType {
    pub const COUNT: usize = 5;

    pub fn one_hot_index(self) -> usize {
        match self {
            NodeType::Interior => 0,
            NodeType::Wall => 1,
            NodeType::MovingLid => 2,
            NodeType::Inlet => 3,
            NodeType::Outlet => 4,
        }
    }

    /// Velocity is hard-imposed on these nodes.
    pub fn is_dirichlet(self) -> bool {
        matches!(self, NodeType::Wall | NodeType::MovingLid | NodeType::Inlet)
    }

    /// Momentum/continuity residuals are zero-assigned on every flow
    /// boundary node (outlet included; it carries the pressure residual
    /// instead).
    pub fn is_flow_boundary(self) -> bool {
        !matches!(self, NodeType::Interior)
    }
}

impl From<BcKind> for NodeType {
    fn from(k: BcKind) -> Self {
        match k {
            BcKind::Wall => NodeType::Wall,
            BcKind::MovingLid => NodeType::MovingLid,
            BcKind::Inlet => NodeType::Inlet,
            BcKind::Outlet => NodeType::Outlet,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhysGraph {
    pub n_nodes: usize,
    pub coords: Vec<[f64; 2]>,
    pub node_type: Vec<NodeType>,
    /// Directed edges; both directions of each grid edge, consecutive.
    pub edges: Vec<(usize, usize)>,
    /// Quad cells as node indices in counterclockwise order.
    pub cells: Vec<[usize; 4]>,
    /// Node -> incident cells, in cell-id order.
    pub node_cells: Vec<Vec<usize>>,
    /// Prescribed Dirichlet velocity on wall/lid/inlet nodes.
    pub bc_velocity: Vec<Option<(f64, f64)>>,
    /// Physical node index of the pressure gauge, if any.
    pub pressure_anchor: Option<usize>,
    /// (block, i, j) -> physical node id, row-major per block.
    pub global_ids: Vec<Vec<usize>>,
}

/// Stencil neighbor entry: a resolvable node (in-block or halo) or the
/// physical-boundary sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nbr {
    Node(usize),
    Boundary,
}

impl Nbr {
    pub fn node(self) -> Option<usize> {
        match self {
            Nbr::Node(n) => Some(n),
            Nbr::Boundary => None,
        }
    }
}

/// Direction slots of the stencil table.
pub const IM: usize = 0;
pub const IP: usize = 1;
pub const JM: usize = 2;
pub const JP: usize = 3;

#[derive(Debug, Clone)]
pub struct CompGraph {
    pub n_com: usize,
    /// Gather map: com node k holds the value of phys node index_block[k].
    pub index_block: Vec<usize>,
    /// com node -> (block, i, j).
    pub location: Vec<(usize, usize, usize)>,
    /// Per com node: [i-1, i+1, j-1, j+1] neighbors.
    pub nbr: Vec<[Nbr; 4]>,
    /// phys node -> its com copies (size 1 off interfaces).
    pub dup_groups: Vec<Vec<usize>>,
    /// Directed in-block edge count, summed over blocks (halo edges are in
    /// the stencil table, not here).
    pub n_com_edges: usize,
}

impl CompGraph {
    /// X_com[k] = X_phy[index_block[k]].
    pub fn gather(&self, x_phy: &[f64]) -> Vec<f64> {
        self.index_block.iter().map(|&p| x_phy[p]).collect()
    }

    /// Mean over each physical node's duplicate group.
    pub fn scatter_average(&self, r_com: &[f64]) -> Vec<f64> {
        self.dup_groups
            .iter()
            .map(|g| g.iter().map(|&k| r_com[k]).sum::<f64>() / g.len() as f64)
            .collect()
    }
}

/// Build the deduplicated physical-space graph.
pub fn build_physical_graph(mesh: &MultiBlockMesh) -> PhysGraph {
    let nb = mesh.blocks.len();
    let block_offsets: Vec<usize> = {
        let mut off = vec![0usize; nb + 1];
        for (k, b) in mesh.blocks.iter().enumerate() {
            off[k + 1] = off[k] + b.n_nodes();
        }
        off
    };
    let n_com: usize = block_offsets[nb];

    // Union-find over preliminary (block-concatenated) ids, joined along
    // interface node pairings.
    let mut parent: Vec<usize> = (0..n_com).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for itf in &mesh.interfaces {
        let ba = &mesh.blocks[itf.block_a];
        let bb = &mesh.blocks[itf.block_b];
        let len = itf.side_a.len(ba);
        for k in 0..len {
            let (ia, ja) = itf.side_a.node_ij(ba, k);
            let (ib, jb) = itf.side_b.node_ij(bb, itf.partner_k(len, k));
            let pa = block_offsets[itf.block_a] + ba.idx(ia, ja);
            let pb = block_offsets[itf.block_b] + bb.idx(ib, jb);
            let (ra, rb) = (find(&mut parent, pa), find(&mut parent, pb));
            if ra != rb {
                // keep the smaller preliminary id as representative so the
                // global ordering follows first occurrence in file order
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent[hi] = lo;
            }
        }
    }

    // Compress to contiguous physical ids in first-occurrence order.
    let mut phys_of_prelim = vec![usize::MAX; n_com];
    let mut n_nodes = 0usize;
    for x in 0..n_com {
        let r = find(&mut parent, x);
        if phys_of_prelim[r] == usize::MAX {
            phys_of_prelim[r] = n_nodes;
            n_nodes += 1;
        }
        phys_of_prelim[x] = phys_of_prelim[r];
    }

    let mut global_ids: Vec<Vec<usize>> = Vec::with_capacity(nb);
    for (k, b) in mesh.blocks.iter().enumerate() {
        global_ids.push(
            (0..b.n_nodes())
                .map(|n| phys_of_prelim[block_offsets[k] + n])
                .collect(),
        );
    }

    let mut coords = vec![[0.0f64; 2]; n_nodes];
    for (k, b) in mesh.blocks.iter().enumerate() {
        for j in 0..b.nj {
            for i in 0..b.ni {
                coords[global_ids[k][b.idx(i, j)]] = b.node(i, j);
            }
        }
    }

    // Node types and Dirichlet values from patches. Interface corners that
    // also sit on a flow boundary end up typed by the patch, as required.
    let mut node_type = vec![NodeType::Interior; n_nodes];
    let mut bc_velocity: Vec<Option<(f64, f64)>> = vec![None; n_nodes];
    for p in &mesh.boundaries {
        let b = &mesh.blocks[p.block];
        for k in p.start..p.end {
            let (i, j) = p.side.node_ij(b, k);
            let g = global_ids[p.block][b.idx(i, j)];
            node_type[g] = p.kind.into();
            if NodeType::from(p.kind).is_dirichlet() {
                bc_velocity[g] = Some(p.value.velocity_at(coords[g]));
            }
        }
    }

    // Undirected grid edges in deterministic order, deduplicated across
    // interfaces, then emitted in both directions.
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut edges = Vec::new();
    let mut push = |a: usize, b: usize, edges: &mut Vec<(usize, usize)>| {
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            edges.push((a, b));
            edges.push((b, a));
        }
    };
    for (k, b) in mesh.blocks.iter().enumerate() {
        for j in 0..b.nj {
            for i in 0..b.ni {
                let g = global_ids[k][b.idx(i, j)];
                if i + 1 < b.ni {
                    push(g, global_ids[k][b.idx(i + 1, j)], &mut edges);
                }
                if j + 1 < b.nj {
                    push(g, global_ids[k][b.idx(i, j + 1)], &mut edges);
                }
            }
        }
    }

    let mut cells = Vec::new();
    for (k, b) in mesh.blocks.iter().enumerate() {
        for j in 0..b.nj - 1 {
            for i in 0..b.ni - 1 {
                cells.push([
                    global_ids[k][b.idx(i, j)],
                    global_ids[k][b.idx(i + 1, j)],
                    global_ids[k][b.idx(i + 1, j + 1)],
                    global_ids[k][b.idx(i, j + 1)],
                ]);
            }
        }
    }
    let mut node_cells = vec![Vec::new(); n_nodes];
    for (ci, c) in cells.iter().enumerate() {
        for &n in c {
            node_cells[n].push(ci);
        }
    }

    let pressure_anchor = mesh
        .pressure_anchor
        .map(|(b, i, j)| global_ids[b][mesh.blocks[b].idx(i, j)]);

    PhysGraph {
        n_nodes,
        coords,
        node_type,
        edges,
        cells,
        node_cells,
        bc_velocity,
        pressure_anchor,
        global_ids,
    }
}

/// Separate the blocks: duplicate interface nodes, build the gather map and
/// the halo-completed stencil table.
pub fn to_computational_graph(pg: &PhysGraph, mesh: &MultiBlockMesh) -> CompGraph {
    let nb = mesh.blocks.len();
    let mut block_offsets = vec![0usize; nb + 1];
    for (k, b) in mesh.blocks.iter().enumerate() {
        block_offsets[k + 1] = block_offsets[k] + b.n_nodes();
    }
    let n_com = block_offsets[nb];

    let mut index_block = Vec::with_capacity(n_com);
    let mut location = Vec::with_capacity(n_com);
    for (k, b) in mesh.blocks.iter().enumerate() {
        for j in 0..b.nj {
            for i in 0..b.ni {
                index_block.push(pg.global_ids[k][b.idx(i, j)]);
                location.push((k, i, j));
            }
        }
    }

    // In-block stencil neighbors.
    let com_id = |blk: usize, i: usize, j: usize| block_offsets[blk] + mesh.blocks[blk].idx(i, j);
    let mut nbr = vec![[Nbr::Boundary; 4]; n_com];
    let mut n_com_edges = 0usize;
    for (k, b) in mesh.blocks.iter().enumerate() {
        for j in 0..b.nj {
            for i in 0..b.ni {
                let c = com_id(k, i, j);
                if i > 0 {
                    nbr[c][IM] = Nbr::Node(com_id(k, i - 1, j));
                }
                if i + 1 < b.ni {
                    nbr[c][IP] = Nbr::Node(com_id(k, i + 1, j));
                }
                if j > 0 {
                    nbr[c][JM] = Nbr::Node(com_id(k, i, j - 1));
                }
                if j + 1 < b.nj {
                    nbr[c][JP] = Nbr::Node(com_id(k, i, j + 1));
                }
            }
        }
        n_com_edges += 2 * (b.ni.saturating_sub(1) * b.nj + b.nj.saturating_sub(1) * b.ni);
    }

    // Halos: across each interface, the missing neighbor of a side node is
    // the opposite block's node one step inward from its matched partner.
    let missing_slot = |side: Side| match side {
        Side::IMin => IM,
        Side::IMax => IP,
        Side::JMin => JM,
        Side::JMax => JP,
    };
    for itf in &mesh.interfaces {
        let ba = &mesh.blocks[itf.block_a];
        let bb = &mesh.blocks[itf.block_b];
        let len = itf.side_a.len(ba);
        for k in 0..len {
            let kb = itf.partner_k(len, k);
            let (ia, ja) = itf.side_a.node_ij(ba, k);
            let (ib, jb) = itf.side_b.node_ij(bb, kb);
            let (ha_i, ha_j) = itf.side_b.inward_ij(bb, kb, 1);
            let (hb_i, hb_j) = itf.side_a.inward_ij(ba, k, 1);
            let ca = com_id(itf.block_a, ia, ja);
            let cb = com_id(itf.block_b, ib, jb);
            nbr[ca][missing_slot(itf.side_a)] = Nbr::Node(com_id(itf.block_b, ha_i, ha_j));
            nbr[cb][missing_slot(itf.side_b)] = Nbr::Node(com_id(itf.block_a, hb_i, hb_j));
        }
    }

    let mut dup_groups = vec![Vec::new(); pg.n_nodes];
    for (k, &p) in index_block.iter().enumerate() {
        dup_groups[p].push(k);
    }

    CompGraph {
        n_com,
        index_block,
        location,
        nbr,
        dup_groups,
        n_com_edges,
    }
}

/// Index-space derivative direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Xi,
    Eta,
}

/// Up to three (node, coefficient) taps realizing the nodal first
/// derivative with unit index spacing: central where the stencil is full
/// (halo-completed at interfaces), one-sided second-order at physical
/// boundaries. Unused taps carry coefficient zero.
pub type Taps = [(usize, f64); 3];

/// Build the per-node derivative taps along `dir` for every com node.
pub fn derivative_taps(cg: &CompGraph, dir: Dir) -> Vec<Taps> {
    let (slot_m, slot_p) = match dir {
        Dir::Xi => (IM, IP),
        Dir::Eta => (JM, JP),
    };
    (0..cg.n_com)
        .map(|c| {
            let m = cg.nbr[c][slot_m];
            let p = cg.nbr[c][slot_p];
            match (m, p) {
                (Nbr::Node(m), Nbr::Node(p)) => [(p, 0.5), (m, -0.5), (c, 0.0)],
                (Nbr::Boundary, Nbr::Node(p)) => {
                    let pp = cg.nbr[p][slot_p]
                        .node()
                        .expect("3-point one-sided stencil needs two inward nodes");
                    [(c, -1.5), (p, 2.0), (pp, -0.5)]
                }
                (Nbr::Node(m), Nbr::Boundary) => {
                    let mm = cg.nbr[m][slot_m]
                        .node()
                        .expect("3-point one-sided stencil needs two inward nodes");
                    [(c, 1.5), (m, -2.0), (mm, 0.5)]
                }
                (Nbr::Boundary, Nbr::Boundary) => {
                    unreachable!("blocks are at least 3x3, a node cannot miss both neighbors")
                }
            }
        })
        .collect()
}

/// Apply derivative taps to per-node scalar values.
pub fn apply_taps(taps: &[Taps], values: &[f64]) -> Vec<f64> {
    taps.iter()
        .map(|t| t.iter().map(|&(k, w)| w * values[k]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cavity, generate_channel, generate_cylinder_channel, split_single_block, MeshResolution};

    #[test]
    fn single_block_counts() {
        let m = generate_cavity(3, 1.0).unwrap();
        let pg = build_physical_graph(&m);
        assert_eq!(pg.n_nodes, 9);
        assert_eq!(pg.edges.len(), 24);
        assert_eq!(pg.cells.len(), 4);
        let cg = to_computational_graph(&pg, &m);
        assert_eq!(cg.n_com, 9);
        assert!(cg.dup_groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn cavity_cell_count() {
        let m = generate_cavity(55, 1.0).unwrap();
        let pg = build_physical_graph(&m);
        assert_eq!(pg.cells.len(), 54 * 54);
    }

    #[test]
    fn two_block_split_shares_column() {
        let m = split_single_block(&generate_cavity(3, 1.0).unwrap(), 1).unwrap_err();
        // 3x3 cannot be split; use a 5x5
        let _ = m;
        let m = split_single_block(&generate_cavity(5, 1.0).unwrap(), 2).unwrap();
        let pg = build_physical_graph(&m);
        assert_eq!(pg.n_nodes, 25);
        let cg = to_computational_graph(&pg, &m);
        assert_eq!(cg.n_com, 30);
        assert_eq!(cg.dup_groups.iter().filter(|g| g.len() == 2).count(), 5);
    }

    #[test]
    fn split_square_counts_match_spec() {
        // two 3x3 blocks sharing a column: 15 physical, 18 computational
        let m = generate_channel(5, 3, 1).unwrap();
        let pg = build_physical_graph(&m);
        assert_eq!(pg.n_nodes, 15);
        let cg = to_computational_graph(&pg, &m);
        assert_eq!(cg.n_com, 18);
        assert_eq!(cg.dup_groups.iter().filter(|g| g.len() == 2).count(), 3);
    }

    #[test]
    fn gather_then_scatter_average_is_identity() {
        let m = generate_channel(9, 5, 1).unwrap();
        let pg = build_physical_graph(&m);
        let cg = to_computational_graph(&pg, &m);
        let x: Vec<f64> = (0..pg.n_nodes).map(|k| k as f64 * 0.37 - 3.0).collect();
        let xc = cg.gather(&x);
        for g in &cg.dup_groups {
            let v0 = xc[g[0]];
            assert!(g.iter().all(|&k| xc[k] == v0));
        }
        let back = cg.scatter_average(&xc);
        assert_eq!(back, x);
    }

    #[test]
    fn scatter_average_means_groups() {
        let m = generate_channel(5, 3, 1).unwrap();
        let pg = build_physical_graph(&m);
        let cg = to_computational_graph(&pg, &m);
        let mut r = vec![0.0; cg.n_com];
        let g = cg
            .dup_groups
            .iter()
            .find(|g| g.len() == 2)
            .unwrap();
        r[g[0]] = 1.0;
        r[g[1]] = 3.0;
        let phys = cg.scatter_average(&r);
        let p = cg.index_block[g[0]];
        assert_eq!(phys[p], 2.0);
    }

    #[test]
    fn com_counts_exceed_phys_iff_multiblock() {
        for (m, multi) in [
            (generate_cavity(7, 1.0).unwrap(), false),
            (generate_channel(9, 5, 2).unwrap(), true),
            (generate_cylinder_channel((0.2, 0.2), 0.1, MeshResolution::Coarse).unwrap(), true),
        ] {
            let pg = build_physical_graph(&m);
            let cg = to_computational_graph(&pg, &m);
            assert_eq!(cg.n_com, m.n_computational_nodes());
            if multi {
                assert!(cg.n_com > pg.n_nodes);
            } else {
                assert_eq!(cg.n_com, pg.n_nodes);
            }
        }
    }

    #[test]
    fn interior_and_interface_nodes_have_full_stencils() {
        let m = generate_cylinder_channel((0.2, 0.2), 0.1, MeshResolution::Coarse).unwrap();
        let pg = build_physical_graph(&m);
        let cg = to_computational_graph(&pg, &m);
        for k in 0..cg.n_com {
            let p = cg.index_block[k];
            if pg.node_type[p] == NodeType::Interior {
                assert!(
                    cg.nbr[k].iter().all(|n| matches!(n, Nbr::Node(_))),
                    "interior com node {k} has a boundary sentinel"
                );
            }
        }
    }

    #[test]
    fn cylinder_frame_corner_duplicates() {
        // the frame corner is shared by two O-grid blocks and three ring
        // blocks: duplicate group of size 5
        let m = generate_cylinder_channel((0.2, 0.2), 0.1, MeshResolution::Coarse).unwrap();
        let pg = build_physical_graph(&m);
        let cg = to_computational_graph(&pg, &m);
        let max_group = cg.dup_groups.iter().map(|g| g.len()).max().unwrap();
        assert_eq!(max_group, 5);
    }
}
