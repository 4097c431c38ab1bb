//! 2D multi-block structured grids with interface and boundary topology.
//!
//! A mesh is a list of logically rectangular blocks joined along interfaces
//! where the matched node sequences coincide in physical space. Blocks are
//! immutable after construction.

mod gen;
mod io;

pub use gen::{
    generate_cavity, generate_channel, generate_curved_block, generate_cylinder_channel,
    split_single_block, MeshResolution, CHANNEL_HEIGHT, CHANNEL_LENGTH,
};
pub use io::{load_mesh, save_mesh};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tolerance for interface node coincidence. Adjacent blocks are assumed to
/// share grid nodes exactly; this absorbs decimal round-trip noise only.
pub const INTERFACE_TOL: f64 = 1e-12;

/// One logically rectangular block of (i,j)-indexed physical coordinates.
/// Storage is row-major with j outer and i inner.
#[derive(Debug, Clone)]
pub struct Block {
    pub ni: usize,
    pub nj: usize,
    coords: Vec<[f64; 2]>,
}

impl Block {
    pub fn new(ni: usize, nj: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ni < 3 || nj < 3 {
            return Err(Error::InvalidArg(format!(
                "block must be at least 3x3, got {ni}x{nj}"
            )));
        }
        if coords.len() != ni * nj {
            return Err(Error::Shape(format!(
                "block {ni}x{nj} needs {} coords, got {}",
                ni * nj,
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidArg("non-finite block coordinate".into()));
        }
        Ok(Self { ni, nj, coords })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.ni && j < self.nj);
        j * self.ni + i
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[self.idx(i, j)]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn n_nodes(&self) -> usize {
        self.ni * self.nj
    }
}

/// One of the four logical sides of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    IMin,
    IMax,
    JMin,
    JMax,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::IMin, Side::IMax, Side::JMin, Side::JMax];

    /// Number of nodes along this side.
    pub fn len(&self, block: &Block) -> usize {
        match self {
            Side::IMin | Side::IMax => block.nj,
            Side::JMin | Side::JMax => block.ni,
        }
    }

    /// (i, j) of the k-th node along the side, in canonical order
    /// (increasing j for i-sides, increasing i for j-sides).
    pub fn node_ij(&self, block: &Block, k: usize) -> (usize, usize) {
        match self {
            Side::IMin => (0, k),
            Side::IMax => (block.ni - 1, k),
            Side::JMin => (k, 0),
            Side::JMax => (k, block.nj - 1),
        }
    }

    /// (i, j) of the node `depth` steps inward from the k-th side node.
    pub fn inward_ij(&self, block: &Block, k: usize, depth: usize) -> (usize, usize) {
        let (i, j) = self.node_ij(block, k);
        match self {
            Side::IMin => (i + depth, j),
            Side::IMax => (i - depth, j),
            Side::JMin => (i, j + depth),
            Side::JMax => (i, j - depth),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Aligned,
    Reversed,
}

/// Full-side pairing between two blocks. The k-th node of side_a matches
/// the k-th (aligned) or last-minus-k-th (reversed) node of side_b.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Interface {
    pub block_a: usize,
    pub side_a: Side,
    pub block_b: usize,
    pub side_b: Side,
    pub orientation: Orientation,
}

impl Interface {
    /// Index into side_b matching index k of side_a.
    pub fn partner_k(&self, len: usize, k: usize) -> usize {
        match self.orientation {
            Orientation::Aligned => k,
            Orientation::Reversed => len - 1 - k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcKind {
    Wall,
    MovingLid,
    Inlet,
    Outlet,
}

/// Prescribed boundary data. Parabolic is the channel inflow profile
/// u(y) = 4 U y (H - y) / H^2 with H the channel height.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum BcValue {
    Constant { u: f64, v: f64 },
    Parabolic { #[serde(rename = "U")] u_max: f64, height: f64 },
}

impl BcValue {
    /// Dirichlet velocity at a boundary node with physical coordinate (x, y).
    pub fn velocity_at(&self, xy: [f64; 2]) -> (f64, f64) {
        match *self {
            BcValue::Constant { u, v } => (u, v),
            BcValue::Parabolic { u_max, height } => {
                let y = xy[1];
                (4.0 * u_max * y * (height - y) / (height * height), 0.0)
            }
        }
    }
}

/// Contiguous run of boundary nodes on one block side: side indices
/// [start, end) in the side's canonical order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryPatch {
    pub block: usize,
    pub side: Side,
    pub start: usize,
    pub end: usize,
    pub kind: BcKind,
    pub value: BcValue,
}

#[derive(Debug, Clone)]
pub struct MultiBlockMesh {
    pub blocks: Vec<Block>,
    pub interfaces: Vec<Interface>,
    pub boundaries: Vec<BoundaryPatch>,
    /// (block, i, j) of the single pressure gauge node, if any.
    pub pressure_anchor: Option<(usize, usize, usize)>,
}

/// One invariant violation found by [`validate_topology`].
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyIssue {
    InterfaceMismatch {
        interface: usize,
        k: usize,
        dist: f64,
    },
    InterfaceLengthMismatch {
        interface: usize,
        len_a: usize,
        len_b: usize,
    },
    UncoveredNode {
        block: usize,
        side: Side,
        k: usize,
    },
    OverlappingPatches {
        block: usize,
        side: Side,
        k: usize,
    },
    BadPatchRange {
        patch: usize,
    },
    BadIndex {
        what: &'static str,
        index: usize,
    },
}

impl std::fmt::Display for TopologyIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyIssue::InterfaceMismatch { interface, k, dist } => write!(
                f,
                "interface {interface}: node {k} coordinates differ by {dist:.3e}"
            ),
            TopologyIssue::InterfaceLengthMismatch {
                interface,
                len_a,
                len_b,
            } => write!(
                f,
                "interface {interface}: side lengths differ ({len_a} vs {len_b})"
            ),
            TopologyIssue::UncoveredNode { block, side, k } => write!(
                f,
                "block {block} side {side:?}: node {k} covered by no interface or patch"
            ),
            TopologyIssue::OverlappingPatches { block, side, k } => write!(
                f,
                "block {block} side {side:?}: node {k} covered by more than one patch"
            ),
            TopologyIssue::BadPatchRange { patch } => write!(f, "patch {patch}: empty or out-of-range"),
            TopologyIssue::BadIndex { what, index } => write!(f, "{what} index {index} out of range"),
        }
    }
}

impl MultiBlockMesh {
    /// Total node count with interface nodes counted once.
    pub fn n_physical_nodes(&self) -> usize {
        crate::graph::build_physical_graph(self).n_nodes
    }

    pub fn n_computational_nodes(&self) -> usize {
        self.blocks.iter().map(|b| b.n_nodes()).sum()
    }

    /// Validate and return self, for construction pipelines.
    pub fn validated(self) -> Result<Self> {
        let report = validate_topology(&self);
        if report.is_empty() {
            Ok(self)
        } else {
            let msgs: Vec<String> = report.iter().take(8).map(|i| i.to_string()).collect();
            Err(Error::Topology(msgs.join("; ")))
        }
    }
}

/// Check every mesh invariant and list each violation. Diagnostics only;
/// an empty report means the mesh is valid.
pub fn validate_topology(mesh: &MultiBlockMesh) -> Vec<TopologyIssue> {
    let mut issues = Vec::new();
    let nb = mesh.blocks.len();

    for (ii, itf) in mesh.interfaces.iter().enumerate() {
        if itf.block_a >= nb || itf.block_b >= nb {
            issues.push(TopologyIssue::BadIndex {
                what: "interface block",
                index: ii,
            });
            continue;
        }
        let ba = &mesh.blocks[itf.block_a];
        let bb = &mesh.blocks[itf.block_b];
        let la = itf.side_a.len(ba);
        let lb = itf.side_b.len(bb);
        if la != lb {
            issues.push(TopologyIssue::InterfaceLengthMismatch {
                interface: ii,
                len_a: la,
                len_b: lb,
            });
            continue;
        }
        for k in 0..la {
            let (ia, ja) = itf.side_a.node_ij(ba, k);
            let (ib, jb) = itf.side_b.node_ij(bb, itf.partner_k(la, k));
            let pa = ba.node(ia, ja);
            let pb = bb.node(ib, jb);
            let dist = (pa[0] - pb[0]).abs().max((pa[1] - pb[1]).abs());
            if dist > INTERFACE_TOL {
                issues.push(TopologyIssue::InterfaceMismatch {
                    interface: ii,
                    k,
                    dist,
                });
            }
        }
    }

    // Side coverage: every side node must be touched by at least one
    // interface or exactly one patch (interface+patch at corners is fine;
    // two patches on the same node is not).
    for (bi, block) in mesh.blocks.iter().enumerate() {
        for side in Side::ALL {
            let len = side.len(block);
            let mut on_interface = vec![false; len];
            let mut patch_count = vec![0usize; len];
            for itf in &mesh.interfaces {
                if itf.block_a == bi && itf.side_a == side {
                    on_interface.iter_mut().for_each(|v| *v = true);
                }
                if itf.block_b == bi && itf.side_b == side {
                    on_interface.iter_mut().for_each(|v| *v = true);
                }
                // Corner nodes shared with a perpendicular side that carries
                // an interface also count as covered.
            }
            for (pi, p) in mesh.boundaries.iter().enumerate() {
                if p.block == bi && p.side == side {
                    if p.start >= p.end || p.end > len {
                        issues.push(TopologyIssue::BadPatchRange { patch: pi });
                        continue;
                    }
                    for k in p.start..p.end {
                        patch_count[k] += 1;
                    }
                }
            }
            // Endpoint nodes belong to two sides; treat them as covered if
            // the perpendicular side covers them.
            let perp_covered = |k: usize| -> bool {
                let (i, j) = side.node_ij(block, k);
                let corner_side = if matches!(side, Side::IMin | Side::IMax) {
                    if j == 0 {
                        Some(Side::JMin)
                    } else if j == block.nj - 1 {
                        Some(Side::JMax)
                    } else {
                        None
                    }
                } else if i == 0 {
                    Some(Side::IMin)
                } else if i == block.ni - 1 {
                    Some(Side::IMax)
                } else {
                    None
                };
                let Some(ps) = corner_side else { return false };
                let pk = match ps {
                    Side::IMin | Side::IMax => j,
                    Side::JMin | Side::JMax => i,
                };
                mesh.interfaces.iter().any(|it| {
                    (it.block_a == bi && it.side_a == ps) || (it.block_b == bi && it.side_b == ps)
                }) || mesh.boundaries.iter().any(|p| {
                    p.block == bi && p.side == ps && pk >= p.start && pk < p.end
                })
            };
            for k in 0..len {
                if patch_count[k] > 1 {
                    issues.push(TopologyIssue::OverlappingPatches { block: bi, side, k });
                }
                if !on_interface[k] && patch_count[k] == 0 && !perp_covered(k) {
                    issues.push(TopologyIssue::UncoveredNode { block: bi, side, k });
                }
            }
        }
    }

    if let Some((b, i, j)) = mesh.pressure_anchor {
        if b >= nb || i >= mesh.blocks[b].ni || j >= mesh.blocks[b].nj {
            issues.push(TopologyIssue::BadIndex {
                what: "pressure anchor",
                index: b,
            });
        }
    }

    issues
}

/// Find all full-side pairings among `blocks` by coordinate coincidence.
/// Used by the mesh generators; sides that match both aligned and reversed
/// (degenerate) are reported aligned.
pub fn detect_interfaces(blocks: &[Block]) -> Vec<Interface> {
    let mut out = Vec::new();
    let side_seq = |b: &Block, s: Side| -> Vec<[f64; 2]> {
        (0..s.len(b)).map(|k| {
            let (i, j) = s.node_ij(b, k);
            b.node(i, j)
        }).collect()
    };
    let close = |a: [f64; 2], b: [f64; 2]| {
        (a[0] - b[0]).abs() <= INTERFACE_TOL && (a[1] - b[1]).abs() <= INTERFACE_TOL
    };
    for ba in 0..blocks.len() {
        for sa in Side::ALL {
            let seq_a = side_seq(&blocks[ba], sa);
            for bb in (ba + 1)..blocks.len() {
                for sb in Side::ALL {
                    let seq_b = side_seq(&blocks[bb], sb);
                    if seq_a.len() != seq_b.len() {
                        continue;
                    }
                    let n = seq_a.len();
                    if (0..n).all(|k| close(seq_a[k], seq_b[k])) {
                        out.push(Interface {
                            block_a: ba,
                            side_a: sa,
                            block_b: bb,
                            side_b: sb,
                            orientation: Orientation::Aligned,
                        });
                    } else if (0..n).all(|k| close(seq_a[k], seq_b[n - 1 - k])) {
                        out.push(Interface {
                            block_a: ba,
                            side_a: sa,
                            block_b: bb,
                            side_b: sb,
                            orientation: Orientation::Reversed,
                        });
                    }
                }
            }
        }
    }
    out
}
