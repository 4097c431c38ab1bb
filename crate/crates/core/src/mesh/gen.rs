//! Mesh generators for the supported geometries: the unit cavity, the
//! straight channel (optionally split into blocks along the flow direction),
//! the body-fitted cylinder channel, and a curved single block used for
//! truncation-order studies.

use super::{
    detect_interfaces, BcKind, BcValue, Block, BoundaryPatch, Interface, MultiBlockMesh, Side,
};
use crate::error::{Error, Result};

/// Channel dimensions of the DFG cylinder benchmark.
pub const CHANNEL_LENGTH: f64 = 2.2;
pub const CHANNEL_HEIGHT: f64 = 0.41;
const DEFAULT_INLET_U: f64 = 0.3;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|k| if k == n - 1 { b } else { a + k as f64 * h })
        .collect()
}

/// Uniform single-block cavity on [0, L]^2 with `n` nodes per side.
/// The top side moves; the pressure gauge sits at the upper-left corner.
pub fn generate_cavity(n: usize, l: f64) -> Result<MultiBlockMesh> {
    if n < 3 {
        return Err(Error::InvalidArg(format!("cavity needs n >= 3, got {n}")));
    }
    if l <= 0.0 {
        return Err(Error::InvalidArg("cavity side length must be positive".into()));
    }
    let xs = linspace(0.0, l, n);
    let mut coords = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            coords.push([xs[i], xs[j]]);
        }
    }
    let block = Block::new(n, n, coords)?;
    let zero = BcValue::Constant { u: 0.0, v: 0.0 };
    let boundaries = vec![
        BoundaryPatch { block: 0, side: Side::IMin, start: 0, end: n, kind: BcKind::Wall, value: zero },
        BoundaryPatch { block: 0, side: Side::IMax, start: 0, end: n, kind: BcKind::Wall, value: zero },
        BoundaryPatch { block: 0, side: Side::JMin, start: 1, end: n - 1, kind: BcKind::Wall, value: zero },
        BoundaryPatch {
            block: 0,
            side: Side::JMax,
            start: 1,
            end: n - 1,
            kind: BcKind::MovingLid,
            value: BcValue::Constant { u: 1.0, v: 0.0 },
        },
    ];
    Ok(MultiBlockMesh {
        blocks: vec![block],
        interfaces: Vec::new(),
        boundaries,
        pressure_anchor: Some((0, 0, n - 1)),
    })
}

/// Rectangular channel [0, 2.2] x [0, 0.41] with `nx` x `ny` nodes, split
/// into `n_splits + 1` blocks along i. Adjacent blocks share a column.
/// Left side is a parabolic inlet, right side an outlet, top/bottom walls.
pub fn generate_channel(nx: usize, ny: usize, n_splits: usize) -> Result<MultiBlockMesh> {
    if nx < 3 || ny < 3 {
        return Err(Error::InvalidArg(format!(
            "channel needs nx, ny >= 3, got {nx}x{ny}"
        )));
    }
    let n_blocks = n_splits + 1;
    if nx < 2 * n_blocks + 1 {
        return Err(Error::InvalidArg(format!(
            "{n_splits} splits of {nx} columns leave a block with fewer than 3 i-nodes"
        )));
    }
    let xs = linspace(0.0, CHANNEL_LENGTH, nx);
    let ys = linspace(0.0, CHANNEL_HEIGHT, ny);
    // Block k spans global columns [cuts[k], cuts[k+1]] inclusive.
    let cuts: Vec<usize> = (0..=n_blocks)
        .map(|k| k * (nx - 1) / n_blocks)
        .collect();
    if cuts.windows(2).any(|w| w[1] - w[0] < 2) {
        return Err(Error::InvalidArg(format!(
            "{n_splits} splits of {nx} columns leave a block with fewer than 3 i-nodes"
        )));
    }

    let mut blocks = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        let (c0, c1) = (cuts[k], cuts[k + 1]);
        let ni = c1 - c0 + 1;
        let mut coords = Vec::with_capacity(ni * ny);
        for j in 0..ny {
            for i in 0..ni {
                coords.push([xs[c0 + i], ys[j]]);
            }
        }
        blocks.push(Block::new(ni, ny, coords)?);
    }

    let zero = BcValue::Constant { u: 0.0, v: 0.0 };
    let inlet = BcValue::Parabolic { u_max: DEFAULT_INLET_U, height: CHANNEL_HEIGHT };
    let mut boundaries = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        boundaries.push(BoundaryPatch { block: k, side: Side::JMin, start: 0, end: b.ni, kind: BcKind::Wall, value: zero });
        boundaries.push(BoundaryPatch { block: k, side: Side::JMax, start: 0, end: b.ni, kind: BcKind::Wall, value: zero });
    }
    boundaries.push(BoundaryPatch { block: 0, side: Side::IMin, start: 1, end: ny - 1, kind: BcKind::Inlet, value: inlet });
    boundaries.push(BoundaryPatch {
        block: n_blocks - 1,
        side: Side::IMax,
        start: 1,
        end: ny - 1,
        kind: BcKind::Outlet,
        value: zero,
    });

    let interfaces = detect_interfaces(&blocks);
    debug_assert_eq!(interfaces.len(), n_splits);
    MultiBlockMesh {
        blocks,
        interfaces,
        boundaries,
        pressure_anchor: None,
    }
    .validated()
}

/// Node counts for the cylinder-channel generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshResolution {
    Coarse,
    Medium,
    Fine,
}

impl MeshResolution {
    /// (nodes per square side, radial nodes) of the O-ring blocks.
    fn ring_dims(self) -> (usize, usize) {
        match self {
            MeshResolution::Coarse => (9, 5),
            MeshResolution::Medium => (13, 7),
            MeshResolution::Fine => (17, 9),
        }
    }
}

impl std::str::FromStr for MeshResolution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(MeshResolution::Coarse),
            "medium" => Ok(MeshResolution::Medium),
            "fine" => Ok(MeshResolution::Fine),
            other => Err(Error::InvalidArg(format!("unknown resolution '{other}'"))),
        }
    }
}

/// Body-fitted multi-block mesh for the channel with one circular cylinder:
/// four O-ring blocks between the cylinder surface and a square frame of
/// half-width equal to the diameter, embedded in eight surrounding channel
/// blocks (a 3x3 tiling with the frame as the hole).
pub fn generate_cylinder_channel(
    center: (f64, f64),
    diameter: f64,
    resolution: MeshResolution,
) -> Result<MultiBlockMesh> {
    let (cx, cy) = center;
    let radius = 0.5 * diameter;
    let s = diameter; // square frame half-width
    let (n_s, n_r) = resolution.ring_dims();
    let h = 2.0 * s / (n_s - 1) as f64;

    // Clearance: at least two cells between the frame and every channel wall.
    for (gap, what) in [
        (cx - s, "inlet"),
        (CHANNEL_LENGTH - cx - s, "outlet"),
        (cy - s, "bottom wall"),
        (CHANNEL_HEIGHT - cy - s, "top wall"),
    ] {
        if gap < 2.0 * h {
            return Err(Error::InvalidArg(format!(
                "cylinder frame too close to {what}: gap {gap:.4} < {:.4}",
                2.0 * h
            )));
        }
    }

    let seg_nodes = |len: f64| -> usize { ((len / h).round() as usize).max(2) + 1 };
    let xs_l = linspace(0.0, cx - s, seg_nodes(cx - s));
    let xs_m = linspace(cx - s, cx + s, n_s);
    let xs_r = linspace(cx + s, CHANNEL_LENGTH, seg_nodes(CHANNEL_LENGTH - cx - s));
    let ys_b = linspace(0.0, cy - s, seg_nodes(cy - s));
    let ys_m = linspace(cy - s, cy + s, n_s);
    let ys_t = linspace(cy + s, CHANNEL_HEIGHT, seg_nodes(CHANNEL_HEIGHT - cy - s));

    let tensor = |xs: &[f64], ys: &[f64]| -> Result<Block> {
        let mut coords = Vec::with_capacity(xs.len() * ys.len());
        for &y in ys {
            for &x in xs {
                coords.push([x, y]);
            }
        }
        Block::new(xs.len(), ys.len(), coords)
    };

    // Ring blocks 0..8 around the frame, row by row (the centre tile is the
    // O-grid hole).
    let mut blocks = vec![
        tensor(&xs_l, &ys_b)?, // 0 bottom-left
        tensor(&xs_m, &ys_b)?, // 1 bottom-middle
        tensor(&xs_r, &ys_b)?, // 2 bottom-right
        tensor(&xs_l, &ys_m)?, // 3 middle-left
        tensor(&xs_r, &ys_m)?, // 4 middle-right
        tensor(&xs_l, &ys_t)?, // 5 top-left
        tensor(&xs_m, &ys_t)?, // 6 top-middle
        tensor(&xs_r, &ys_t)?, // 7 top-right
    ];

    // O-grid blocks 8..12. i runs counterclockwise along the frame side,
    // j from the frame (j = 0) inward to the cylinder surface (j = nj-1);
    // that ordering keeps J_inv positive. Quarter q starts at angle
    // -45 + 90 q degrees; nodes are rays from the frame to a uniform-angle
    // arc, blended linearly (transfinite interpolation with straight sides).
    let quarter = |q: usize| -> Result<Block> {
        let th0 = std::f64::consts::FRAC_PI_4 * (2.0 * q as f64 - 1.0);
        let mut coords = Vec::with_capacity(n_s * n_r);
        let outer = |k: usize| -> [f64; 2] {
            match q {
                0 => [cx + s, ys_m[k]],
                1 => [xs_m[n_s - 1 - k], cy + s],
                2 => [cx - s, ys_m[n_s - 1 - k]],
                _ => [xs_m[k], cy - s],
            }
        };
        for j in 0..n_r {
            let t = j as f64 / (n_r - 1) as f64;
            for i in 0..n_s {
                let th = th0 + std::f64::consts::FRAC_PI_2 * i as f64 / (n_s - 1) as f64;
                let arc = [cx + radius * th.cos(), cy + radius * th.sin()];
                let sq = outer(i);
                coords.push([sq[0] + t * (arc[0] - sq[0]), sq[1] + t * (arc[1] - sq[1])]);
            }
        }
        Block::new(n_s, n_r, coords)
    };
    for q in 0..4 {
        blocks.push(quarter(q)?);
    }

    // Radial edges of adjacent quarters are built from the same endpoints
    // but different angle values (e.g. 315 vs -45 degrees); snap them so the
    // interface coincidence is exact.
    snap_quarter_seams(&mut blocks, n_s, n_r);

    let interfaces = detect_interfaces(&blocks);

    let zero = BcValue::Constant { u: 0.0, v: 0.0 };
    let inlet = BcValue::Parabolic { u_max: DEFAULT_INLET_U, height: CHANNEL_HEIGHT };
    let mut boundaries = Vec::new();
    // Channel walls: bottom row JMin, top row JMax, full sides.
    for &b in &[0usize, 1, 2] {
        boundaries.push(BoundaryPatch { block: b, side: Side::JMin, start: 0, end: blocks[b].ni, kind: BcKind::Wall, value: zero });
    }
    for &b in &[5usize, 6, 7] {
        boundaries.push(BoundaryPatch { block: b, side: Side::JMax, start: 0, end: blocks[b].ni, kind: BcKind::Wall, value: zero });
    }
    // Inlet on the left column, outlet on the right; wall corners excluded.
    boundaries.push(BoundaryPatch { block: 0, side: Side::IMin, start: 1, end: blocks[0].nj, kind: BcKind::Inlet, value: inlet });
    boundaries.push(BoundaryPatch { block: 3, side: Side::IMin, start: 0, end: blocks[3].nj, kind: BcKind::Inlet, value: inlet });
    boundaries.push(BoundaryPatch { block: 5, side: Side::IMin, start: 0, end: blocks[5].nj - 1, kind: BcKind::Inlet, value: inlet });
    boundaries.push(BoundaryPatch { block: 2, side: Side::IMax, start: 1, end: blocks[2].nj, kind: BcKind::Outlet, value: zero });
    boundaries.push(BoundaryPatch { block: 4, side: Side::IMax, start: 0, end: blocks[4].nj, kind: BcKind::Outlet, value: zero });
    boundaries.push(BoundaryPatch { block: 7, side: Side::IMax, start: 0, end: blocks[7].nj - 1, kind: BcKind::Outlet, value: zero });
    // Cylinder surface: JMax of every O-grid block.
    for b in 8..12 {
        boundaries.push(BoundaryPatch { block: b, side: Side::JMax, start: 0, end: n_s, kind: BcKind::Wall, value: zero });
    }

    MultiBlockMesh {
        blocks,
        interfaces,
        boundaries,
        pressure_anchor: None,
    }
    .validated()
}

/// Copy each quarter's trailing radial edge onto the next quarter's leading
/// edge so matched nodes are bitwise identical.
fn snap_quarter_seams(blocks: &mut [Block], n_s: usize, n_r: usize) {
    for q in 0..4 {
        let a = 8 + q;
        let b = 8 + (q + 1) % 4;
        for j in 0..n_r {
            let p = blocks[a].node(n_s - 1, j);
            let idx = blocks[b].idx(0, j);
            blocks[b].coords[idx] = p;
        }
    }
}

/// Smoothly curved single block on the unit square: the uniform grid is
/// perturbed by x = u + a sin(pi v) sin(pi u), y = v + a sin(pi u) sin(pi v).
/// All sides are tagged as walls so the mesh validates; intended for
/// truncation-order studies, not flow solves.
pub fn generate_curved_block(n: usize, amplitude: f64) -> Result<MultiBlockMesh> {
    if n < 3 {
        return Err(Error::InvalidArg("curved block needs n >= 3".into()));
    }
    let pi = std::f64::consts::PI;
    let mut coords = Vec::with_capacity(n * n);
    for j in 0..n {
        let v = j as f64 / (n - 1) as f64;
        for i in 0..n {
            let u = i as f64 / (n - 1) as f64;
            let x = u + amplitude * (pi * v).sin() * (pi * u).sin();
            let y = v + amplitude * (pi * u).sin() * (pi * v).sin();
            coords.push([x, y]);
        }
    }
    let block = Block::new(n, n, coords)?;
    let zero = BcValue::Constant { u: 0.0, v: 0.0 };
    let boundaries = vec![
        BoundaryPatch { block: 0, side: Side::IMin, start: 0, end: n, kind: BcKind::Wall, value: zero },
        BoundaryPatch { block: 0, side: Side::IMax, start: 0, end: n, kind: BcKind::Wall, value: zero },
        BoundaryPatch { block: 0, side: Side::JMin, start: 1, end: n - 1, kind: BcKind::Wall, value: zero },
        BoundaryPatch { block: 0, side: Side::JMax, start: 1, end: n - 1, kind: BcKind::Wall, value: zero },
    ];
    Ok(MultiBlockMesh {
        blocks: vec![block],
        interfaces: Vec::new(),
        boundaries,
        pressure_anchor: None,
    })
}

/// Split an existing single-block mesh into two blocks sharing column
/// `cut` (0 < cut < ni-1). Boundary patches are carried over; used to check
/// that halo stencils reproduce the unsplit discretization.
pub fn split_single_block(mesh: &MultiBlockMesh, cut: usize) -> Result<MultiBlockMesh> {
    if mesh.blocks.len() != 1 {
        return Err(Error::InvalidArg("split_single_block needs a 1-block mesh".into()));
    }
    let b = &mesh.blocks[0];
    if cut < 2 || cut > b.ni - 3 {
        return Err(Error::InvalidArg(format!(
            "cut {cut} leaves a block with fewer than 3 i-nodes"
        )));
    }
    let sub = |c0: usize, c1: usize| -> Result<Block> {
        let ni = c1 - c0 + 1;
        let mut coords = Vec::with_capacity(ni * b.nj);
        for j in 0..b.nj {
            for i in 0..ni {
                coords.push(b.node(c0 + i, j));
            }
        }
        Block::new(ni, b.nj, coords)
    };
    let blocks = vec![sub(0, cut)?, sub(cut, b.ni - 1)?];
    let interfaces = vec![Interface {
        block_a: 0,
        side_a: Side::IMax,
        block_b: 1,
        side_b: Side::IMin,
        orientation: super::Orientation::Aligned,
    }];
    // Re-home the patches: i-sides keep their block; j-side patches are
    // clipped to each sub-block's column range.
    let mut boundaries = Vec::new();
    for p in &mesh.boundaries {
        match p.side {
            Side::IMin => boundaries.push(BoundaryPatch { block: 0, ..p.clone() }),
            Side::IMax => boundaries.push(BoundaryPatch { block: 1, ..p.clone() }),
            Side::JMin | Side::JMax => {
                let (s, e) = (p.start, p.end);
                if s < cut + 1 {
                    boundaries.push(BoundaryPatch { block: 0, start: s, end: e.min(cut + 1), ..p.clone() });
                }
                if e > cut {
                    boundaries.push(BoundaryPatch {
                        block: 1,
                        start: s.max(cut) - cut,
                        end: e - cut,
                        ..p.clone()
                    });
                }
            }
        }
    }
    let pressure_anchor = mesh.pressure_anchor.map(|(_, i, j)| {
        if i <= cut {
            (0, i, j)
        } else {
            (1, i - cut, j)
        }
    });
    MultiBlockMesh {
        blocks,
        interfaces,
        boundaries,
        pressure_anchor,
    }
    .validated()
}
