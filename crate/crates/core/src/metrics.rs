//! Grid metric terms of the curvilinear coordinate transform.
//!
//! All derivatives are taken with respect to the index coordinates
//! (xi, eta) with unit spacing: central differences where the stencil is
//! complete (halo nodes fill it across block interfaces), second-order
//! one-sided differences at physical boundaries. Metrics are stored per
//! computational node, so duplicated interface copies carry identical
//! values by construction.

use crate::error::{Error, Result};
use crate::graph::{apply_taps, derivative_taps, CompGraph, Dir, Taps};
use crate::mesh::MultiBlockMesh;

/// Metric terms per computational node.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub xi_x: Vec<f64>,
    pub xi_y: Vec<f64>,
    pub eta_x: Vec<f64>,
    pub eta_y: Vec<f64>,
    /// Jacobian J of the mapping from physical to index space.
    pub j: Vec<f64>,
    /// Inverse Jacobian, the cell-area factor x_xi*y_eta - x_eta*y_xi.
    pub j_inv: Vec<f64>,
    pub t11: Vec<f64>,
    pub t12: Vec<f64>,
    pub t22: Vec<f64>,
    /// Nodal derivative stencils, kept for reuse by the residual assembly.
    pub taps_xi: Vec<Taps>,
    pub taps_eta: Vec<Taps>,
}

/// Compute metrics for every computational node of `cg`. Fails with a
/// located error if the inverse Jacobian is not strictly positive
/// anywhere (folded or left-handed cells).
pub fn compute_metrics(mesh: &MultiBlockMesh, cg: &CompGraph) -> Result<MetricField> {
    let n = cg.n_com;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for &(b, i, j) in &cg.location {
        let p = mesh.blocks[b].node(i, j);
        x.push(p[0]);
        y.push(p[1]);
    }

    let taps_xi = derivative_taps(cg, Dir::Xi);
    let taps_eta = derivative_taps(cg, Dir::Eta);
    let x_xi = apply_taps(&taps_xi, &x);
    let x_eta = apply_taps(&taps_eta, &x);
    let y_xi = apply_taps(&taps_xi, &y);
    let y_eta = apply_taps(&taps_eta, &y);

    let mut f = MetricField {
        xi_x: vec![0.0; n],
        xi_y: vec![0.0; n],
        eta_x: vec![0.0; n],
        eta_y: vec![0.0; n],
        j: vec![0.0; n],
        j_inv: vec![0.0; n],
        t11: vec![0.0; n],
        t12: vec![0.0; n],
        t22: vec![0.0; n],
        taps_xi,
        taps_eta,
    };
    for c in 0..n {
        let j_inv = x_xi[c] * y_eta[c] - x_eta[c] * y_xi[c];
        if !(j_inv > 0.0) {
            let (block, i, j) = cg.location[c];
            return Err(Error::Degenerate { block, i, j, jinv: j_inv });
        }
        let j = 1.0 / j_inv;
        f.j_inv[c] = j_inv;
        f.j[c] = j;
        f.xi_x[c] = j * y_eta[c];
        f.xi_y[c] = -j * x_eta[c];
        f.eta_x[c] = -j * y_xi[c];
        f.eta_y[c] = j * x_xi[c];
        f.t11[c] = (f.xi_x[c] * f.xi_x[c] + f.xi_y[c] * f.xi_y[c]) * j_inv;
        f.t12[c] = (f.xi_x[c] * f.eta_x[c] + f.xi_y[c] * f.eta_y[c]) * j_inv;
        f.t22[c] = (f.eta_x[c] * f.eta_x[c] + f.eta_y[c] * f.eta_y[c]) * j_inv;
    }
    Ok(f)
}

/// Contravariant velocity components U, V scaled by the inverse Jacobian,
/// per computational node.
pub fn covariant_velocity(m: &MetricField, u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = m.j_inv.len();
    let mut uu = Vec::with_capacity(n);
    let mut vv = Vec::with_capacity(n);
    for c in 0..n {
        uu.push((u[c] * m.xi_x[c] + v[c] * m.xi_y[c]) * m.j_inv[c]);
        vv.push((u[c] * m.eta_x[c] + v[c] * m.eta_y[c]) * m.j_inv[c]);
    }
    (uu, vv)
}
