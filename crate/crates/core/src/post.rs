//! Error metrics, drag coefficient, and field export.

use crate::error::{Error, Result};
use crate::graph::PhysGraph;
use crate::mesh::{BoundaryPatch, MultiBlockMesh};
use crate::residual::FlowField;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    VelocityMagnitude,
    Pressure,
}

/// L1 error of `pred` against `reference`, normalized by the L1 magnitude
/// of the reference.
pub fn relative_mae(pred: &FlowField, reference: &FlowField, q: Quantity) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "field sizes differ: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    let values = |f: &FlowField| -> Vec<f64> {
        match q {
            Quantity::VelocityMagnitude => {
                f.u.iter().zip(&f.v).map(|(&u, &v)| u.hypot(v)).collect()
            }
            Quantity::Pressure => f.p.clone(),
        }
    };
    let a = values(pred);
    let b = values(reference);
    let den: f64 = b.iter().map(|x| x.abs()).sum();
    if den <= 0.0 {
        return Err(Error::InvalidArg("reference field has zero magnitude".into()));
    }
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    Ok(num / den)
}

/// One node of an assembled body loop: coordinate plus the sampling points
/// one and two layers into the fluid.
struct LoopNode {
    xy: [f64; 2],
    node: usize,
    in1: usize,
    in2: usize,
}

/// Chain boundary patches into a single closed node loop, matching patch
/// endpoints by physical node identity. Shared endpoints appear once.
fn assemble_loop(
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
    patches: &[&BoundaryPatch],
) -> Result<Vec<LoopNode>> {
    if patches.is_empty() {
        return Err(Error::InvalidArg("no body patches given".into()));
    }
    let run = |p: &BoundaryPatch| -> Result<Vec<LoopNode>> {
        let block = &mesh.blocks[p.block];
        if p.side.len(block) < 3 {
            return Err(Error::InvalidArg("body patch side too short".into()));
        }
        (p.start..p.end)
            .map(|k| {
                let at = |depth: usize| {
                    let (i, j) = p.side.inward_ij(block, k, depth);
                    pg.global_ids[p.block][block.idx(i, j)]
                };
                let (i, j) = p.side.node_ij(block, k);
                Ok(LoopNode { xy: block.node(i, j), node: at(0), in1: at(1), in2: at(2) })
            })
            .collect()
    };

    let mut used = vec![false; patches.len()];
    let mut nodes = run(patches[0])?;
    used[0] = true;
    for _ in 1..patches.len() {
        let tail = nodes.last().expect("nonempty").node;
        let next = (0..patches.len()).find_map(|pi| {
            if used[pi] {
                return None;
            }
            let seg = run(patches[pi]).ok()?;
            if seg.first()?.node == tail {
                Some((pi, seg, false))
            } else if seg.last()?.node == tail {
                Some((pi, seg, true))
            } else {
                None
            }
        });
        let Some((pi, mut seg, reversed)) = next else {
            return Err(Error::Topology("body patches do not form a connected loop".into()));
        };
        used[pi] = true;
        if reversed {
            seg.reverse();
        }
        nodes.extend(seg.into_iter().skip(1));
    }
    if nodes.len() < 4 || nodes.first().map(|n| n.node) != nodes.last().map(|n| n.node) {
        return Err(Error::Topology("body patches do not close into a loop".into()));
    }
    nodes.pop();
    Ok(nodes)
}

/// Drag coefficient from a surface integral of pressure and wall shear over
/// a closed body loop: C_d = 2 F_x / (U_mean^2 D). The pressure force uses
/// exact segment normals (so a constant pressure on a closed loop gives
/// zero); the shear uses a second-order one-sided derivative of the
/// tangential velocity along the grid ray into the fluid.
pub fn drag_coefficient(
    field: &FlowField,
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
    re: f64,
    patches: &[&BoundaryPatch],
    u_mean: f64,
    d: f64,
) -> Result<f64> {
    if re <= 0.0 || u_mean <= 0.0 || d <= 0.0 {
        return Err(Error::InvalidArg(
            "Reynolds number, reference velocity, and diameter must be positive".into(),
        ));
    }
    if field.len() != pg.n_nodes {
        return Err(Error::Shape(format!(
            "field has {} nodes, mesh has {}",
            field.len(),
            pg.n_nodes
        )));
    }
    let ring = assemble_loop(mesh, pg, patches)?;
    let n = ring.len();

    // Loop orientation by the shoelace sum; with counterclockwise order the
    // outward body normal of a segment (dx, dy) is (dy, -dx).
    let area2: f64 = (0..n)
        .map(|k| {
            let a = ring[k].xy;
            let b = ring[(k + 1) % n].xy;
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    let orient = if area2 >= 0.0 { 1.0 } else { -1.0 };

    // Per-node wall shear traction, x component.
    let shear_x: Vec<f64> = (0..n)
        .map(|k| {
            let prev = ring[(k + n - 1) % n].xy;
            let next = ring[(k + 1) % n].xy;
            let (tx, ty) = {
                let dx = next[0] - prev[0];
                let dy = next[1] - prev[1];
                let l = dx.hypot(dy);
                (dx / l, dy / l)
            };
            let ut = |node: usize| field.u[node] * tx + field.v[node] * ty;
            let p0 = ring[k].xy;
            let c1 = pg.coords[ring[k].in1];
            let c2 = pg.coords[ring[k].in2];
            let h1 = (c1[0] - p0[0]).hypot(c1[1] - p0[1]);
            let h2 = (c2[0] - p0[0]).hypot(c2[1] - p0[1]);
            // f'(0) from samples at 0, h1, h2 (nonuniform one-sided stencil).
            let w2 = -h1 / (h2 * (h2 - h1));
            let w1 = h2 / (h1 * (h2 - h1));
            let w0 = -w1 - w2;
            let dut_dn = w0 * ut(ring[k].node) + w1 * ut(ring[k].in1) + w2 * ut(ring[k].in2);
            dut_dn / re * tx
        })
        .collect();

    let mut fx = 0.0;
    for k in 0..n {
        let a = &ring[k];
        let b = &ring[(k + 1) % n];
        let dx = b.xy[0] - a.xy[0];
        let dy = b.xy[1] - a.xy[1];
        let nx_ds = orient * dy; // outward normal x times segment length
        fx += -0.5 * (field.p[a.node] + field.p[b.node]) * nx_ds;
        fx += 0.5 * (shear_x[k] + shear_x[(k + 1) % n]) * dx.hypot(dy);
    }
    Ok(2.0 * fx / (u_mean * u_mean * d))
}

/// One resolution of a manufactured-solution study.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MmsPoint {
    pub n: usize,
    /// Max over interior nodes of J times the largest equation residual.
    pub max_scaled_residual: f64,
}

/// Evaluate the discrete residual of an exact steady solution (an
/// exponentially decaying Taylor-Green-like vortex pair) on progressively
/// refined curved single-block meshes. The residual of the exact field is
/// pure truncation error, so its decay rate is the scheme order.
pub fn manufactured_solution_study(
    resolutions: &[usize],
    re: f64,
    amplitude: f64,
) -> Result<Vec<MmsPoint>> {
    use crate::graph::{build_physical_graph, to_computational_graph};
    use crate::mesh::generate_curved_block;
    use crate::metrics::compute_metrics;
    use crate::residual::assemble_residuals_loop;
    use std::f64::consts::PI;

    if re <= 0.0 {
        return Err(Error::InvalidArg(format!("Reynolds number must be positive, got {re}")));
    }
    // Exact solution with nontrivial convection, diffusion, and pressure:
    // lam = Re/2 - sqrt(Re^2/4 + 4 pi^2).
    let lam = 0.5 * re - (0.25 * re * re + 4.0 * PI * PI).sqrt();
    let exact = |x: f64, y: f64| -> (f64, f64, f64) {
        let e = (lam * x).exp();
        (
            1.0 - e * (2.0 * PI * y).cos(),
            lam / (2.0 * PI) * e * (2.0 * PI * y).sin(),
            0.5 * (1.0 - e * e),
        )
    };

    let mut out = Vec::with_capacity(resolutions.len());
    for &n in resolutions {
        let mesh = generate_curved_block(n, amplitude)?;
        let pg = build_physical_graph(&mesh);
        let cg = to_computational_graph(&pg, &mesh);
        let m = compute_metrics(&mesh, &cg)?;
        let mut f = FlowField::zeros(pg.n_nodes);
        for g in 0..pg.n_nodes {
            let [x, y] = pg.coords[g];
            (f.u[g], f.v[g], f.p[g]) = exact(x, y);
        }
        let r = assemble_residuals_loop(&f, &m, &cg, &pg, re)?;
        let mut worst = 0.0f64;
        for g in 0..pg.n_nodes {
            if pg.node_type[g].is_flow_boundary() {
                continue;
            }
            let j = m.j[cg.dup_groups[g][0]];
            let e = r.r_cont[g].abs().max(r.r_mom_x[g].abs()).max(r.r_mom_y[g].abs());
            worst = worst.max(j * e);
        }
        out.push(MmsPoint { n, max_scaled_residual: worst });
    }
    Ok(out)
}

/// Observed order between consecutive study points, one value per pair.
pub fn convergence_orders(points: &[MmsPoint]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| {
            let ratio = (w[1].n - 1) as f64 / (w[0].n - 1) as f64;
            (w[0].max_scaled_residual / w[1].max_scaled_residual).ln() / ratio.ln()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    VtkLegacyStructured,
    Csv,
}

/// Write the field to disk and return the files produced. VTK legacy holds
/// one structured grid per file (one file per block, suffixed by block id);
/// CSV is a single file with IEEE-754 bit-pattern columns for bitwise
/// round trips plus human-readable decimal mirrors.
pub fn export_field(
    field: &FlowField,
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
    format: ExportFormat,
    path: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    if field.len() != pg.n_nodes {
        return Err(Error::Shape(format!(
            "field has {} nodes, mesh has {}",
            field.len(),
            pg.n_nodes
        )));
    }
    let path = path.as_ref();
    match format {
        ExportFormat::VtkLegacyStructured => export_vtk(field, mesh, pg, path),
        ExportFormat::Csv => export_csv(field, mesh, pg, path).map(|p| vec![p]),
    }
}

fn export_vtk(
    field: &FlowField,
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
    path: &Path,
) -> Result<Vec<PathBuf>> {
    let stem = path.with_extension("");
    let mut files = Vec::new();
    for (b, block) in mesh.blocks.iter().enumerate() {
        let out = PathBuf::from(format!("{}_block{b}.vtk", stem.display()));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
        let np = block.n_nodes();
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "block {b}")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET STRUCTURED_GRID")?;
        writeln!(w, "DIMENSIONS {} {} 1", block.ni, block.nj)?;
        writeln!(w, "POINTS {np} double")?;
        for c in block.coords() {
            writeln!(w, "{} {} 0.0", c[0], c[1])?;
        }
        writeln!(w, "POINT_DATA {np}")?;
        let scalars = |w: &mut dyn Write, name: &str, get: &dyn Fn(usize) -> f64| -> Result<()> {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for idx in 0..np {
                writeln!(w, "{}", get(pg.global_ids[b][idx]))?;
            }
            Ok(())
        };
        scalars(&mut w, "u", &|g| field.u[g])?;
        scalars(&mut w, "v", &|g| field.v[g])?;
        scalars(&mut w, "p", &|g| field.p[g])?;
        scalars(&mut w, "U", &|g| field.u[g].hypot(field.v[g]))?;
        w.flush()?;
        files.push(out);
    }
    Ok(files)
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn export_csv(
    field: &FlowField,
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
    path: &Path,
) -> Result<PathBuf> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "block,i,j,x,y,u,v,p,x_dec,y_dec,u_dec,v_dec,p_dec")?;
    for (b, block) in mesh.blocks.iter().enumerate() {
        for j in 0..block.nj {
            for i in 0..block.ni {
                let [x, y] = block.node(i, j);
                let g = pg.global_ids[b][block.idx(i, j)];
                let (u, v, p) = (field.u[g], field.v[g], field.p[g]);
                writeln!(
                    w,
                    "{b},{i},{j},{},{},{},{},{},{x},{y},{u},{v},{p}",
                    hex(x),
                    hex(y),
                    hex(u),
                    hex(v),
                    hex(p),
                )?;
            }
        }
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Read a CSV written by [`export_field`] back into a field on `mesh`,
/// reproducing the written values bitwise.
pub fn import_csv_field(
    path: impl AsRef<Path>,
    mesh: &MultiBlockMesh,
    pg: &PhysGraph,
) -> Result<FlowField> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), msg };
    let file = std::fs::File::open(path)?;
    let mut field = FlowField::zeros(pg.n_nodes);
    let mut seen = vec![false; pg.n_nodes];
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if ln == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 8 {
            return Err(bad(format!("line {}: expected at least 8 columns", ln + 1)));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
        let num = |s: &str| {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|e| bad(format!("line {}: {e}", ln + 1)))
        };
        let (b, i, j) = (idx(cols[0])?, idx(cols[1])?, idx(cols[2])?);
        let block = mesh
            .blocks
            .get(b)
            .ok_or_else(|| bad(format!("line {}: block {b} out of range", ln + 1)))?;
        if i >= block.ni || j >= block.nj {
            return Err(bad(format!("line {}: node ({i},{j}) out of range", ln + 1)));
        }
        let g = pg.global_ids[b][block.idx(i, j)];
        field.u[g] = num(cols[5])?;
        field.v[g] = num(cols[6])?;
        field.p[g] = num(cols[7])?;
        seen[g] = true;
    }
    if seen.iter().any(|&s| !s) {
        return Err(bad("file does not cover every mesh node".into()));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_physical_graph;
    use crate::mesh::{generate_cavity, generate_cylinder_channel, BcKind, MeshResolution};

    #[test]
    fn relative_mae_examples() {
        let f = FlowField { u: vec![1.0, 2.0], v: vec![0.5, -1.0], p: vec![3.0, 4.0] };
        assert_eq!(relative_mae(&f, &f, Quantity::VelocityMagnitude).unwrap(), 0.0);
        assert_eq!(relative_mae(&f, &f, Quantity::Pressure).unwrap(), 0.0);

        let scaled = FlowField {
            u: f.u.iter().map(|x| 1.1 * x).collect(),
            v: f.v.iter().map(|x| 1.1 * x).collect(),
            p: f.p.iter().map(|x| 1.1 * x).collect(),
        };
        let e = relative_mae(&scaled, &f, Quantity::VelocityMagnitude).unwrap();
        assert!((e - 0.1).abs() <= 1e-12, "got {e}");
        let e = relative_mae(&scaled, &f, Quantity::Pressure).unwrap();
        assert!((e - 0.1).abs() <= 1e-12, "got {e}");

        let zero = FlowField::zeros(2);
        assert!(relative_mae(&f, &zero, Quantity::Pressure).is_err());
    }

    fn cylinder_setup() -> (MultiBlockMesh, PhysGraph) {
        let mesh = generate_cylinder_channel((0.5, 0.2), 0.1, MeshResolution::Coarse).unwrap();
        let pg = build_physical_graph(&mesh);
        (mesh, pg)
    }

    fn body_patches(mesh: &MultiBlockMesh) -> Vec<&BoundaryPatch> {
        mesh.boundaries
            .iter()
            .filter(|p| p.kind == BcKind::Wall && p.block >= 8)
            .collect()
    }

    #[test]
    fn drag_of_zero_field_is_zero() {
        let (mesh, pg) = cylinder_setup();
        let f = FlowField::zeros(pg.n_nodes);
        let cd =
            drag_coefficient(&f, &mesh, &pg, 20.0, &body_patches(&mesh), 0.2, 0.1).unwrap();
        assert_eq!(cd, 0.0);
    }

    #[test]
    fn constant_pressure_on_closed_loop_gives_no_drag() {
        let (mesh, pg) = cylinder_setup();
        let f = FlowField {
            u: vec![0.0; pg.n_nodes],
            v: vec![0.0; pg.n_nodes],
            p: vec![7.5; pg.n_nodes],
        };
        let cd =
            drag_coefficient(&f, &mesh, &pg, 20.0, &body_patches(&mesh), 0.2, 0.1).unwrap();
        assert!(cd.abs() <= 1e-10, "got {cd}");
    }

    #[test]
    fn uniform_shear_drag_sign_and_scale() {
        // u = y near the cylinder gives du_t/dn contributions that integrate
        // to a positive streamwise force.
        let (mesh, pg) = cylinder_setup();
        let f = FlowField {
            u: pg.coords.iter().map(|c| c[1] - 0.2).collect(),
            v: vec![0.0; pg.n_nodes],
            p: vec![0.0; pg.n_nodes],
        };
        let cd =
            drag_coefficient(&f, &mesh, &pg, 20.0, &body_patches(&mesh), 0.2, 0.1).unwrap();
        assert!(cd > 0.0, "got {cd}");
    }

    #[test]
    fn open_loop_is_rejected() {
        let (mesh, pg) = cylinder_setup();
        let patches: Vec<&BoundaryPatch> = body_patches(&mesh).into_iter().take(3).collect();
        let f = FlowField::zeros(pg.n_nodes);
        assert!(drag_coefficient(&f, &mesh, &pg, 20.0, &patches, 0.2, 0.1).is_err());
    }

    #[test]
    fn manufactured_solution_orders_are_second_order() {
        let pts = manufactured_solution_study(&[17, 33, 65], 40.0, 0.05).unwrap();
        assert!(pts.windows(2).all(|w| w[1].max_scaled_residual < w[0].max_scaled_residual));
        for order in convergence_orders(&pts) {
            assert!((order - 2.0).abs() <= 0.3, "observed order {order}");
        }
    }

    #[test]
    fn vtk_export_declares_dimensions() {
        let mesh = generate_cavity(3, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let f = FlowField::zeros(pg.n_nodes);
        let dir = tempfile::tempdir().unwrap();
        let files = export_field(
            &f,
            &mesh,
            &pg,
            ExportFormat::VtkLegacyStructured,
            dir.path().join("out.vtk"),
        )
        .unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.contains("DIMENSIONS 3 3 1"));
        assert!(text.contains("POINTS 9 double"));
        for name in ["SCALARS u", "SCALARS v", "SCALARS p", "SCALARS U"] {
            assert!(text.contains(name), "missing {name}");
        }
    }

    #[test]
    fn csv_roundtrip_is_bitwise() {
        let mesh = generate_cavity(5, 1.0).unwrap();
        let pg = build_physical_graph(&mesh);
        let mut f = FlowField::zeros(pg.n_nodes);
        for g in 0..pg.n_nodes {
            f.u[g] = (g as f64 * 0.731).sin();
            f.v[g] = -(g as f64 * 1.37).cos();
            f.p[g] = 1.0 / (g as f64 + 3.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        export_field(&f, &mesh, &pg, ExportFormat::Csv, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let rows = text.lines().count() - 1;
        let expected: usize = mesh.blocks.iter().map(|b| b.n_nodes()).sum();
        assert_eq!(rows, expected);

        let back = import_csv_field(&path, &mesh, &pg).unwrap();
        for g in 0..pg.n_nodes {
            assert_eq!(f.u[g].to_bits(), back.u[g].to_bits());
            assert_eq!(f.v[g].to_bits(), back.v[g].to_bits());
            assert_eq!(f.p[g].to_bits(), back.p[g].to_bits());
        }
    }
}
