//! MBG mesh file I/O.
//!
//! The mesh file is plain text: line 1 holds the block count, then for each
//! block a `ni nj` line followed by ni*nj `x y` lines in row-major order
//! (j outer, i inner). Topology lives in a sibling JSON file with the
//! extension `.topo.json`: interface pairings, boundary patches, and the
//! optional pressure anchor. Coordinates are written in shortest
//! round-trip decimal form, so save/load reproduces the mesh bit-exactly.

use super::{Block, BoundaryPatch, Interface, MultiBlockMesh};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    interfaces: Vec<Interface>,
    boundaries: Vec<BoundaryPatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pressure_anchor: Option<(usize, usize, usize)>,
}

fn topo_path(mesh_path: &Path) -> PathBuf {
    mesh_path.with_extension("topo.json")
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Load a mesh from `path` and its sibling topology file, validating all
/// invariants (interface coincidence, side coverage).
pub fn load_mesh(path: impl AsRef<Path>) -> Result<MultiBlockMesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let mut next_line = || -> Result<String> {
        loop {
            match lines.next() {
                Some(l) => {
                    let l = l?;
                    let t = l.trim();
                    if !t.is_empty() && !t.starts_with('#') {
                        return Ok(t.to_string());
                    }
                }
                None => return Err(parse_err(path, "unexpected end of file")),
            }
        }
    };

    let nblocks: usize = next_line()?
        .parse()
        .map_err(|e| parse_err(path, format!("bad block count: {e}")))?;
    let mut blocks = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let dims = next_line()?;
        let mut it = dims.split_whitespace();
        let ni: usize = it
            .next()
            .ok_or_else(|| parse_err(path, format!("block {b}: missing ni")))?
            .parse()
            .map_err(|e| parse_err(path, format!("block {b}: bad ni: {e}")))?;
        let nj: usize = it
            .next()
            .ok_or_else(|| parse_err(path, format!("block {b}: missing nj")))?
            .parse()
            .map_err(|e| parse_err(path, format!("block {b}: bad nj: {e}")))?;
        let mut coords = Vec::with_capacity(ni * nj);
        for n in 0..ni * nj {
            let line = next_line()?;
            let mut it = line.split_whitespace();
            let mut coord = [0.0f64; 2];
            for c in &mut coord {
                *c = it
                    .next()
                    .ok_or_else(|| parse_err(path, format!("block {b} node {n}: missing coordinate")))?
                    .parse()
                    .map_err(|e| parse_err(path, format!("block {b} node {n}: {e}")))?;
            }
            coords.push(coord);
        }
        blocks.push(Block::new(ni, nj, coords)?);
    }

    let tpath = topo_path(path);
    let tfile = std::fs::File::open(&tpath)
        .map_err(|e| parse_err(&tpath, format!("cannot open topology file: {e}")))?;
    let topo: TopologyFile = serde_json::from_reader(BufReader::new(tfile))?;

    MultiBlockMesh {
        blocks,
        interfaces: topo.interfaces,
        boundaries: topo.boundaries,
        pressure_anchor: topo.pressure_anchor,
    }
    .validated()
}

/// Write the mesh file and its sibling topology file.
pub fn save_mesh(mesh: &MultiBlockMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", mesh.blocks.len())?;
    for b in &mesh.blocks {
        writeln!(w, "{} {}", b.ni, b.nj)?;
        for c in b.coords() {
            writeln!(w, "{} {}", c[0], c[1])?;
        }
    }
    w.flush()?;

    let topo = TopologyFile {
        interfaces: mesh.interfaces.clone(),
        boundaries: mesh.boundaries.clone(),
        pressure_anchor: mesh.pressure_anchor,
    };
    let tfile = std::fs::File::create(topo_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(tfile), &topo)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cavity, generate_channel, generate_cylinder_channel, MeshResolution};

    fn roundtrip(m: &MultiBlockMesh) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mbg");
        save_mesh(m, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.blocks.len(), m.blocks.len());
        for (a, b) in back.blocks.iter().zip(&m.blocks) {
            assert_eq!((a.ni, a.nj), (b.ni, b.nj));
            assert_eq!(a.coords(), b.coords());
        }
        assert_eq!(back.interfaces.len(), m.interfaces.len());
        assert_eq!(back.boundaries.len(), m.boundaries.len());
        assert_eq!(back.pressure_anchor, m.pressure_anchor);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        roundtrip(&generate_cavity(7, 1.0).unwrap());
        roundtrip(&generate_channel(9, 5, 1).unwrap());
        roundtrip(&generate_cylinder_channel((0.2, 0.2), 0.1, MeshResolution::Coarse).unwrap());
    }

    #[test]
    fn smallest_block_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mbg");
        save_mesh(&generate_cavity(3, 1.0).unwrap(), &p).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.n_physical_nodes(), 9);
    }

    #[test]
    fn mismatched_interface_fails_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mbg");
        let mut m = generate_channel(9, 5, 1).unwrap();
        let idx = m.blocks[1].idx(0, 2);
        m.blocks[1].coords[idx][1] += 1e-6;
        save_mesh(&m, &p).unwrap();
        assert!(load_mesh(&p).is_err());
    }
}
