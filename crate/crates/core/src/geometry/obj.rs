//! ASCII Wavefront OBJ restricted to `v` and triangular `f` records.

use std::fmt::Write as _;
use std::path::Path;

use super::{GeometryError, TriangleMesh};

pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 32 + mesh.faces.len() * 16);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), GeometryError> {
    std::fs::write(path, write_obj(mesh))?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse { line, message: message.into() }
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, GeometryError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None => {}
            Some("v") => {
                let coords: Vec<&str> = tokens.collect();
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(parse_err(lineno, format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut v = [0.0; 3];
                for (slot, tok) in v.iter_mut().zip(&coords) {
                    *slot = tok.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad coordinate `{tok}`")))?;
                    if !slot.is_finite() {
                        return Err(parse_err(lineno, "non-finite coordinate"));
                    }
                }
                vertices.push(v);
            }
            Some("f") => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() > 3 {
                    return Err(GeometryError::UnsupportedFormat(format!(
                        "line {lineno}: face with {} vertices (only triangles are supported)",
                        refs.len()
                    )));
                }
                if refs.len() < 3 {
                    return Err(parse_err(lineno, "face needs 3 vertex indices"));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&refs) {
                    let idx = tok.split('/').next().unwrap_or("");
                    let k: usize = idx.parse().map_err(|_| parse_err(lineno, format!("bad face index `{tok}`")))?;
                    if k == 0 {
                        return Err(parse_err(lineno, "face indices are 1-based"));
                    }
                    *slot = k - 1;
                }
                faces.push(f);
            }
            Some("vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib") => {}
            Some(other) => return Err(parse_err(lineno, format!("unknown record `{other}`"))),
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh, GeometryError> {
    parse_obj(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vertices: Vec<[f64; 3]> = (0..20).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let faces: Vec<[usize; 3]> = (0..10).map(|i| [i, i + 1, i + 2]).collect();
        let mesh = TriangleMesh::new(vertices, faces).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        save_obj(&mesh, &path).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn one_indexed_faces() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.faces[0], [0, 1, 2]);
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2//2 3\n").unwrap();
        assert_eq!(m.faces[0], [0, 1, 2]);
    }

    #[test]
    fn quads_unsupported() {
        let r = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n");
        assert!(matches!(r, Err(GeometryError::UnsupportedFormat(_))));
    }

    #[test]
    fn malformed_line_reports_number() {
        match parse_obj("v 0 0 0\nv 1 zero 0\n") {
            Err(GeometryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_obj("v 0 0 0\nf 1 2\n"), Err(GeometryError::Parse { line: 2, .. })));
    }
}
