//! Wavefront OBJ: positions, faces and vertex normals. Other records are
//! ignored.

use std::io::Write;

use nalgebra::Vector3;

use crate::error::{GeometryError, Location, Result};
use crate::mesh::TriangleMesh;

fn resolve(raw: &str, len: usize, what: &str, src: &str, line: usize) -> Result<usize> {
    let err = |msg: String| GeometryError::parse(src, Location::Line(line), msg);
    let i: i64 = raw
        .parse()
        .map_err(|_| err(format!("malformed {what} index '{raw}'")))?;
    let idx = match i {
        0 => return Err(err(format!("{what} index 0 is invalid (OBJ indices are 1-based)"))),
        i if i > 0 => i as usize - 1,
        i => {
            let back = (-i) as usize;
            if back > len {
                return Err(err(format!("face {what} index {i} out of range ({len} defined)")));
            }
            len - back
        }
    };
    if idx >= len {
        return Err(err(format!("face {what} index {i} out of range ({len} defined)")));
    }
    Ok(idx)
}

/// Parses OBJ text. Polygons are fan-triangulated. `src` names the input in
/// error messages.
pub fn read_obj(text: &str, src: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut vn = Vec::new();
    let mut triangles = Vec::new();
    let mut vertex_normal: Vec<Option<usize>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        let err = |msg: String| GeometryError::parse(src, Location::Line(line_no), msg);
        match tok.next() {
            Some(kw @ ("v" | "vn")) => {
                let vals = tok
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("malformed number '{t}'"))))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() < 3 {
                    return Err(err(format!("'{kw}' record needs three coordinates")));
                }
                let v = Vector3::new(vals[0], vals[1], vals[2]);
                if kw == "v" {
                    vertices.push(v);
                    vertex_normal.push(None);
                } else {
                    vn.push(v);
                }
            }
            Some("f") => {
                let mut corners = Vec::new();
                for t in tok {
                    let mut parts = t.split('/');
                    let v = resolve(parts.next().unwrap_or(""), vertices.len(), "vertex", src, line_no)?;
                    let _texcoord = parts.next();
                    if let Some(n) = parts.next().filter(|s| !s.is_empty()) {
                        let ni = resolve(n, vn.len(), "normal", src, line_no)?;
                        vertex_normal[v] = Some(ni);
                    }
                    corners.push(v);
                }
                if corners.len() < 3 {
                    return Err(err("face needs at least three vertices".into()));
                }
                for k in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let normals = if !vertices.is_empty() && vertex_normal.iter().all(Option::is_some) {
        Some(vertex_normal.iter().map(|n| vn[n.unwrap()]).collect())
    } else if vn.len() == vertices.len() && !vn.is_empty() {
        Some(vn)
    } else {
        None
    };
    Ok(TriangleMesh {
        vertices,
        triangles,
        normals,
    })
}

pub fn write_obj<W: Write>(mesh: &TriangleMesh, w: &mut W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for t in &mesh.triangles {
            writeln!(w, "f {0}//{0} {1}//{1} {2}//{2}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    } else {
        for t in &mesh.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triangle() {
        let m = read_obj("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1 2 3\n", "t").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert!(m.normals.is_none());
    }

    #[test]
    fn quad_fan_and_normals() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let m = read_obj(text, "t").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.normals.unwrap()[3], Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn negative_indices() {
        let m = read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n", "t").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_names_line() {
        let err = read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 7\n", "bad.obj").unwrap_err();
        match err {
            GeometryError::Parse { location, ref message, .. } => {
                assert_eq!(location, Location::Line(5));
                assert!(message.contains("out of range"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn round_trip() {
        let m = read_obj("v 0 0 0\nv 1 0.5 0\nv 0 1 -2.25\nf 1 2 3\n", "t").unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let back = read_obj(std::str::from_utf8(&buf).unwrap(), "t").unwrap();
        assert_eq!(back, m);
    }
}
