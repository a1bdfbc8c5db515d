//! Minimal Wavefront OBJ reader: `v` and `f` records only.

use std::path::Path;

use super::{TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Parses OBJ text; polygons are fan-triangulated, other records ignored.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let coords: Vec<f64> = fields
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format("obj", format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(Error::format(
                        "obj",
                        format!("line {}: vertex needs 3 coordinates", lineno + 1),
                    ));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for token in fields {
                    let index_str = token.split('/').next().unwrap_or("");
                    let raw: i64 = index_str
                        .parse()
                        .map_err(|e| Error::format("obj", format!("line {}: {e}", lineno + 1)))?;
                    let index = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        vertices.len() as i64 + raw
                    } else {
                        -1
                    };
                    if index < 0 || index as usize >= vertices.len() {
                        return Err(Error::format(
                            "obj",
                            format!("line {}: bad vertex index {raw}", lineno + 1),
                        ));
                    }
                    corners.push(index as usize);
                }
                if corners.len() < 3 {
                    return Err(Error::format(
                        "obj",
                        format!("line {}: face needs 3 vertices", lineno + 1),
                    ));
                }
                for k in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangles)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_is_fan_triangulated() {
        let mesh =
            parse_obj("# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n").unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert!((mesh.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_indices_are_relative() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn rejects_out_of_range_index() {
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
