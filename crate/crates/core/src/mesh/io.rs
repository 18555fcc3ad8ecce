use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "obj" => Some(MeshFormat::Obj),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MeshFormat::Off => "off",
            MeshFormat::Obj => "obj",
        }
    }
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::Off => parse_off(&text),
        MeshFormat::Obj => parse_obj(&text),
    }
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let text = match format {
        MeshFormat::Off => write_off(mesh),
        MeshFormat::Obj => write_obj(mesh),
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid number `{tok}`")))
}

fn fan(poly: &[usize]) -> Result<Vec<[usize; 3]>> {
    if poly.len() < 3 {
        return Err(Error::NonTriangle(poly.len()));
    }
    Ok((1..poly.len() - 1).map(|i| [poly[0], poly[i], poly[i + 1]]).collect())
}

pub(crate) fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut rest_of_header: Vec<&str> = header.split_whitespace().collect();
    if rest_of_header.first() != Some(&"OFF") {
        return Err(parse_err(ln, "missing OFF header"));
    }
    rest_of_header.remove(0);
    let (ln, counts) = if rest_of_header.is_empty() {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(ln, "missing counts line"))?;
        (ln, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (ln, rest_of_header)
    };
    if counts.len() < 2 {
        return Err(parse_err(ln, "counts line needs vertex and face counts"));
    }
    let n: usize = counts[0].parse().map_err(|_| parse_err(ln, "bad vertex count"))?;
    let m: usize = counts[1].parse().map_err(|_| parse_err(ln, "bad face count"))?;

    let mut vertices: Vec<Point> = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(ln, "unexpected end of vertex block"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(ln, "vertex line needs three coordinates"));
        }
        vertices.push([parse_f64(toks[0], ln)?, parse_f64(toks[1], ln)?, parse_f64(toks[2], ln)?]);
    }
    let mut faces = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(ln, "unexpected end of face block"))?;
        let toks: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(ln, format!("invalid index `{t}`"))))
            .collect::<Result<_>>()?;
        let (&count, rest) = toks.split_first().ok_or_else(|| parse_err(ln, "empty face line"))?;
        if rest.len() < count {
            return Err(parse_err(ln, format!("face declares {count} vertices, found {}", rest.len())));
        }
        for &i in &rest[..count] {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, count: n });
            }
        }
        faces.extend(fan(&rest[..count])?);
    }
    Mesh::new(vertices, faces)
}

fn obj_index(tok: &str, n: usize, line: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let raw: i64 = head
        .parse()
        .map_err(|_| parse_err(line, format!("invalid face index `{tok}`")))?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        n as i64 + raw
    } else {
        return Err(parse_err(line, "OBJ indices are 1-based; found 0"));
    };
    if idx < 0 || idx as usize >= n {
        return Err(Error::IndexOutOfRange {
            index: idx.max(0) as usize,
            count: n,
        });
    }
    Ok(idx as usize)
}

pub(crate) fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices: Vec<Point> = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(ln, "vertex line needs three coordinates"));
                }
                vertices.push([parse_f64(c[0], ln)?, parse_f64(c[1], ln)?, parse_f64(c[2], ln)?]);
            }
            Some("f") => {
                let poly = toks
                    .map(|t| obj_index(t, vertices.len(), ln))
                    .collect::<Result<Vec<_>>>()?;
                faces.extend(fan(&poly)?);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

fn write_off(mesh: &Mesh) -> String {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.vertex_count(), mesh.face_count()).unwrap();
    for p in mesh.vertices() {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for p in mesh.vertices() {
        writeln!(s, "v {} {} {}", p[0], p[1], p[2]).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    const OFF_TRI: &str = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

    #[test]
    fn minimal_off() {
        let m = parse_off(OFF_TRI).unwrap();
        assert_eq!((m.vertex_count(), m.face_count()), (3, 1));
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn obj_equals_off() {
        let obj = "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n";
        assert_eq!(parse_obj(obj).unwrap(), parse_off(OFF_TRI).unwrap());
        let slashed = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 -1//3\n";
        assert_eq!(parse_obj(slashed).unwrap(), parse_off(OFF_TRI).unwrap());
    }

    #[test]
    fn obj_quad_is_fan_triangulated() {
        let obj = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let m = parse_obj(obj).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "OFF\n3 1 0\n0 0 0\n1 zero 0\n0 1 0\n3 0 1 2\n";
        assert!(matches!(parse_off(bad), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), Err(Error::IndexOutOfRange { index: 7, .. })));
        assert!(matches!(parse_obj("v 0 0 0\nv 1 0 0\nf 1 2\n"), Err(Error::NonTriangle(2))));
        assert!(matches!(parse_obj("v 0 0 0\nf 1 2 3\n"), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(parse_off("PLY\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::icosphere(1.0, 3);
        for fmt in [MeshFormat::Off, MeshFormat::Obj] {
            let path = dir.path().join(format!("s.{}", fmt.extension()));
            save_mesh(&m, &path, fmt).unwrap();
            let back = load_mesh(&path, fmt).unwrap();
            assert_eq!(back.faces(), m.faces());
            let dev = back
                .vertices()
                .iter()
                .zip(m.vertices())
                .flat_map(|(a, b)| (0..3).map(move |d| (a[d] - b[d]).abs()))
                .fold(0.0, f64::max);
            assert!(dev < 1e-9);
        }
    }

    #[test]
    fn unwritable_path() {
        let m = parse_off(OFF_TRI).unwrap();
        let r = save_mesh(&m, "/nonexistent-dir/x/y.off", MeshFormat::Off);
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
