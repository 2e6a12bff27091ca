use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::{DatasetSpec, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    fn area(&self, f: &[usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * super::norm(&cross)
    }

    pub fn areas(&self) -> Vec<f64> {
        self.faces.iter().map(|f| self.area(f)).collect()
    }
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

/// Content lines with their 1-based line numbers; comments and blanks dropped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn numbers<T: std::str::FromStr>(line: usize, text: &str, want: usize, what: &str) -> Result<Vec<T>> {
    let vals: Vec<T> = text
        .split_whitespace()
        .take(want)
        .map(|t| t.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what} value `{t}`") }))
        .collect::<Result<_>>()?;
    if vals.len() < want {
        return parse_err(line, format!("{what} line needs {want} values"));
    }
    Ok(vals)
}

/// Parses an ASCII OFF mesh. Polygon faces are fan-triangulated; trailing
/// per-vertex or per-face color values are ignored.
pub fn parse_off(bytes: &[u8]) -> Result<TriMesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse { line: 0, msg: format!("not UTF-8: {e}") })?;
    let mut lines = content_lines(text);
    let Some((hline, header)) = lines.next() else {
        return parse_err(1, "empty file");
    };
    let Some(rest) = header.strip_prefix("OFF") else {
        return parse_err(hline, "missing OFF header");
    };
    // some exporters put the counts on the header line ("OFF490 518 0")
    let (cline, counts) = if rest.trim().is_empty() {
        lines.next().ok_or(Error::Parse { line: hline + 1, msg: "missing counts line".into() })?
    } else {
        (hline, rest.trim())
    };
    let counts: Vec<usize> = numbers(cline, counts, 2, "count")?;
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    let mut last = cline;
    for _ in 0..nv {
        let Some((ln, l)) = lines.next() else {
            return parse_err(last + 1, format!("truncated: expected {nv} vertices, found {}", vertices.len()));
        };
        let v: Vec<f64> = numbers(ln, l, 3, "vertex")?;
        vertices.push([v[0], v[1], v[2]]);
        last = ln;
    }
    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let Some((ln, l)) = lines.next() else {
            return parse_err(last + 1, format!("truncated: expected {nf} faces, found {f}"));
        };
        let arity: Vec<usize> = numbers(ln, l, 1, "face")?;
        let idx: Vec<usize> = numbers(ln, l, arity[0] + 1, "face")?;
        let idx = &idx[1..];
        if idx.len() < 3 {
            return parse_err(ln, format!("face with {} vertices", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return parse_err(ln, format!("vertex index {bad} out of range ({nv} vertices)"));
        }
        for w in 1..idx.len() - 1 {
            faces.push([idx[0], idx[w], idx[w + 1]]);
        }
        last = ln;
    }
    Ok(TriMesh { vertices, faces })
}

/// Parses whitespace-separated `x y z` lines.
pub fn parse_xyz(bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse { line: 0, msg: format!("not UTF-8: {e}") })?;
    content_lines(text)
        .map(|(ln, l)| numbers::<f64>(ln, l, 3, "point").map(|v| [v[0], v[1], v[2]]))
        .collect()
}

/// Draws `n` points uniformly over the surface: triangles by area, then a
/// uniform barycentric point inside. Returns raw (unnormalized) coordinates.
pub fn sample_surface(mesh: &TriMesh, n: usize, rng: &mut Rng) -> Result<Vec<[f64; 3]>> {
    let areas = mesh.areas();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut total = 0.0;
    for a in &areas {
        total += a;
        cdf.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Domain("mesh has no triangle with positive area".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random_range(0.0..total);
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.faces[t].map(|i| mesh.vertices[i]);
            let s = rng.random::<f64>().sqrt();
            let r: f64 = rng.random();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r), s * r);
            std::array::from_fn(|d| wa * a[d] + wb * b[d] + wc * c[d])
        })
        .collect())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if matches!(path.extension().and_then(|e| e.to_str()), Some("off" | "xyz")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads `<dir>/<class>/**/*.{off,xyz}` in sorted path order. Meshes are
/// surface-sampled; point lists are subsampled (or resampled with
/// replacement when short) to `points_per_cloud`.
pub fn load_mesh_dataset(dir: &Path, spec: &DatasetSpec, seed: u64) -> Result<Vec<PointCloud>> {
    let n = spec.points_per_cloud;
    let mut out = Vec::new();
    let mut id = 0u64;
    for (label, class) in spec.classes.iter().enumerate() {
        let class_dir = dir.join(class);
        if !class_dir.is_dir() {
            return Err(Error::Config(format!("dataset.mesh_dir has no directory for class `{class}`")));
        }
        let mut files = Vec::new();
        collect_files(&class_dir, &mut files)?;
        files.sort();
        for path in files {
            let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
            let mut rng = rng::stream(seed, Purpose::MeshSample, &[id]);
            let with_path = |e: Error| Error::Config(format!("{}: {e}", path.display()));
            let raw = if path.extension().is_some_and(|e| e == "off") {
                sample_surface(&parse_off(&bytes).map_err(with_path)?, n, &mut rng).map_err(with_path)?
            } else {
                let pts = parse_xyz(&bytes).map_err(with_path)?;
                if pts.is_empty() {
                    return Err(with_path(Error::Domain("empty point list".into())));
                }
                if pts.len() >= n {
                    rand::seq::index::sample(&mut rng, pts.len(), n).into_iter().map(|i| pts[i]).collect()
                } else {
                    (0..n).map(|_| pts[rng.random_range(0..pts.len())]).collect()
                }
            };
            out.push(PointCloud::from_raw(&raw, label, id)?);
            id += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

    #[test]
    fn minimal_off() {
        let m = parse_off(MINIMAL.as_bytes()).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn quad_is_fan_triangulated() {
        let src = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert_eq!(parse_off(src.as_bytes()).unwrap().faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn counts_on_header_line_and_comments() {
        let src = "OFF3 1 0\n# a comment\n0 0 0\n1 0 0\n\n0 1 0\n3 0 1 2 255 0 0\n";
        assert_eq!(parse_off(src.as_bytes()).unwrap().faces.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad_index = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n";
        assert!(matches!(parse_off(bad_index.as_bytes()), Err(Error::Parse { line: 6, .. })));
        let truncated = "OFF\n3 1 0\n0 0 0\n1 0 0\n";
        assert!(matches!(parse_off(truncated.as_bytes()), Err(Error::Parse { line: 5, .. })));
        assert!(matches!(parse_off(b"PLY\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_off(b"OFF\n3 x 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_off(b"OFF\n3 1 0\n0 0 0\n1 0\n"), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn xyz_points() {
        let pts = parse_xyz(b"0 0 0\n1 2 3\n# c\n4 5 6 extra\n").unwrap();
        assert_eq!(pts, vec![[0., 0., 0.], [1., 2., 3.], [4., 5., 6.]]);
        assert!(parse_xyz(b"1 2\n").is_err());
    }

    #[test]
    fn single_triangle_samples_are_planar() {
        let m = TriMesh { vertices: vec![[0., 0., 1.], [2., 0., 3.], [0., 5., -1.]], faces: vec![[0, 1, 2]] };
        let mut rng = rng::stream(1, Purpose::MeshSample, &[0]);
        // plane through the three vertices: normal = (b-a)x(c-a)
        let (u, v) = ([2., 0., 2.], [0., 5., -2.]);
        let nrm = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        for p in sample_surface(&m, 500, &mut rng).unwrap() {
            let d = nrm[0] * p[0] + nrm[1] * p[1] + nrm[2] * (p[2] - 1.0);
            assert!(d.abs() / crate::pointcloud::norm(&nrm) < 1e-6);
        }
    }

    #[test]
    fn degenerate_mesh_is_a_domain_error() {
        let m = TriMesh { vertices: vec![[0., 0., 0.], [1., 1., 1.], [2., 2., 2.]], faces: vec![[0, 1, 2]] };
        let mut rng = rng::stream(1, Purpose::MeshSample, &[0]);
        assert!(matches!(sample_surface(&m, 10, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn sample_count_matches_request() {
        let m = parse_off(MINIMAL.as_bytes()).unwrap();
        let mut rng = rng::stream(1, Purpose::MeshSample, &[0]);
        let raw = sample_surface(&m, 1024, &mut rng).unwrap();
        let cloud = PointCloud::from_raw(&raw, 0, 0).unwrap();
        assert_eq!(cloud.points.len(), 1024);
    }
}
