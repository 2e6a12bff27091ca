use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetSpec, PointCloud, RotationMode};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};

/// Canonical surfaces, each roughly spanning `[-1, 1]³` before augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Plane,
        ShapeFamily::Helix,
        ShapeFamily::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Plane => "plane",
            ShapeFamily::Helix => "helix",
            ShapeFamily::Cross => "cross",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn sample(self, n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
        match self {
            // antipodal pairs: exact zero centroid, uniform marginals
            ShapeFamily::Sphere => {
                let mut pts = Vec::with_capacity(n);
                while pts.len() < n {
                    let p = unit_sphere(rng);
                    pts.push(p);
                    if pts.len() < n {
                        pts.push([-p[0], -p[1], -p[2]]);
                    }
                }
                pts
            }
            ShapeFamily::Cube => (0..n)
                .map(|_| {
                    let face = rng.random_range(0..6usize);
                    let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                    match face / 2 {
                        0 => [s, u, v],
                        1 => [u, s, v],
                        _ => [u, v, s],
                    }
                })
                .collect(),
            ShapeFamily::Cylinder => (0..n)
                .map(|_| {
                    // lateral area 4π, each cap π
                    let pick = rng.random_range(0.0..6.0);
                    let theta = rng.random_range(0.0..2.0 * PI);
                    if pick < 4.0 {
                        [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
                    } else {
                        let r = rng.random::<f64>().sqrt();
                        let z = if pick < 5.0 { 1.0 } else { -1.0 };
                        [r * theta.cos(), r * theta.sin(), z]
                    }
                })
                .collect(),
            ShapeFamily::Cone => {
                let lateral = 5f64.sqrt();
                (0..n)
                    .map(|_| {
                        // apex at z=1, unit base at z=-1: lateral area π√5, base π
                        let theta = rng.random_range(0.0..2.0 * PI);
                        let r = rng.random::<f64>().sqrt();
                        if rng.random_range(0.0..lateral + 1.0) < lateral {
                            [r * theta.cos(), r * theta.sin(), 1.0 - 2.0 * r]
                        } else {
                            [r * theta.cos(), r * theta.sin(), -1.0]
                        }
                    })
                    .collect()
            }
            ShapeFamily::Torus => {
                let (big, small) = (0.75, 0.25);
                (0..n)
                    .map(|_| {
                        // area element ∝ (R + r cos φ)
                        let phi = loop {
                            let phi = rng.random_range(0.0..2.0 * PI);
                            if rng.random_range(0.0..big + small) < big + small * phi.cos() {
                                break phi;
                            }
                        };
                        let theta = rng.random_range(0.0..2.0 * PI);
                        let ring = big + small * phi.cos();
                        [ring * theta.cos(), ring * theta.sin(), small * phi.sin()]
                    })
                    .collect()
            }
            ShapeFamily::Plane => (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
                .collect(),
            ShapeFamily::Helix => (0..n)
                .map(|_| {
                    let t: f64 = rng.random();
                    let a = 4.0 * PI * t;
                    [0.6 * a.cos(), 0.6 * a.sin(), 2.0 * t - 1.0]
                })
                .collect(),
            ShapeFamily::Cross => (0..n)
                .map(|_| {
                    let mut p = [0.0; 3];
                    p[rng.random_range(0..3usize)] = rng.random_range(-1.0..1.0);
                    p
                })
                .collect(),
        }
    }
}

fn unit_sphere(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = super::norm(&v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// A class name is a family, optionally followed by `@stretch` which scales
/// the canonical shape along z (used to derive extra classes from the
/// eight families).
fn parse_class(name: &str) -> Result<(ShapeFamily, f64)> {
    let unknown = || Error::Config(format!("unknown class `{name}`"));
    let (family, stretch) = match name.split_once('@') {
        Some((f, s)) => (f, s.parse::<f64>().map_err(|_| unknown())?),
        None => (name, 1.0),
    };
    if !(stretch > 0.0 && stretch.is_finite()) {
        return Err(unknown());
    }
    Ok((ShapeFamily::from_name(family).ok_or_else(unknown)?, stretch))
}

fn rotation(mode: RotationMode, rng: &mut Rng) -> [[f64; 3]; 3] {
    match mode {
        RotationMode::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        RotationMode::Z => {
            let a = rng.random_range(0.0..2.0 * PI);
            let (s, c) = a.sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        }
        RotationMode::So3 => {
            // uniform unit quaternion
            let q: [f64; 4] = loop {
                let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-9 {
                    break q.map(|v| v / n);
                }
            };
            let [w, x, y, z] = q;
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
                [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
                [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
            ]
        }
    }
}

fn sample_cloud(spec: &DatasetSpec, family: ShapeFamily, stretch: f64, label: usize, id: u64, seed: u64) -> Result<PointCloud> {
    let mut rng = rng::stream(seed, Purpose::Sample, &[id]);
    let rot = rotation(spec.rotation, &mut rng);
    let [lo, hi] = spec.scale_range;
    let scale: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..hi) } else { lo });
    let raw: Vec<[f64; 3]> = family
        .sample(spec.points_per_cloud, &mut rng)
        .into_iter()
        .map(|p| {
            let p = [p[0], p[1], p[2] * stretch];
            std::array::from_fn(|r| {
                let rotated = rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2];
                let jitter: f64 = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                rotated * scale[r] + jitter
            })
        })
        .collect();
    PointCloud::from_raw(&raw, label, id)
}

/// All clouds of `spec`, ordered by id. Sample `j` of class `c` has id
/// `c · samples_per_class + j` and its own random stream, so any subset can
/// be regenerated independently.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    let classes = spec.classes.iter().map(|c| parse_class(c)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(classes.len() * spec.samples_per_class);
    for (label, &(family, stretch)) in classes.iter().enumerate() {
        for j in 0..spec.samples_per_class {
            let id = (label * spec.samples_per_class + j) as u64;
            out.push(sample_cloud(spec, family, stretch, label, id, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::norm;

    fn small(classes: &[&str]) -> DatasetSpec {
        DatasetSpec {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            samples_per_class: 3,
            test_per_class: 1,
            points_per_cloud: 64,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn noiseless_sphere_has_equal_norms() {
        let spec = DatasetSpec { noise_sigma: 0.0, scale_range: [1.0, 1.0], rotation: RotationMode::So3, ..small(&["sphere"]) };
        for cloud in generate_synthetic(&spec, 11).unwrap() {
            for p in &cloud.points {
                let r = norm(&[p[0] as f64, p[1] as f64, p[2] as f64]);
                assert!((r - 1.0).abs() < 1e-6, "norm {r}");
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small(&["cube", "torus", "helix"]);
        assert_eq!(generate_synthetic(&spec, 5).unwrap(), generate_synthetic(&spec, 5).unwrap());
        assert_ne!(generate_synthetic(&spec, 5).unwrap(), generate_synthetic(&spec, 6).unwrap());
    }

    #[test]
    fn desk_shape_arithmetic() {
        let spec = DatasetSpec { samples_per_class: 200, test_per_class: 50, ..DatasetSpec::default() };
        let clouds = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(clouds.len(), 1600);
        assert!(clouds.iter().all(|c| c.points.len() == 256));
    }

    #[test]
    fn every_family_normalizes() {
        let names: Vec<&str> = ShapeFamily::ALL.iter().map(|f| f.name()).collect();
        for cloud in generate_synthetic(&small(&names), 3).unwrap() {
            let max = cloud.points.iter().map(|p| norm(&p.map(f64::from))).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_class_is_a_config_error() {
        assert!(matches!(generate_synthetic(&small(&["dodecahedron"]), 1), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(&small(&["cone@-1"]), 1), Err(Error::Config(_))));
        assert!(generate_synthetic(&small(&["cone@1.5"]), 1).is_ok());
    }
}
