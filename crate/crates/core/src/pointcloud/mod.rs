//! Labeled point clouds: synthetic shape families, mesh ingestion and the
//! unit-sphere normalization applied to every cloud.

mod cache;
mod mesh;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix64;

pub use cache::{read_cache, write_cache, CACHE_MAGIC};
pub use mesh::{load_mesh_dataset, parse_off, parse_xyz, sample_surface, TriMesh};
pub use synthetic::{generate_synthetic, ShapeFamily};

/// Smallest cloud for which a 3-nearest-neighbor graph exists.
pub const MIN_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
    pub id: u64,
}

impl PointCloud {
    /// Normalizes `raw` into a cloud.
    pub fn from_raw(raw: &[[f64; 3]], label: usize, id: u64) -> Result<Self> {
        if raw.len() < MIN_POINTS {
            return Err(Error::Domain(format!("cloud {id} has {} points, need at least {MIN_POINTS}", raw.len())));
        }
        let points = normalize_unit_sphere(raw)?
            .into_iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect();
        Ok(PointCloud { points, label, id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `N×3` coordinates.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Centers on the centroid and divides by the largest resulting norm.
pub fn normalize_unit_sphere(points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Err(Error::Domain("cannot normalize an empty point set".into()));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        (0..3).for_each(|d| c[d] += p[d]);
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centered: Vec<[f64; 3]> = points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Domain("point set has zero spread".into()));
    }
    Ok(centered.iter().map(|p| [p[0] / radius, p[1] / radius, p[2] / radius]).collect())
}

pub(crate) fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// How random rotations are drawn for synthetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    /// About the vertical axis only, as for upright CAD models.
    #[default]
    Z,
    /// Uniform over all of SO(3).
    So3,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    /// Clouds generated per class, test ones included.
    pub samples_per_class: usize,
    /// Of those, how many per class go to the test split.
    pub test_per_class: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    /// Per-axis scale factors are drawn uniformly from this range.
    pub scale_range: [f64; 2],
    #[serde(default)]
    pub rotation: RotationMode,
    /// Directory of `<class>/*.off|*.xyz` meshes; replaces synthetic shapes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_dir: Option<std::path::PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: ShapeFamily::ALL.iter().map(|f| f.name().to_owned()).collect(),
            samples_per_class: 250,
            test_per_class: 50,
            points_per_cloud: 256,
            noise_sigma: 0.01,
            scale_range: [0.7, 1.3],
            rotation: RotationMode::Z,
            mesh_dir: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset.{m}")));
        if self.classes.is_empty() {
            return bad("classes must not be empty");
        }
        if self.points_per_cloud < MIN_POINTS {
            return bad("points_per_cloud must be at least 4");
        }
        if self.samples_per_class == 0 || self.test_per_class >= self.samples_per_class {
            return bad("test_per_class must be smaller than samples_per_class");
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("scale_range must satisfy 0 < min <= max");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub num_classes: usize,
}

/// Per class, the `test_per_class` samples with the smallest id hash form
/// the test split. Both splits keep id order.
pub fn split_train_test(clouds: Vec<PointCloud>, num_classes: usize, test_per_class: usize) -> Dataset {
    let mut test_ids = std::collections::HashSet::new();
    for class in 0..num_classes {
        let mut ids: Vec<u64> = clouds.iter().filter(|c| c.label == class).map(|c| c.id).collect();
        ids.sort_by_key(|&id| (mix64(id), id));
        test_ids.extend(ids.into_iter().take(test_per_class));
    }
    let (mut test, mut train): (Vec<_>, Vec<_>) = clouds.into_iter().partition(|c| test_ids.contains(&c.id));
    train.sort_by_key(|c| c.id);
    test.sort_by_key(|c| c.id);
    Dataset { train, test, num_classes }
}

/// Builds the full dataset described by `spec` from the data seed.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let clouds = match &spec.mesh_dir {
        Some(dir) => load_mesh_dataset(dir, spec, seed)?,
        None => generate_synthetic(spec, seed)?,
    };
    Ok(split_train_test(clouds, spec.classes.len(), spec.test_per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_example() {
        let out = normalize_unit_sphere(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(out, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn zero_spread_is_rejected() {
        assert!(normalize_unit_sphere(&[[1.0, 2.0, 3.0]; 5]).is_err());
        assert!(normalize_unit_sphere(&[]).is_err());
    }

    #[test]
    fn tiny_clouds_are_rejected() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(PointCloud::from_raw(&pts, 0, 0).is_err());
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 2..64)
            .prop_filter("needs spread", |p| p.iter().any(|q| q != &p[0]))
    }

    proptest! {
        #[test]
        fn normalized_clouds_sit_in_unit_ball(pts in cloud()) {
            let out = normalize_unit_sphere(&pts).unwrap();
            let max = out.iter().map(norm).fold(0.0, f64::max);
            prop_assert!((max - 1.0).abs() < 1e-6);
            let mut c = [0.0; 3];
            out.iter().for_each(|p| (0..3).for_each(|d| c[d] += p[d] / out.len() as f64));
            prop_assert!(norm(&c) < 1e-6);
        }

        #[test]
        fn normalization_is_idempotent(pts in cloud()) {
            let once = normalize_unit_sphere(&pts).unwrap();
            let twice = normalize_unit_sphere(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                for d in 0..3 {
                    prop_assert!((a[d] - b[d]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn split_is_exact_per_class_and_deterministic() {
        let clouds: Vec<PointCloud> = (0..40)
            .map(|id| PointCloud { points: vec![[0.0; 3]; 4], label: (id / 10) as usize, id })
            .collect();
        let a = split_train_test(clouds.clone(), 4, 3);
        let b = split_train_test(clouds, 4, 3);
        assert_eq!(a, b);
        assert_eq!(a.test.len(), 12);
        assert_eq!(a.train.len(), 28);
        for class in 0..4 {
            assert_eq!(a.test.iter().filter(|c| c.label == class).count(), 3);
        }
    }
}
