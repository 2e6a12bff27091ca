//! Dataset cache, one file per split. Little-endian throughout:
//!
//! ```text
//! magic   8 bytes   "BGNNDS01"
//! count   u32       number of clouds S
//! points  u32       points per cloud N
//! coords  S·N·3 f32 cloud-major, then point, then x/y/z
//! labels  S i32
//! ids     S u64
//! ```

use std::io::{Read, Write};

use super::PointCloud;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"BGNNDS01";

pub fn write_cache<W: Write>(clouds: &[PointCloud], mut w: W) -> Result<()> {
    let n = clouds.first().map_or(0, PointCloud::len);
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("cache requires equal point counts".into()));
    }
    let mut buf = Vec::with_capacity(16 + clouds.len() * (n * 12 + 12));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(clouds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for c in clouds {
        for v in c.points.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for c in clouds {
        buf.extend_from_slice(&(c.label as i32).to_le_bytes());
    }
    for c in clouds {
        buf.extend_from_slice(&c.id.to_le_bytes());
    }
    w.write_all(&buf).map_err(Error::io("<cache>"))
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Vec<PointCloud>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(Error::io("<cache>"))?;
    let bad = |m: &str| Error::Parse { line: 0, msg: format!("dataset cache: {m}") };
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (count, n) = (word(8), word(12));
    let expected = 16 + count * (n * 12 + 4 + 8);
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let f = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let labels_at = 16 + count * n * 12;
    let ids_at = labels_at + count * 4;
    (0..count)
        .map(|s| {
            let base = 16 + s * n * 12;
            let points = (0..n).map(|p| std::array::from_fn(|d| f(base + (p * 3 + d) * 4))).collect();
            let label = i32::from_le_bytes(bytes[labels_at + s * 4..labels_at + s * 4 + 4].try_into().unwrap());
            let label = usize::try_from(label).map_err(|_| bad("negative label"))?;
            let id = u64::from_le_bytes(bytes[ids_at + s * 8..ids_at + s * 8 + 8].try_into().unwrap());
            Ok(PointCloud { points, label, id })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(coords in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 24), labels in prop::collection::vec(0usize..40, 2)) {
            let clouds: Vec<PointCloud> = coords
                .chunks(12)
                .zip(&labels)
                .enumerate()
                .map(|(i, (c, &l))| PointCloud { points: c.chunks(3).map(|p| [p[0], p[1], p[2]]).collect(), label: l, id: 100 + i as u64 })
                .collect();
            let mut bytes = Vec::new();
            write_cache(&clouds, &mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), 16 + 2 * (4 * 12 + 12));
            prop_assert_eq!(read_cache(&bytes[..]).unwrap(), clouds);
        }
    }

    #[test]
    fn truncated_cache_is_rejected() {
        let c = PointCloud { points: vec![[0.0; 3]; 4], label: 1, id: 0 };
        let mut bytes = Vec::new();
        write_cache(&[c], &mut bytes).unwrap();
        assert!(read_cache(&bytes[..bytes.len() - 1]).is_err());
    }
}
