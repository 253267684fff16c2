//! FBAG: the little-endian feature-bag container.
//!
//! ```text
//! magic "FBAG" | version u32 | D u32 | N u64 | case_id_len u16 | case_id
//! | N × (slide u16, x i32, y i32) | N·D f32, row-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FBAG";
pub const VERSION: u32 = 1;
/// Fixed header bytes preceding the case id.
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 2;
pub const COORD_RECORD_LEN: usize = 2 + 4 + 4;

/// Position of one instance (patch) at level-0 pixel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchCoord {
    pub slide: u16,
    pub x: i32,
    pub y: i32,
}

/// One case's instances: a coordinate and a `dim`-wide feature row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub case_id: String,
    dim: usize,
    coords: Vec<PatchCoord>,
    features: Vec<f32>,
}

impl FeatureBag {
    /// Builds a bag and checks every invariant.
    pub fn new(
        case_id: impl Into<String>,
        dim: usize,
        coords: Vec<PatchCoord>,
        features: Vec<f32>,
    ) -> Result<Self> {
        let bag = FeatureBag {
            case_id: case_id.into(),
            dim,
            coords,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return Err(Error::InvalidBag(format!("feature dim {} out of range", self.dim)));
        }
        if self.coords.is_empty() {
            return Err(Error::InvalidBag("bag has no instances".into()));
        }
        if self.case_id.len() > u16::MAX as usize {
            return Err(Error::InvalidBag("case id longer than 65535 bytes".into()));
        }
        if self.features.len() != self.coords.len() * self.dim {
            return Err(Error::InvalidBag(format!(
                "{} feature values for {} instances of dim {}",
                self.features.len(),
                self.coords.len(),
                self.dim
            )));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                instance: pos / self.dim,
                column: pos % self.dim,
            });
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::DuplicateCoordinate {
                    slide: c.slide,
                    x: c.x,
                    y: c.y,
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[PatchCoord] {
        &self.coords
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Returns a bag whose instances are reordered so that output row `i` is input row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::InvalidBag("permutation length mismatch".into()));
        }
        let mut coords = Vec::with_capacity(order.len());
        let mut features = Vec::with_capacity(self.features.len());
        for &i in order {
            coords.push(self.coords[i]);
            features.extend_from_slice(self.row(i));
        }
        FeatureBag::new(self.case_id.clone(), self.dim, coords, features)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self.case_id.len()
            + self.len() * COORD_RECORD_LEN
            + self.features.len() * 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.case_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.case_id.as_bytes());
        for c in &self.coords {
            out.extend_from_slice(&c.slide.to_le_bytes());
            out.extend_from_slice(&c.x.to_le_bytes());
            out.extend_from_slice(&c.y.to_le_bytes());
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                what: "header",
                expected: HEADER_LEN as u64,
                actual: total,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                what: "header",
                expected: HEADER_LEN as u64,
                actual: total,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let id_len = u16::from_le_bytes(bytes[20..22].try_into().unwrap()) as u64;

        let expected = (HEADER_LEN as u64)
            .checked_add(id_len)
            .and_then(|v| v.checked_add(n.checked_mul(COORD_RECORD_LEN as u64)?))
            .and_then(|v| v.checked_add(n.checked_mul(dim)?.checked_mul(4)?))
            .ok_or_else(|| Error::InvalidBag(format!("header sizes overflow (N={n}, D={dim})")))?;
        if total < expected {
            return Err(Error::Truncated {
                what: "payload",
                expected,
                actual: total,
            });
        }
        if total > expected {
            return Err(Error::InvalidBag(format!(
                "{} trailing bytes after payload",
                total - expected
            )));
        }

        let mut pos = HEADER_LEN;
        let id_end = pos + id_len as usize;
        let case_id = std::str::from_utf8(&bytes[pos..id_end])
            .map_err(|e| Error::InvalidBag(format!("case id is not UTF-8: {e}")))?
            .to_owned();
        pos = id_end;

        let n = n as usize;
        let mut coords = Vec::with_capacity(n);
        for rec in bytes[pos..pos + n * COORD_RECORD_LEN].chunks_exact(COORD_RECORD_LEN) {
            coords.push(PatchCoord {
                slide: u16::from_le_bytes([rec[0], rec[1]]),
                x: i32::from_le_bytes(rec[2..6].try_into().unwrap()),
                y: i32::from_le_bytes(rec[6..10].try_into().unwrap()),
            });
        }
        pos += n * COORD_RECORD_LEN;

        let features = bytes[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        FeatureBag::new(case_id, dim as usize, coords, features)
    }
}

/// Writes `bag` to `path` through a temporary sibling file and an atomic rename.
pub fn write_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bag.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBag::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::ErrorKind::InvalidInput.into()))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);

    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Concatenates the per-slide bags of one case. Slide indices are reassigned
/// `0..S` in input order; instance order is preserved.
pub fn concat_case(slide_bags: &[FeatureBag]) -> Result<FeatureBag> {
    let first = slide_bags
        .first()
        .ok_or_else(|| Error::InvalidBag("no slide bags to concatenate".into()))?;
    if slide_bags.len() > u16::MAX as usize + 1 {
        return Err(Error::InvalidBag("too many slides for a u16 slide index".into()));
    }
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for (s, bag) in slide_bags.iter().enumerate() {
        if bag.dim != first.dim {
            return Err(Error::InvalidBag(format!(
                "mixed feature dims: {} and {}",
                first.dim, bag.dim
            )));
        }
        if bag.case_id != first.case_id {
            return Err(Error::InvalidBag(format!(
                "mixed case ids: {:?} and {:?}",
                first.case_id, bag.case_id
            )));
        }
        coords.extend(bag.coords.iter().map(|c| PatchCoord {
            slide: s as u16,
            ..*c
        }));
        features.extend_from_slice(&bag.features);
    }
    FeatureBag::new(first.case_id.clone(), first.dim, coords, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(case_id: &str, dim: usize, n: usize, seed: f32) -> FeatureBag {
        let coords = (0..n)
            .map(|i| PatchCoord {
                slide: 0,
                x: (i as i32) * 224,
                y: 0,
            })
            .collect();
        let features = (0..n * dim).map(|i| seed + i as f32 * 0.25).collect();
        FeatureBag::new(case_id, dim, coords, features).unwrap()
    }

    #[test]
    fn encoded_size_follows_layout() {
        // 22 fixed header bytes + 2-byte id, 10 bytes per coordinate record, 4 per feature
        let b = bag("c1", 1024, 3, 0.0);
        let bytes = b.to_bytes().unwrap();
        assert_eq!(bytes.len(), 24 + 3 * (2 + 4 + 4) + 3 * 1024 * 4);
        assert_eq!(bytes.len(), 12_342);
    }

    #[test]
    fn accepts_encoder_dims() {
        for dim in [1024, 512] {
            let b = bag("case", dim, 1, 1.0);
            assert_eq!(FeatureBag::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = bag("c", 4, 2, 0.0).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            FeatureBag::from_bytes(&bytes),
            Err(Error::BadMagic { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = bag("c", 4, 2, 0.0).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            FeatureBag::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = bag("c", 8, 4, 0.0).to_bytes().unwrap();
        let full = bytes.len() as u64;
        // cut inside the feature matrix
        let cut = bytes.len() - 37;
        match FeatureBag::from_bytes(&bytes[..cut]) {
            Err(Error::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, cut as u64);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_nan_and_duplicates() {
        let mut bytes = bag("c", 2, 2, 0.0).to_bytes().unwrap();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureBag::from_bytes(&bytes),
            Err(Error::NonFiniteFeature {
                instance: 1,
                column: 1
            })
        ));

        let coords = vec![PatchCoord { slide: 0, x: 1, y: 2 }; 2];
        assert!(matches!(
            FeatureBag::new("c", 1, coords, vec![0.0, 1.0]),
            Err(Error::DuplicateCoordinate { slide: 0, x: 1, y: 2 })
        ));
    }

    #[test]
    fn concat_adds_instances_and_reassigns_slides() {
        let out = concat_case(&[bag("p", 3, 3, 0.0), bag("p", 3, 5, 10.0)]).unwrap();
        assert_eq!(out.len(), 8);

        let three: Vec<_> = (0..3).map(|s| bag("q", 512, 2, s as f32)).collect();
        let out = concat_case(&three).unwrap();
        assert_eq!(out.len(), 6);
        let slides: Vec<u16> = out.coords().iter().map(|c| c.slide).collect();
        assert_eq!(slides, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(out.row(2), three[1].row(0));
    }

    #[test]
    fn concat_single_bag_rewrites_slide() {
        let coords = vec![PatchCoord { slide: 7, x: 0, y: 0 }];
        let b = FeatureBag::new("one", 2, coords, vec![1.0, 2.0]).unwrap();
        let out = concat_case(std::slice::from_ref(&b)).unwrap();
        assert_eq!(out.coords()[0].slide, 0);
        assert_eq!(out.features(), b.features());
    }

    #[test]
    fn concat_rejects_mixed_inputs() {
        assert!(concat_case(&[bag("a", 3, 1, 0.0), bag("a", 4, 1, 0.0)]).is_err());
        assert!(concat_case(&[bag("a", 3, 1, 0.0), bag("b", 3, 1, 0.0)]).is_err());
        assert!(concat_case(&[]).is_err());
    }

    #[test]
    fn write_is_atomic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fbag");
        let b = bag("c", 16, 5, 3.0);
        write_bag(&b, &path).unwrap();
        assert_eq!(read_bag(&path).unwrap(), b);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
