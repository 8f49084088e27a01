use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CCF1";

/// A `G×G` grid of `C`-dimensional cells stored row-major by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SpatialGrid {
    pub fn new(grid: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid * grid * channels {
            return Err(Error::Dimension {
                op: "spatial_grid",
                lhs: vec![grid, grid, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Precomputed image features: a global vector and an optional spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub global: Vec<f64>,
    pub spatial: Option<SpatialGrid>,
}

impl ImageFeatures {
    /// Index of the first non-finite value, counting global then spatial.
    pub fn first_non_finite(&self) -> Option<usize> {
        let spatial = self.spatial.as_ref().map_or(&[][..], |s| &s.data[..]);
        self.global.iter().chain(spatial).position(|v| !v.is_finite())
    }
}

pub type FeatureSet = BTreeMap<String, ImageFeatures>;

/// Writes features in the `CCF1` layout. All images must share one shape.
pub fn write_features(features: &FeatureSet, path: &Path) -> Result<()> {
    let first = features.values().next();
    let f = first.map_or(0, |x| x.global.len());
    let (g, c) = first
        .and_then(|x| x.spatial.as_ref())
        .map_or((0, 0), |s| (s.grid, s.channels));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [features.len(), f, g, c] {
        buf.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
    }
    for (id, feat) in features {
        let shape_ok = feat.global.len() == f
            && match &feat.spatial {
                Some(s) => s.grid == g && s.channels == c && g > 0,
                None => g == 0,
            };
        if !shape_ok {
            return Err(Error::InvalidArgument(format!(
                "image {id} does not match the shared feature shape F={f} G={g} C={c}"
            )));
        }
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidArgument(format!("image id too long: {id}")))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        let spatial = feat.spatial.as_ref().map_or(&[][..], |s| &s.data[..]);
        for v in feat.global.iter().chain(spatial) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Reads a `CCF1` file. Any inconsistency rejects the whole file.
pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path)?;
    parse_features(&bytes)
}

pub(crate) fn parse_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let count = cur.u32("count")?;
    let f = cur.u32("F")?;
    let g = cur.u32("G")?;
    let c = cur.u32("C")?;
    if (g == 0) != (c == 0) {
        return Err(Error::Format {
            offset: 12,
            msg: format!("inconsistent spatial header G={g} C={c}"),
        });
    }
    let mut out = FeatureSet::new();
    for _ in 0..count {
        let id_at = cur.pos;
        let id_len = {
            let b = cur.take(2, "id length")?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let id = std::str::from_utf8(cur.take(id_len, "image id")?)
            .map_err(|_| Error::Format {
                offset: id_at + 2,
                msg: "image id is not UTF-8".into(),
            })?
            .to_string();
        let global = cur.floats(f, "global features")?;
        let spatial = if g > 0 {
            Some(SpatialGrid::new(g, c, cur.floats(g * g * c, "spatial features")?)?)
        } else {
            None
        };
        if out.insert(id.clone(), ImageFeatures { global, spatial }).is_some() {
            return Err(Error::Format {
                offset: id_at,
                msg: format!("duplicate image id {id}"),
            });
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: format!("{} trailing bytes beyond header count", bytes.len() - cur.pos),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(f: usize, g: usize, c: usize) -> FeatureSet {
        let mut m = FeatureSet::new();
        for (k, id) in ["img_a", "img_b"].iter().enumerate() {
            let global = (0..f).map(|i| (i as f64 * 0.25 - k as f64).sin() as f32 as f64).collect();
            let spatial = (g > 0).then(|| {
                SpatialGrid::new(g, c, (0..g * g * c).map(|i| (i % 7) as f64 * 0.5).collect()).unwrap()
            });
            m.insert(id.to_string(), ImageFeatures { global, spatial });
        }
        m
    }

    #[test]
    fn two_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ccf");
        let m = sample(5, 2, 3);
        write_features(&m, &p).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let bytes = fs::read(&p).unwrap();
        write_features(&read_features(&p).unwrap(), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn full_size_dimensions_accepted() {
        let m = sample(4096, 7, 512);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ccf");
        write_features(&m, &p).unwrap();
        let back = read_features(&p).unwrap();
        let s = back["img_a"].spatial.as_ref().unwrap();
        assert_eq!((back["img_a"].global.len(), s.grid, s.channels), (4096, 7, 512));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0; 16]);
        assert!(matches!(parse_features(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ccf");
        write_features(&sample(3, 0, 0), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        match parse_features(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 20 && offset < cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ccf");
        write_features(&sample(3, 0, 0), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        // claim F=2 instead of 3: payload no longer lines up
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(parse_features(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn mixed_shapes_are_refused_on_write() {
        let mut m = sample(3, 0, 0);
        m.get_mut("img_b").unwrap().global.push(1.0);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_features(&m, &dir.path().join("f.ccf")).is_err());
    }
}
