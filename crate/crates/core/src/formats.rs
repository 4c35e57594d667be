//! Little-endian binary file formats.
//!
//! Feature maps (`BFM1`):
//!
//! ```text
//! magic "BFM1" | u32 height | u32 width | u32 channels | u8 flags | 3 zero bytes
//! f32 values[height * width * channels]   (location-major, channel fastest)
//! ```
//! Flag bit 0 marks a rectified map.
//!
//! Descriptors (`BDS1`):
//!
//! ```text
//! magic "BDS1" | u32 dim | u8 stage | 3 zero bytes | f32 values[dim]
//! ```
//!
//! Gallery models (`BGM1`):
//!
//! ```text
//! magic "BGM1" | u32 model count | u32 descriptor dim
//! per model: u16 id length | id bytes (UTF-8) | f32 w[dim] | f32 b | f32 rescale_a | f32 rescale_b
//! ```
//!
//! All values are written as `f32`; in-memory `f64` values are rounded on save.

use std::fs;
use std::path::Path;

use crate::encoder::{BilinearDescriptor, DescriptorStage, FeatureMap};
use crate::error::{Error, Result};
use crate::train::svm::{GalleryModelSet, LinearModel};

pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"BFM1";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"BDS1";
pub const GALLERY_MAGIC: &[u8; 4] = b"BGM1";

/// Largest payload (in values) any of the formats accepts: 2^28 floats, 1 GiB.
pub const MAX_ELEMENTS: u64 = 1 << 28;

const FLAG_RECTIFIED: u8 = 0b1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "{} truncated: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.buf.len() < 4 {
            return Err(Error::Format(format!("{} too short for a header", self.what)));
        }
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Bounds("payload size overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn reserved(&mut self, n: usize) -> Result<()> {
        if self.take(n)?.iter().any(|&b| b != 0) {
            return Err(Error::Format(format!("{}: reserved header bytes are not zero", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Bounds(format!("{what} {v} exceeds u32")))
}

fn push_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn feature_map_to_bytes(map: &FeatureMap) -> Result<Vec<u8>> {
    let elems = map.values().len() as u64;
    if elems > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("{elems} values exceed the format limit")));
    }
    let mut out = Vec::with_capacity(20 + map.values().len() * 4);
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    out.extend_from_slice(&dim_u32(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.width(), "width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.channels(), "channels")?.to_le_bytes());
    out.push(if map.is_rectified() { FLAG_RECTIFIED } else { 0 });
    out.extend_from_slice(&[0, 0, 0]);
    push_f32s(&mut out, map.values().iter().map(|&v| v as f32));
    Ok(out)
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes, "feature map");
    r.magic(FEATURE_MAP_MAGIC)?;
    let h = r.u32()?;
    let w = r.u32()?;
    let c = r.u32()?;
    let flags = r.u8()?;
    r.reserved(3)?;
    if flags & !FLAG_RECTIFIED != 0 {
        return Err(Error::Format(format!("unknown feature map flags {flags:#04x}")));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("zero dimension in header {h}x{w}x{c}")));
    }
    let elems = (h as u64)
        .checked_mul(w as u64)
        .and_then(|v| v.checked_mul(c as u64))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Bounds(format!("header {h}x{w}x{c} exceeds the format limit")))?;
    let vals = r.f32s(elems as usize)?;
    r.finish()?;
    let vals: Vec<f64> = vals.into_iter().map(f64::from).collect();
    let (h, w, c) = (h as usize, w as usize, c as usize);
    if flags & FLAG_RECTIFIED != 0 {
        FeatureMap::rectified(h, w, c, vals)
    } else {
        FeatureMap::new(h, w, c, vals)
    }
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, feature_map_to_bytes(map)?).map_err(|e| Error::io(path, e))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    feature_map_from_bytes(&bytes)
}

fn stage_code(s: DescriptorStage) -> u8 {
    match s {
        DescriptorStage::Raw => 0,
        DescriptorStage::SqrtNormalized => 1,
        DescriptorStage::L2Normalized => 2,
    }
}

pub fn descriptor_to_bytes(d: &BilinearDescriptor) -> Result<Vec<u8>> {
    if d.dim() as u64 > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("descriptor dim {} exceeds the format limit", d.dim())));
    }
    let mut out = Vec::with_capacity(12 + d.dim() * 4);
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&dim_u32(d.dim(), "dim")?.to_le_bytes());
    out.push(stage_code(d.stage));
    out.extend_from_slice(&[0, 0, 0]);
    push_f32s(&mut out, d.values.iter().copied());
    Ok(out)
}

pub fn descriptor_from_bytes(bytes: &[u8]) -> Result<BilinearDescriptor> {
    let mut r = Reader::new(bytes, "descriptor");
    r.magic(DESCRIPTOR_MAGIC)?;
    let dim = r.u32()? as u64;
    let stage = match r.u8()? {
        0 => DescriptorStage::Raw,
        1 => DescriptorStage::SqrtNormalized,
        2 => DescriptorStage::L2Normalized,
        s => return Err(Error::Format(format!("unknown descriptor stage {s}"))),
    };
    r.reserved(3)?;
    if dim == 0 || dim > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("descriptor dim {dim} outside 1..={MAX_ELEMENTS}")));
    }
    let values = r.f32s(dim as usize)?;
    r.finish()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite descriptor value".into()));
    }
    Ok(BilinearDescriptor::new(values, stage))
}

pub fn save_descriptor(d: &BilinearDescriptor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, descriptor_to_bytes(d)?).map_err(|e| Error::io(path, e))
}

pub fn load_descriptor(path: impl AsRef<Path>) -> Result<BilinearDescriptor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    descriptor_from_bytes(&bytes)
}

pub fn gallery_to_bytes(set: &GalleryModelSet) -> Result<Vec<u8>> {
    let dim = set.descriptor_dim();
    if dim as u64 > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("descriptor dim {dim} exceeds the format limit")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(GALLERY_MAGIC);
    out.extend_from_slice(&dim_u32(set.models().len(), "model count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(dim, "descriptor dim")?.to_le_bytes());
    for m in set.models() {
        let id = m.identity_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Bounds(format!("identity id of {} bytes exceeds u16", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        push_f32s(&mut out, m.weights.iter().map(|&v| v as f32));
        push_f32s(
            &mut out,
            [m.bias as f32, m.rescale_a as f32, m.rescale_b as f32],
        );
    }
    Ok(out)
}

pub fn gallery_from_bytes(bytes: &[u8]) -> Result<GalleryModelSet> {
    let mut r = Reader::new(bytes, "gallery model file");
    r.magic(GALLERY_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as u64;
    if dim == 0 || dim > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("descriptor dim {dim} outside 1..={MAX_ELEMENTS}")));
    }
    let dim = dim as usize;
    let mut models = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("identity id is not UTF-8".into()))?
            .to_string();
        let weights = r.f32s(dim)?.into_iter().map(f64::from).collect();
        let bias = r.f32()? as f64;
        let rescale_a = r.f32()? as f64;
        let rescale_b = r.f32()? as f64;
        models.push(LinearModel {
            identity_id: id,
            weights,
            bias,
            rescale_a,
            rescale_b,
        });
    }
    r.finish()?;
    GalleryModelSet::new(models, dim)
}

pub fn save_gallery(set: &GalleryModelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, gallery_to_bytes(set)?).map_err(|e| Error::io(path, e))
}

pub fn load_gallery(path: impl AsRef<Path>) -> Result<GalleryModelSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    gallery_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..h * w * c).map(|_| rng.random::<f32>() as f64 * 4.0).collect();
        FeatureMap::rectified(h, w, c, v).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let m = FeatureMap::rectified(1, 2, 1, vec![1.0, 0.5]).unwrap();
        let b = feature_map_to_bytes(&m).unwrap();
        let mut expect = b"BFM1".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn full_size_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bfm");
        let m = random_map(27, 27, 512, 3);
        save_feature_map(&m, &path).unwrap();
        let back = load_feature_map(&path).unwrap();
        assert_eq!(back, m);
        let a: Vec<u64> = m.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let m = FeatureMap::zeros(4, 4, 3).unwrap();
        let mut b = feature_map_to_bytes(&m).unwrap();
        b.truncate(b.len() - 4); // 47 floats
        assert!(matches!(feature_map_from_bytes(&b), Err(Error::Corrupt(_))));
        let mut extra = feature_map_to_bytes(&m).unwrap();
        extra.push(0);
        assert!(matches!(feature_map_from_bytes(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn zero_payload_accepted() {
        let m = FeatureMap::zeros(4, 4, 3).unwrap();
        let back = feature_map_from_bytes(&feature_map_to_bytes(&m).unwrap()).unwrap();
        assert!(back.values().iter().all(|&v| v == 0.0));
        assert!(back.is_rectified());
    }

    #[test]
    fn bad_magic_and_header_fields() {
        let m = FeatureMap::zeros(1, 1, 1).unwrap();
        let good = feature_map_to_bytes(&m).unwrap();
        let mut bad = good.clone();
        bad[3] = b'2';
        assert!(matches!(feature_map_from_bytes(&bad), Err(Error::Format(_))));
        let mut flags = good.clone();
        flags[16] = 0b10;
        assert!(matches!(feature_map_from_bytes(&flags), Err(Error::Format(_))));
        let mut reserved = good.clone();
        reserved[18] = 1;
        assert!(matches!(feature_map_from_bytes(&reserved), Err(Error::Format(_))));
        assert!(matches!(feature_map_from_bytes(b"BF"), Err(Error::Format(_))));
    }

    #[test]
    fn oversized_header_is_bounds_error() {
        let mut b = b"BFM1".to_vec();
        for d in [u32::MAX, u32::MAX, 4u32] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(feature_map_from_bytes(&b), Err(Error::Bounds(_))));
    }

    #[test]
    fn rectified_flag_is_enforced() {
        let m = FeatureMap::new(1, 1, 1, vec![-1.0]).unwrap();
        let mut b = feature_map_to_bytes(&m).unwrap();
        b[16] = FLAG_RECTIFIED;
        assert!(matches!(feature_map_from_bytes(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn descriptor_round_trip() {
        let d = BilinearDescriptor::new(vec![0.6, -0.8, 0.0], DescriptorStage::L2Normalized);
        let b = descriptor_to_bytes(&d).unwrap();
        assert_eq!(descriptor_from_bytes(&b).unwrap(), d);
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(matches!(descriptor_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn gallery_round_trip_is_bit_exact() {
        let models = vec![
            LinearModel {
                identity_id: "alice".into(),
                weights: vec![0.1, -0.2, 0.3],
                bias: 0.05,
                rescale_a: 0.8,
                rescale_b: -0.6,
            },
            LinearModel {
                identity_id: "bob-\u{e9}".into(),
                weights: vec![1.0, 2.0, 3.0],
                bias: -1.0,
                rescale_a: 1.0,
                rescale_b: 0.0,
            },
        ];
        let set = GalleryModelSet::new(models, 3).unwrap();
        let bytes = gallery_to_bytes(&set).unwrap();
        let back = gallery_from_bytes(&bytes).unwrap();
        assert_eq!(back, set.quantized_f32());
        assert_eq!(gallery_to_bytes(&back).unwrap(), bytes);
        assert!(matches!(
            gallery_from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
    }

    proptest! {
        #[test]
        fn feature_map_bytes_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..6, seed in any::<u64>(), rect in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..h * w * c)
                .map(|_| {
                    let x = f32::from_bits(rng.random::<u32>());
                    let x = if x.is_finite() { x } else { 1.0 };
                    if rect { x.abs() as f64 } else { x as f64 }
                })
                .collect();
            let m = if rect { FeatureMap::rectified(h, w, c, v) } else { FeatureMap::new(h, w, c, v) }.unwrap();
            let bytes = feature_map_to_bytes(&m).unwrap();
            let back = feature_map_from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(feature_map_to_bytes(&back).unwrap(), bytes);
        }
    }
}
