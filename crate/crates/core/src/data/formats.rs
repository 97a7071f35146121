//! Sequence containers and their little-endian binary files.
//!
//! Silhouette: `CGSL`, u16 version, u32 T, u32 H, u32 W, then T·H·W bytes
//! each 0 or 255. SMPL: `CGSM`, u16 version, u32 T, u32 D, then T·D f32.

use std::path::Path;

use crate::error::{Error, Result};

pub const SIL_MAGIC: &[u8; 4] = b"CGSL";
pub const SMPL_MAGIC: &[u8; 4] = b"CGSM";
pub const FORMAT_VERSION: u16 = 1;
pub const SMPL_DIM: usize = 82;
pub const POSE_DIM: usize = 69;
pub const SHAPE_DIM: usize = 10;
pub const ROOT_DIM: usize = 3;

/// `T` binary masks of `H×W`, stored 0/1 row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SilhouetteSequence {
    frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl SilhouetteSequence {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::validation("silhouette sequence needs positive T, H, W"));
        }
        if pixels.len() != frames * height * width {
            return Err(Error::validation(format!(
                "{} pixels for {frames}x{height}x{width}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|&p| p > 1) {
            return Err(Error::validation(format!("pixel {i} = {} is not binary", pixels[i])));
        }
        Ok(Self {
            frames,
            height,
            width,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn foreground(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&p| p == 1).count()
    }

    /// Every frame has at least one foreground pixel.
    pub fn validate(&self) -> Result<()> {
        match (0..self.frames).find(|&t| self.foreground(t) == 0) {
            Some(t) => Err(Error::validation(format!("frame {t} is empty"))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.pixels.len());
        out.extend_from_slice(SIL_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.pixels.iter().map(|&p| p * 255));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(SIL_MAGIC)?;
        r.version()?;
        let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::format(6, format!("empty geometry {t}x{h}x{w}")));
        }
        let start = r.pos;
        let raw = r.take(t * h * w)?;
        let mut pixels = Vec::with_capacity(raw.len());
        for (i, &b) in raw.iter().enumerate() {
            pixels.push(match b {
                0 => 0,
                255 => 1,
                _ => return Err(Error::format((start + i) as u64, format!("pixel byte {b} is neither 0 nor 255"))),
            });
        }
        r.finish()?;
        Self::new(t, h, w, pixels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `T` SMPL vectors: 69 pose, 10 shape, 3 root-orientation values.
#[derive(Clone, Debug, PartialEq)]
pub struct SmplSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl SmplSequence {
    pub fn new(frames: usize, values: Vec<f32>) -> Result<Self> {
        Self::with_dim(frames, SMPL_DIM, values)
    }

    pub fn with_dim(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 || values.len() != frames * dim {
            return Err(Error::validation(format!("{} values for {frames} frames of {dim}", values.len())));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn pose(&self, t: usize) -> &[f32] {
        &self.frame(t)[..POSE_DIM]
    }

    pub fn shape(&self, t: usize) -> &[f32] {
        &self.frame(t)[POSE_DIM..POSE_DIM + SHAPE_DIM]
    }

    pub fn root(&self, t: usize) -> &[f32] {
        &self.frame(t)[POSE_DIM + SHAPE_DIM..SMPL_DIM]
    }

    /// 82 values per frame, every axis-angle component within ±π.
    pub fn validate(&self) -> Result<()> {
        if self.dim != SMPL_DIM {
            return Err(Error::validation(format!("SMPL dimension {} != {SMPL_DIM}", self.dim)));
        }
        for t in 0..self.frames {
            let bad = self.pose(t).iter().chain(self.root(t)).any(|v| v.abs() > std::f32::consts::PI);
            if bad {
                return Err(Error::validation(format!("frame {t} has an axis-angle component beyond pi")));
            }
            if !self.frame(t).iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!("frame {t} is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.values.len());
        out.extend_from_slice(SMPL_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(SMPL_MAGIC)?;
        r.version()?;
        let (t, d) = (r.u32()? as usize, r.u32()? as usize);
        if t == 0 || d == 0 {
            return Err(Error::format(6, format!("empty geometry {t}x{d}")));
        }
        let raw = r.take(t * d * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.finish()?;
        Self::with_dim(t, d, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::format(0, "truncated magic"))?;
        if got != want {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want)),
            ));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos as u64, "trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SilhouetteSequence {
        SilhouetteSequence::new(2, 2, 3, vec![0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0]).unwrap()
    }

    #[test]
    fn silhouette_header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"CGSL");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(b.len(), 18 + 12);
        assert_eq!(b[19], 255);
    }

    #[test]
    fn corrupted_headers_report_offsets() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(SilhouetteSequence::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(SilhouetteSequence::from_bytes(&b), Err(Error::Format { offset: 4, .. })));
        let b = sample().to_bytes();
        assert!(matches!(SilhouetteSequence::from_bytes(&b[..20]), Err(Error::Format { offset: 20, .. })));
        let mut b = sample().to_bytes();
        b[21] = 7;
        assert!(matches!(SilhouetteSequence::from_bytes(&b), Err(Error::Format { offset: 21, .. })));
    }

    #[test]
    fn smpl_accessors_split_the_vector() {
        let v: Vec<f32> = (0..82).map(|i| i as f32 / 100.0).collect();
        let s = SmplSequence::new(1, v).unwrap();
        assert_eq!(s.pose(0).len(), 69);
        assert_eq!(s.shape(0)[0], 0.69);
        assert_eq!(s.root(0), &[0.79, 0.80, 0.81]);
        assert!(s.validate().is_ok());
        let mut b = s.to_bytes();
        b[0..4].copy_from_slice(b"CGSL");
        assert!(matches!(SmplSequence::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        assert!(SilhouetteSequence::new(1, 1, 2, vec![0, 2]).is_err());
        let empty = SilhouetteSequence::new(1, 1, 2, vec![0, 0]).unwrap();
        assert!(empty.validate().is_err());
    }
}
