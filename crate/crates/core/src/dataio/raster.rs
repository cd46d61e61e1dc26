//! Raster containers and their binary file format.
//!
//! All three raster kinds share one container: a 16-byte header (magic
//! "MBVO", then width, height, channels as little-endian u32) followed by
//! row-major little-endian samples. Depth is 1 channel of f32 meters (0 =
//! invalid, NaN normalized to 0 on read), flow is 2 interleaved f32
//! channels (du, dv; NaN = invalid), instance masks are 1 channel of u16
//! ids (0 = background).

use super::DataError;
use crate::geometry::FlowVector;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MBVO";

fn write_header(w: &mut impl Write, width: u32, height: u32, channels: u32) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())
}

fn read_header(r: &mut impl Read, path: &Path, expected_channels: u32) -> Result<(u32, u32), DataError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| DataError::io(path, e))?;
    if &head[0..4] != MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf() });
    }
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let channels = u32::from_le_bytes(head[12..16].try_into().unwrap());
    if channels != expected_channels {
        return Err(DataError::WrongChannels {
            path: path.to_path_buf(),
            expected: expected_channels,
            got: channels,
        });
    }
    Ok((width, height))
}

fn read_f32_payload(path: &Path, channels: u32) -> Result<(u32, u32, Vec<f32>), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let (width, height) = read_header(&mut r, path, channels)?;
    let count = width as usize * height as usize * channels as usize;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| DataError::io(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, data))
}

fn write_f32_payload(path: &Path, width: u32, height: u32, channels: u32, data: &[f32]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, width, height, channels).map_err(|e| DataError::io(path, e))?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Per-pixel depth in meters; 0 marks invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize] }
    }

    #[inline]
    fn idx(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[self.idx(u, v)]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, z: f32) {
        let i = self.idx(u, v);
        self.data[i] = z;
    }

    #[inline]
    pub fn is_valid_at(&self, u: u32, v: u32) -> bool {
        let z = self.get(u, v);
        z > 0.0 && z.is_finite()
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn write_to(&self, path: &Path) -> Result<(), DataError> {
        write_f32_payload(path, self.width, self.height, 1, &self.data)
    }

    pub fn read_from(path: &Path) -> Result<Self, DataError> {
        let (width, height, mut data) = read_f32_payload(path, 1)?;
        // invalid depth is encoded as 0; normalize NaN on the way in
        for v in &mut data {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        Ok(Self { width, height, data })
    }
}

/// Per-pixel optical flow from frame k-1 into frame k, indexed on the k-1
/// pixel grid. NaN marks pixels without a defined flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    data: Vec<f32>, // interleaved du, dv
}

impl FlowField {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![f32::NAN; width as usize * height as usize * 2] }
    }

    #[inline]
    fn idx(&self, u: u32, v: u32) -> usize {
        2 * (v as usize * self.width as usize + u as usize)
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> FlowVector {
        let i = self.idx(u, v);
        FlowVector::new(self.data[i] as f64, self.data[i + 1] as f64)
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, flow: FlowVector) {
        let i = self.idx(u, v);
        self.data[i] = flow.du as f32;
        self.data[i + 1] = flow.dv as f32;
    }

    #[inline]
    pub fn set_invalid(&mut self, u: u32, v: u32) {
        let i = self.idx(u, v);
        self.data[i] = f32::NAN;
        self.data[i + 1] = f32::NAN;
    }

    #[inline]
    pub fn is_valid_at(&self, u: u32, v: u32) -> bool {
        let i = self.idx(u, v);
        self.data[i].is_finite() && self.data[i + 1].is_finite()
    }

    pub fn write_to(&self, path: &Path) -> Result<(), DataError> {
        write_f32_payload(path, self.width, self.height, 2, &self.data)
    }

    pub fn read_from(path: &Path) -> Result<Self, DataError> {
        let (width, height, data) = read_f32_payload(path, 2)?;
        Ok(Self { width, height, data })
    }
}

/// Per-pixel instance id: 0 is background/static, objects count from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub width: u32,
    pub height: u32,
    data: Vec<u16>,
}

impl InstanceMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize] }
    }

    #[inline]
    fn idx(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[self.idx(u, v)]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, id: u16) {
        let i = self.idx(u, v);
        self.data[i] = id;
    }

    /// Distinct object ids present, ascending.
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.data.iter().copied().filter(|&id| id > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn area(&self, id: u16) -> usize {
        self.data.iter().filter(|&&x| x == id).count()
    }

    pub fn write_to(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_header(&mut w, self.width, self.height, 1).map_err(|e| DataError::io(path, e))?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| DataError::io(path, e))?;
        }
        w.flush().map_err(|e| DataError::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        let mut r = BufReader::new(file);
        let (width, height) = read_header(&mut r, path, 1)?;
        let count = width as usize * height as usize;
        let mut bytes = vec![0u8; count * 2];
        r.read_exact(&mut bytes).map_err(|e| DataError::io(path, e))?;
        let data = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn depth_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut d = DepthMap::new(17, 9);
        for v in 0..9 {
            for u in 0..17 {
                d.set(u, v, (u * 31 + v) as f32 * 0.173 + 0.01);
            }
        }
        d.write_to(&path).unwrap();
        let back = DepthMap::read_from(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn nan_depth_normalizes_to_invalid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut d = DepthMap::new(4, 4);
        d.set(1, 1, f32::NAN);
        d.set(2, 2, 5.0);
        d.write_to(&path).unwrap();
        let back = DepthMap::read_from(&path).unwrap();
        assert_eq!(back.get(1, 1), 0.0);
        assert!(!back.is_valid_at(1, 1));
        assert!(back.is_valid_at(2, 2));
    }

    #[test]
    fn flow_and_mask_roundtrip() {
        let dir = tempdir().unwrap();
        let fpath = dir.path().join("f.bin");
        let mut f = FlowField::new(8, 6);
        f.set(3, 2, FlowVector::new(1.25, -0.5));
        f.write_to(&fpath).unwrap();
        let back = FlowField::read_from(&fpath).unwrap();
        assert_eq!(back.get(3, 2), FlowVector::new(1.25, -0.5));
        assert!(!back.is_valid_at(0, 0));

        let mpath = dir.path().join("m.bin");
        let mut m = InstanceMask::new(8, 6);
        m.set(1, 1, 2);
        m.set(2, 1, 7);
        m.write_to(&mpath).unwrap();
        let back = InstanceMask::read_from(&mpath).unwrap();
        assert_eq!(back.get(1, 1), 2);
        assert_eq!(back.instance_ids(), vec![2, 7]);
        assert_eq!(back.area(7), 1);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"JUNK\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(DepthMap::read_from(&path), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let f = FlowField::new(4, 4);
        f.write_to(&path).unwrap();
        assert!(matches!(DepthMap::read_from(&path), Err(DataError::WrongChannels { .. })));
    }
}
