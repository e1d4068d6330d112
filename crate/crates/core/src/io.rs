//! Binary file formats and JSON config helpers.
//!
//! All multi-byte values are little-endian. Quaternions are stored scalar
//! first (w, x, y, z). Formats:
//!
//! * Gaussian set (`.sgau`): magic `SGAU`, u32 version=1, u32 count, u32 C,
//!   then `count` records of f32 `pos[3], rot[4], scale[3], opacity,
//!   classes[C], velocity[3]`.
//! * Voxel grid (`.svox`): magic `SVOX`, u32 version=1, u32 dims[3],
//!   f32 origin[3], f32 voxel_size[3], u32 C, then `dims` product u8 labels,
//!   x fastest.
//! * Point cloud (`.spts`): magic `SPTS`, u32 version=1, u32 count, then f32
//!   xyz triples.
//! * Image (`.simg`): magic `SIMG`, u32 version=1, u32 width, height,
//!   channels, then f32 data row-major.
//!
//! Reads preserve the stored f32 values exactly (widened to f64 without
//! renormalization), so write∘read is the identity on every finite file.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::types::{SemanticGaussian, VoxelGrid};

pub const GAUSSIAN_MAGIC: [u8; 4] = *b"SGAU";
pub const GRID_MAGIC: [u8; 4] = *b"SVOX";
pub const POINTS_MAGIC: [u8; 4] = *b"SPTS";
pub const IMAGE_MAGIC: [u8; 4] = *b"SIMG";
pub const FORMAT_VERSION: u32 = 1;

/// Row-major float image; depth maps use one channel, RGB three.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `width * height * channels`, row-major, channel fastest.
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        let got = [got[0], got[1], got[2], got[3]];
        if got != expected {
            return Err(Error::BadMagic { expected, got });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let got = self.u32()?;
        if got != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                got,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finite_f32(&mut self, field: &'static str, index: usize) -> Result<f64> {
        let v = self.f32()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { field, index });
        }
        Ok(v as f64)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64, field: &'static str, index: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite { field, index });
    }
    out.extend_from_slice(&(v as f32).to_le_bytes());
    Ok(())
}

pub fn gaussians_to_bytes(gaussians: &[SemanticGaussian], class_count: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + gaussians.len() * 4 * (14 + class_count));
    out.extend_from_slice(&GAUSSIAN_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, gaussians.len() as u32);
    put_u32(&mut out, class_count as u32);
    for (i, g) in gaussians.iter().enumerate() {
        if g.classes.len() != class_count {
            return Err(Error::ShapeMismatch(format!(
                "gaussian {} has {} classes, expected {}",
                i,
                g.classes.len(),
                class_count
            )));
        }
        for k in 0..3 {
            put_f32(&mut out, g.position[k], "position", i)?;
        }
        let q = g.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            put_f32(&mut out, v, "rotation", i)?;
        }
        for k in 0..3 {
            put_f32(&mut out, g.scale[k], "scale", i)?;
        }
        put_f32(&mut out, g.opacity, "opacity", i)?;
        for &c in &g.classes {
            put_f32(&mut out, c, "classes", i)?;
        }
        for k in 0..3 {
            put_f32(&mut out, g.velocity[k], "velocity", i)?;
        }
    }
    Ok(out)
}

pub fn gaussians_from_bytes(buf: &[u8]) -> Result<(Vec<SemanticGaussian>, usize)> {
    let mut r = Reader::new(buf);
    r.magic(GAUSSIAN_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        let position = Vector3::new(
            r.finite_f32("position", i)?,
            r.finite_f32("position", i)?,
            r.finite_f32("position", i)?,
        );
        let w = r.finite_f32("rotation", i)?;
        let x = r.finite_f32("rotation", i)?;
        let y = r.finite_f32("rotation", i)?;
        let z = r.finite_f32("rotation", i)?;
        // Stored quaternions are unit up to f32 rounding; keep the exact
        // stored values so a rewrite is byte-identical.
        let rotation = UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z));
        let scale = Vector3::new(
            r.finite_f32("scale", i)?,
            r.finite_f32("scale", i)?,
            r.finite_f32("scale", i)?,
        );
        let opacity = r.finite_f32("opacity", i)?;
        let mut classes = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            classes.push(r.finite_f32("classes", i)?);
        }
        let velocity = Vector3::new(
            r.finite_f32("velocity", i)?,
            r.finite_f32("velocity", i)?,
            r.finite_f32("velocity", i)?,
        );
        gaussians.push(SemanticGaussian {
            position,
            rotation,
            scale,
            opacity,
            classes,
            velocity,
        });
    }
    r.finish()?;
    Ok((gaussians, class_count))
}

pub fn write_gaussians(
    path: impl AsRef<Path>,
    gaussians: &[SemanticGaussian],
    class_count: usize,
) -> Result<()> {
    Ok(fs::write(path, gaussians_to_bytes(gaussians, class_count)?)?)
}

pub fn read_gaussians(path: impl AsRef<Path>) -> Result<(Vec<SemanticGaussian>, usize)> {
    gaussians_from_bytes(&fs::read(path)?)
}

pub fn grid_to_bytes(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(44 + grid.labels.len());
    out.extend_from_slice(&GRID_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for d in grid.dims {
        put_u32(&mut out, d as u32);
    }
    for k in 0..3 {
        put_f32(&mut out, grid.origin[k], "origin", 0)?;
    }
    for k in 0..3 {
        put_f32(&mut out, grid.voxel_size[k], "voxel_size", 0)?;
    }
    put_u32(&mut out, grid.class_count as u32);
    if grid.labels.len() != grid.voxel_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} labels for {} voxels",
            grid.labels.len(),
            grid.voxel_count()
        )));
    }
    out.extend_from_slice(&grid.labels);
    Ok(out)
}

pub fn grid_from_bytes(buf: &[u8]) -> Result<VoxelGrid> {
    let mut r = Reader::new(buf);
    r.magic(GRID_MAGIC)?;
    r.version()?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = Vector3::new(
        r.finite_f32("origin", 0)?,
        r.finite_f32("origin", 0)?,
        r.finite_f32("origin", 0)?,
    );
    let voxel_size = Vector3::new(
        r.finite_f32("voxel_size", 0)?,
        r.finite_f32("voxel_size", 0)?,
        r.finite_f32("voxel_size", 0)?,
    );
    let class_count = r.u32()? as usize;
    let labels = r.take(dims[0] * dims[1] * dims[2])?.to_vec();
    r.finish()?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize > class_count) {
        return Err(Error::ShapeMismatch(format!(
            "label {} exceeds empty label {}",
            bad, class_count
        )));
    }
    Ok(VoxelGrid {
        origin,
        voxel_size,
        dims,
        class_count,
        labels,
    })
}

pub fn write_grid(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    Ok(fs::write(path, grid_to_bytes(grid)?)?)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    grid_from_bytes(&fs::read(path)?)
}

pub fn points_to_bytes(points: &[Vector3<f64>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + points.len() * 12);
    out.extend_from_slice(&POINTS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, points.len() as u32);
    for (i, p) in points.iter().enumerate() {
        for k in 0..3 {
            put_f32(&mut out, p[k], "xyz", i)?;
        }
    }
    Ok(out)
}

pub fn points_from_bytes(buf: &[u8]) -> Result<Vec<Vector3<f64>>> {
    let mut r = Reader::new(buf);
    r.magic(POINTS_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        points.push(Vector3::new(
            r.finite_f32("xyz", i)?,
            r.finite_f32("xyz", i)?,
            r.finite_f32("xyz", i)?,
        ));
    }
    r.finish()?;
    Ok(points)
}

pub fn write_points(path: impl AsRef<Path>, points: &[Vector3<f64>]) -> Result<()> {
    Ok(fs::write(path, points_to_bytes(points)?)?)
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>> {
    points_from_bytes(&fs::read(path)?)
}

pub fn image_to_bytes(img: &Image) -> Result<Vec<u8>> {
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} values for {}x{}x{}",
            img.data.len(),
            img.width,
            img.height,
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(20 + img.data.len() * 4);
    out.extend_from_slice(&IMAGE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, img.width as u32);
    put_u32(&mut out, img.height as u32);
    put_u32(&mut out, img.channels as u32);
    for (i, &v) in img.data.iter().enumerate() {
        put_f32(&mut out, v as f64, "data", i)?;
    }
    Ok(out)
}

pub fn image_from_bytes(buf: &[u8]) -> Result<Image> {
    let mut r = Reader::new(buf);
    r.magic(IMAGE_MAGIC)?;
    r.version()?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let n = width * height * channels;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(r.finite_f32("data", i)? as f32);
    }
    r.finish()?;
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    Ok(fs::write(path, image_to_bytes(img)?)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    image_from_bytes(&fs::read(path)?)
}
