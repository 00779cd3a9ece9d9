//! Image tensors, perturbation fields, and the NIT1 tensor file format.
//!
//! Images are row-major, channel-minor `f64` intensities normalized to
//! `[0, 1]`. Perturbation fields share the layout but carry signed,
//! unconstrained (finite) deltas.
//!
//! # NIT1 format
//!
//! Raw tensor container used for patches, saliency maps, and intermediate
//! images:
//!
//! ```text
//! magic  4 bytes            "NIT1"
//! dims   3 x u32 LE         height, width, channels
//! data   h*w*c x f32 LE     row-major, channel-minor
//! ```

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every NIT1 stream.
pub const NIT1_MAGIC: &[u8; 4] = b"NIT1";

/// Clamp a value into the normalized pixel domain `[0, 1]`.
#[inline]
pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Tensor shape: height x width x channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    /// Total element count (`h * w * c`).
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of pixels (`h * w`).
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "zero-sized image: {height}x{width}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Dimension(format!(
            "unsupported channel count {channels} (expected 1 or 3)"
        )));
    }
    Ok(())
}

/// A normalized image: every element finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, validating shape, element count, and the `[0, 1]`
    /// range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::shape_mismatch(
                format!("{} elements for {shape}", shape.len()),
                data.len(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Precondition(format!(
                "image element {bad} outside [0, 1]"
            )));
        }
        Ok(ImageTensor { shape, data })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_dims(height, width, channels)?;
        let shape = Shape::new(height, width, channels);
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Precondition(format!(
                "constant {value} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            shape,
            data: vec![value; shape.len()],
        })
    }

    /// Builds an image from a per-element function of (y, x, channel);
    /// values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    data.push(clamp01(f(y, x, ch)));
                }
            }
        }
        Ok(ImageTensor {
            shape: Shape::new(height, width, channels),
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.shape.width + x) * self.shape.channels + ch]
    }

    /// `out[k] = clamp01(self[k] + scale * delta[k])`.
    pub fn apply_perturbation(&self, delta: &PerturbationField, scale: f64) -> Result<ImageTensor> {
        if self.shape != delta.shape {
            return Err(Error::shape_mismatch(self.shape, delta.shape));
        }
        if !scale.is_finite() {
            return Err(Error::Precondition(format!("non-finite scale {scale}")));
        }
        let data = self
            .data
            .iter()
            .zip(delta.data.iter())
            .map(|(x, d)| clamp01(x + scale * d))
            .collect();
        Ok(ImageTensor {
            shape: self.shape,
            data,
        })
    }

    /// Elementwise difference `self - other` as a perturbation field
    /// (the effective delta of a perturbed image relative to its clean one).
    pub fn delta_from(&self, other: &ImageTensor) -> Result<PerturbationField> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(other.shape, self.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        PerturbationField::new(
            self.shape.height,
            self.shape.width,
            self.shape.channels,
            data,
        )
    }

    /// Bilinear resize with corner-aligned sampling and edge clamping.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<ImageTensor> {
        let data = resize_bilinear_data(&self.data, self.shape, new_h, new_w)?;
        // Interpolation of [0,1] values stays in range; clamp shields against
        // float wobble at the boundaries.
        Ok(ImageTensor {
            shape: Shape::new(new_h, new_w, self.shape.channels),
            data: data.into_iter().map(clamp01).collect(),
        })
    }

    /// Flattened copy of the pixel data (the classifier's input vector).
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn write_nit1(&self, w: &mut impl Write) -> Result<()> {
        write_nit1(w, self.shape, &self.data)
    }

    pub fn to_nit1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        self.write_nit1(&mut buf).expect("vec write cannot fail");
        buf
    }

    pub fn read_nit1(r: &mut impl Read) -> Result<Self> {
        let (shape, data) = read_nit1(r)?;
        // Stored images are expected normalized; clamp repairs f32 rounding.
        ImageTensor::new(
            shape.height,
            shape.width,
            shape.channels,
            data.into_iter().map(clamp01).collect(),
        )
    }

    pub fn from_nit1_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_nit1(&mut &bytes[..])
    }
}

/// A signed perturbation: same layout as [`ImageTensor`], finite elements,
/// unconstrained range.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationField {
    shape: Shape,
    data: Vec<f64>,
}

impl PerturbationField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::shape_mismatch(
                format!("{} elements for {shape}", shape.len()),
                data.len(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite field element {bad}"
            )));
        }
        Ok(PerturbationField { shape, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        check_dims(height, width, channels)?;
        let shape = Shape::new(height, width, channels);
        Ok(PerturbationField {
            shape,
            data: vec![0.0; shape.len()],
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.shape.width + x) * self.shape.channels + ch]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<PerturbationField> {
        let data = resize_bilinear_data(&self.data, self.shape, new_h, new_w)?;
        Ok(PerturbationField {
            shape: Shape::new(new_h, new_w, self.shape.channels),
            data,
        })
    }

    pub fn write_nit1(&self, w: &mut impl Write) -> Result<()> {
        write_nit1(w, self.shape, &self.data)
    }

    pub fn to_nit1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        self.write_nit1(&mut buf).expect("vec write cannot fail");
        buf
    }

    pub fn read_nit1(r: &mut impl Read) -> Result<Self> {
        let (shape, data) = read_nit1(r)?;
        PerturbationField::new(shape.height, shape.width, shape.channels, data)
    }

    pub fn from_nit1_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_nit1(&mut &bytes[..])
    }
}

/// Source coordinate for corner-aligned bilinear sampling.
///
/// Output corners map onto input corners; a single-element output samples
/// the input midpoint.
#[inline]
fn source_pos(out_idx: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len == 1 {
        (in_len - 1) as f64 / 2.0
    } else {
        out_idx as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

fn resize_bilinear_data(src: &[f64], shape: Shape, new_h: usize, new_w: usize) -> Result<Vec<f64>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Dimension(format!(
            "zero-sized resize target: {new_h}x{new_w}"
        )));
    }
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    if new_h == h && new_w == w {
        return Ok(src.to_vec());
    }
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for oy in 0..new_h {
        let sy = source_pos(oy, new_h, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..new_w {
            let sx = source_pos(ox, new_w, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

fn write_nit1(w: &mut impl Write, shape: Shape, data: &[f64]) -> Result<()> {
    w.write_all(NIT1_MAGIC)?;
    for dim in [shape.height, shape.width, shape.channels] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::format("NIT1", format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_nit1(r: &mut impl Read) -> Result<(Shape, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("NIT1", format!("truncated magic: {e}")))?;
    if &magic != NIT1_MAGIC {
        return Err(Error::format("NIT1", format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("NIT1", format!("truncated header: {e}")))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2]);
    let mut data = Vec::with_capacity(shape.len());
    let mut buf = [0u8; 4];
    for _ in 0..shape.len() {
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("NIT1", format!("truncated payload: {e}")))?;
        let v = f32::from_le_bytes(buf) as f64;
        if !v.is_finite() {
            return Err(Error::format("NIT1", format!("non-finite element {v}")));
        }
        data.push(v);
    }
    Ok((shape, data))
}
