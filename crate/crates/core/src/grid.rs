//! Planar image grids, 4-level mean-pool pyramids and 3x3 stencils.
//!
//! An [`ImageGrid`] stores `channels` planes of `height x width` doubles, each
//! plane row-major, planes back to back. The same container carries color
//! images, disparity and depth maps, feature maps and network parameters.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Number of pyramid levels used across the objective and the networks.
pub const PYRAMID_LEVELS: usize = 4;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const BOX3: [f64; 9] = [1.0 / 9.0; 9];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    /// A `(len, 1, 1)` grid, the layout used for parameter vectors.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            channels: values.len(),
            height: 1,
            width: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy of one channel as a single-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        ImageGrid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(ImageGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, channels: usize, height: usize, width: usize) -> Result<ImageGrid> {
        ImageGrid::new(channels, height, width, self.data.clone())
    }

    /// Mirror every channel left-to-right.
    pub fn flip_horizontal(&self) -> ImageGrid {
        ImageGrid::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn concat_channels(grids: &[&ImageGrid]) -> Result<ImageGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::shape("concat of zero grids"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for g in grids {
            if g.height != h || g.width != w {
                return Err(Error::shape(format!(
                    "concat {}x{} with {}x{}",
                    h, w, g.height, g.width
                )));
            }
            channels += g.channels;
            data.extend_from_slice(&g.data);
        }
        ImageGrid::new(channels, h, w, data)
    }

    /// 2x2 mean-pool; odd borders replicate the last row/column.
    pub fn downsample2(&self) -> ImageGrid {
        let (h, w) = (self.height.div_ceil(2), self.width.div_ceil(2));
        ImageGrid::from_fn(self.channels, h, w, |c, y, x| {
            let y0 = 2 * y;
            let x0 = 2 * x;
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            0.25 * (self.get(c, y0, x0) + self.get(c, y0, x1) + self.get(c, y1, x0) + self.get(c, y1, x1))
        })
    }

    // --- PNG I/O -----------------------------------------------------------

    /// Reads an 8- or 16-bit PNG as a 3-channel grid in [0, 1].
    pub fn read_png(path: impl AsRef<Path>) -> Result<ImageGrid> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb16();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(ImageGrid::from_fn(3, h, w, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
        }))
    }

    /// Writes the first three channels (or the single channel as gray) as an
    /// 8-bit PNG, clamping to [0, 1].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = if self.channels >= 3 {
            let buf = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            });
            buf.save(path)
        } else {
            let buf = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([to_u8(self.get(0, y as usize, x as usize))])
            });
            buf.save(path)
        };
        result.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a 16-bit disparity PNG (value / 256 pixels, 0 means invalid).
    pub fn read_disparity_png(path: impl AsRef<Path>) -> Result<ImageGrid> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma16();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Ok(ImageGrid::from_fn(1, h, w, |_, y, x| {
            gray.get_pixel(x as u32, y as u32)[0] as f64 / 256.0
        }))
    }

    /// Writes channel 0 as a 16-bit disparity PNG (disparity x 256, rounded).
    pub fn write_disparity_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let d = self.get(0, y as usize, x as usize);
                let v = if d.is_finite() && d > 0.0 {
                    (d * 256.0).round().clamp(1.0, 65535.0) as u16
                } else {
                    0
                };
                Luma([v])
            });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: [ImageGrid; PYRAMID_LEVELS],
}

impl Pyramid {
    pub fn level(&self, k: usize) -> &ImageGrid {
        &self.levels[k]
    }

    pub fn levels(&self) -> &[ImageGrid; PYRAMID_LEVELS] {
        &self.levels
    }

    pub fn scale_factor(k: usize) -> usize {
        1 << k
    }
}

pub fn build_pyramid(image: &ImageGrid) -> Result<Pyramid> {
    if image.height() < 16 || image.width() < 16 {
        return Err(Error::TooSmall {
            height: image.height(),
            width: image.width(),
            min: 16,
        });
    }
    let l1 = image.downsample2();
    let l2 = l1.downsample2();
    let l3 = l2.downsample2();
    Ok(Pyramid {
        levels: [image.clone(), l1, l2, l3],
    })
}

/// Per-channel 3x3 correlation with edge replication.
pub fn correlate3x3(grid: &ImageGrid, kernel: &[f64; 9]) -> ImageGrid {
    let (c, h, w) = grid.shape();
    let mut out = ImageGrid::zeros(c, h, w);
    for ch in 0..c {
        let src = grid.plane(ch);
        let base = ch * h * w;
        for y in 0..h {
            let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                let mut acc = 0.0;
                for (ky, &ry) in rows.iter().enumerate() {
                    for (kx, &cx) in cols.iter().enumerate() {
                        acc += kernel[ky * 3 + kx] * src[ry * w + cx];
                    }
                }
                out.data[base + y * w + x] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`correlate3x3`]: scatters output gradients back to the input.
pub fn correlate3x3_adjoint(grad_out: &ImageGrid, kernel: &[f64; 9]) -> ImageGrid {
    let (c, h, w) = grad_out.shape();
    let mut out = ImageGrid::zeros(c, h, w);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                let g = grad_out.data[base + y * w + x];
                if g == 0.0 {
                    continue;
                }
                let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                for (ky, &ry) in rows.iter().enumerate() {
                    for (kx, &cx) in cols.iter().enumerate() {
                        out.data[base + ry * w + cx] += kernel[ky * 3 + kx] * g;
                    }
                }
            }
        }
    }
    out
}

/// Horizontal and vertical Sobel responses, edge-replicated borders.
pub fn sobel_gradients(grid: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
    if grid.height() < 3 || grid.width() < 3 {
        return Err(Error::TooSmall {
            height: grid.height(),
            width: grid.width(),
            min: 3,
        });
    }
    Ok((correlate3x3(grid, &SOBEL_X), correlate3x3(grid, &SOBEL_Y)))
}

/// Shrinks a validity mask so a pixel stays valid only if its whole 3x3
/// neighbourhood (edge-replicated) is valid.
pub fn erode3x3(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let rows = [y.saturating_sub(1), y, (y + 1).min(height - 1)];
        for x in 0..width {
            let cols = [x.saturating_sub(1), x, (x + 1).min(width - 1)];
            out[y * width + x] = rows
                .iter()
                .all(|&ry| cols.iter().all(|&cx| mask[ry * width + cx]));
        }
    }
    out
}
