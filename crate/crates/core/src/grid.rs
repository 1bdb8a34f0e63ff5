//! Dense row-major 2D grids of f64 and their binary file form.
//!
//! Binary layout: `height: u32 LE`, `width: u32 LE`, then `height * width`
//! little-endian f64 values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Normalised centre of pixel `(row, col)`, as `(x, y)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [(col as f64 + 0.5) / self.width as f64, (row as f64 + 0.5) / self.height as f64]
    }

    /// Bilinear sample at normalised `(x, y)`; outside the grid returns `fill`.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> f64 {
        let fx = x * self.width as f64 - 0.5;
        let fy = y * self.height as f64 - 0.5;
        let c0 = fx.floor();
        let r0 = fy.floor();
        let (tx, ty) = (fx - c0, fy - r0);
        let at = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                fill
            } else {
                self.get(r as usize, c as usize)
            }
        };
        let top = at(r0, c0) * (1.0 - tx) + at(r0, c0 + 1.0) * tx;
        let bottom = at(r0 + 1.0, c0) * (1.0 - tx) + at(r0 + 1.0, c0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Block mean pooling by integer factors.
    pub fn mean_pool(&self, out_height: usize, out_width: usize) -> Result<Grid> {
        if out_height == 0 || out_width == 0 || !self.height.is_multiple_of(out_height) || !self.width.is_multiple_of(out_width) {
            return Err(Error::ShapeMismatch(format!(
                "cannot pool {}x{} to {}x{}",
                self.height, self.width, out_height, out_width
            )));
        }
        let (fh, fw) = (self.height / out_height, self.width / out_width);
        let norm = (fh * fw) as f64;
        let mut out = vec![0.0; out_height * out_width];
        for r in 0..self.height {
            for c in 0..self.width {
                out[(r / fh) * out_width + c / fw] += self.get(r, c);
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Grid::new(out_height, out_width, out)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let h = u32::try_from(self.height).map_err(|_| Error::Format("grid too tall".into()))?;
        let wd = u32::try_from(self.width).map_err(|_| Error::Format("grid too wide".into()))?;
        let mut buf = Vec::with_capacity(8 + 8 * self.data.len());
        buf.extend_from_slice(&h.to_le_bytes());
        buf.extend_from_slice(&wd.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Grid> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(Error::Format("grid file shorter than its header".into()));
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 8 * h * w {
            return Err(Error::Format(format!(
                "grid header says {h}x{w} but {} payload bytes follow",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Grid::new(h, w, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_binary(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Grid> {
        Grid::read_binary(std::fs::File::open(path)?)
    }
}
