use crate::{Error, Result};

/// Dense `height × width × channels` array of `f64`, row-major with channels
/// innermost. Used for images, per-pixel payloads, token grids and condition
/// planes alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "grid data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Channel vector of the cell with flat index `cell = row * width + col`.
    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Channel-wise concatenation; all grids must share height and width.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("no grids to concatenate"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|g| g.height != h || g.width != w) {
            return Err(Error::input("concatenated grids differ in resolution"));
        }
        let channels: usize = parts.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for cell in 0..h * w {
            for g in parts {
                data.extend_from_slice(g.cell(cell));
            }
        }
        Ok(Grid {
            height: h,
            width: w,
            channels,
            data,
        })
    }

    /// Copy of channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Grid> {
        if start + count > self.channels {
            return Err(Error::input(format!(
                "channel slice {start}..{} exceeds {} channels",
                start + count,
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.cells() * count);
        for cell in 0..self.cells() {
            data.extend_from_slice(&self.cell(cell)[start..start + count]);
        }
        Ok(Grid {
            height: self.height,
            width: self.width,
            channels: count,
            data,
        })
    }

    /// Copy of the rectangular window `rows × cols`.
    pub fn crop(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Grid> {
        if rows.end > self.height || cols.end > self.width {
            return Err(Error::input("crop window exceeds grid"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len() * self.channels);
        for r in rows.clone() {
            for c in cols.clone() {
                data.extend_from_slice(self.at(r, c));
            }
        }
        Ok(Grid {
            height: rows.len(),
            width: cols.len(),
            channels: self.channels,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Grid {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
