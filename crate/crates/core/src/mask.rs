//! Binary instance masks and dense per-pixel feature maps.

use ndarray::{Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

/// H x W binary mask; every cell is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Array2<u8>,
}

impl BinaryMask {
    /// All-zero mask of the given shape.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            grid: Array2::zeros((height, width)),
        }
    }

    /// Wrap a grid, rejecting entries other than 0/1 and empty shapes.
    pub fn from_grid(grid: Array2<u8>) -> Result<Self> {
        if grid.nrows() == 0 || grid.ncols() == 0 {
            return Err(Error::Shape("mask must have positive dimensions".into()));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask entries must be 0 or 1".into()));
        }
        Ok(Self { grid })
    }

    /// Build from nested rows of 0/1, mostly for tests and file loading.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Shape("mask must have positive dimensions".into()));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("mask rows must have equal length".into()));
        }
        let flat: Vec<u8> = rows.iter().flatten().copied().collect();
        let grid = Array2::from_shape_vec((rows.len(), w), flat)
            .expect("row-major layout matches shape");
        Self::from_grid(grid)
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[(y, x)]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.grid[(y, x)] = u8::from(value);
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Fraction of pixels that are foreground.
    pub fn foreground_fraction(&self) -> f64 {
        self.area() as f64 / (self.height() * self.width()) as f64
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Intersection and union pixel counts.
    pub fn overlap_counts(&self, other: &Self) -> Result<(usize, usize)> {
        self.check_same_shape(other)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.grid.iter().zip(other.grid.iter()) {
            inter += usize::from(a == 1 && b == 1);
            union += usize::from(a == 1 || b == 1);
        }
        Ok((inter, union))
    }
}

/// Average-pool a mask down by an integer factor, re-binarizing at 0.5.
///
/// Used when masks are annotated at a finer resolution than the feature map.
pub fn downsample_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("target shape must be positive".into()));
    }
    if mask.height() % height != 0 || mask.width() % width != 0 {
        return Err(Error::Shape(format!(
            "mask {:?} is not an integer multiple of target ({height}, {width})",
            mask.shape()
        )));
    }
    let fy = mask.height() / height;
    let fx = mask.width() / width;
    let mut out = BinaryMask::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let mut sum = 0usize;
            for dy in 0..fy {
                for dx in 0..fx {
                    sum += mask.get(y * fy + dy, x * fx + dx) as usize;
                }
            }
            let mean = sum as f64 / (fy * fx) as f64;
            out.set(y, x, mean >= 0.5);
        }
    }
    Ok(out)
}

/// H x W x D feature map over the same grid as the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Array3<f64>,
}

impl FeatureMap {
    pub fn new(grid: Array3<f64>) -> Result<Self> {
        let (h, w, d) = grid.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Shape("feature map must have positive dimensions".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("feature map entries must be finite".into()));
        }
        Ok(Self { grid })
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().2
    }

    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.grid.index_axis(ndarray::Axis(0), y).index_axis_move(ndarray::Axis(0), x)
    }

    pub fn grid(&self) -> &Array3<f64> {
        &self.grid
    }

    pub fn same_grid_as(&self, mask: &BinaryMask) -> bool {
        self.height() == mask.height() && self.width() == mask.width()
    }
}
