//! Dense row-major 2D and 3D grids.
//!
//! Layout matches the tensor file payload: index `(r, c)` lives at
//! `r * cols + c`, and `(d, r, c)` at `(d * rows + r) * cols + c`.

use std::ops::{Index, IndexMut};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Binary 2D mask.
pub type Mask2D = Grid2<bool>;

impl<T> Grid2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} grid",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Option<&T> {
        if r < self.rows && c < self.cols {
            Some(&self.data[r * self.cols + c])
        } else {
            None
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// `(row, col, value)` in row-major order.
    pub fn indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> + '_ {
        let cols = self.cols;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i / cols, i % cols, v))
    }
}

impl<T: Clone> Grid2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Index<(usize, usize)> for Grid2<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid2<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Grid2<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Inclusive `(row_min, col_min, row_max, col_max)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (r, c, &v) in self.indexed() {
            if !v {
                continue;
            }
            bounds = Some(match bounds {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        bounds
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    depth: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Binary 3D mask.
pub type Mask3D = Grid3<bool>;

impl<T> Grid3<T> {
    pub fn from_vec(shape: (usize, usize, usize), data: Vec<T>) -> Result<Self> {
        let (depth, rows, cols) = shape;
        if data.len() != depth * rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {depth}x{rows}x{cols} grid",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            rows,
            cols,
            data,
        })
    }

    pub fn from_fn(
        (depth, rows, cols): (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(depth * rows * cols);
        for d in 0..depth {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(d, r, c));
                }
            }
        }
        Self {
            depth,
            rows,
            cols,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.rows, self.cols)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_slice(&self, d: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.data[d * n..(d + 1) * n]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 {
            depth: self.depth,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(shape: (usize, usize, usize), value: T) -> Self {
        let (depth, rows, cols) = shape;
        Self {
            depth,
            rows,
            cols,
            data: vec![value; depth * rows * cols],
        }
    }

    pub fn plane(&self, d: usize) -> Grid2<T> {
        Grid2 {
            rows: self.rows,
            cols: self.cols,
            data: self.plane_slice(d).to_vec(),
        }
    }

    pub fn planes(&self) -> Vec<Grid2<T>> {
        (0..self.depth).map(|d| self.plane(d)).collect()
    }

    pub fn set_plane(&mut self, d: usize, plane: &Grid2<T>) -> Result<()> {
        if plane.shape() != (self.rows, self.cols) || d >= self.depth {
            return Err(Error::Shape(format!(
                "plane {d} of shape {:?} does not fit {:?}",
                plane.shape(),
                self.shape()
            )));
        }
        let n = self.rows * self.cols;
        self.data[d * n..(d + 1) * n].clone_from_slice(plane.data());
        Ok(())
    }

    /// Stack equally shaped planes along axis 0.
    pub fn from_planes(planes: &[Grid2<T>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero planes".into()))?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(planes.len() * rows * cols);
        for p in planes {
            if p.shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "plane {:?} differs from {:?}",
                    p.shape(),
                    (rows, cols)
                )));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Self {
            depth: planes.len(),
            rows,
            cols,
            data,
        })
    }
}

impl<T> Index<(usize, usize, usize)> for Grid3<T> {
    type Output = T;

    fn index(&self, (d, r, c): (usize, usize, usize)) -> &T {
        &self.data[(d * self.rows + r) * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize, usize)> for Grid3<T> {
    fn index_mut(&mut self, (d, r, c): (usize, usize, usize)) -> &mut T {
        &mut self.data[(d * self.rows + r) * self.cols + c]
    }
}

impl Grid3<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Inclusive `((d0, r0, c0), (d1, r1, c1))` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for d in 0..self.depth {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    if self[(d, r, c)] {
                        any = true;
                        for (k, v) in [d, r, c].into_iter().enumerate() {
                            lo[k] = lo[k].min(v);
                            hi[k] = hi[k].max(v);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }
}
