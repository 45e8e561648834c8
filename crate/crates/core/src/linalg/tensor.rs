//! Third-order tensors with lexicographic storage (mode 1 slowest), unfoldings
//! and mode-n products.
//!
//! Unfolding convention: the mode-n unfolding has `dims[n]` rows; its columns run
//! over the two remaining indices in lexicographic order. For mode 1 the column
//! index of `(j, k)` is `j * d3 + k`, for mode 2 `(i, k)` maps to `i * d3 + k`, and
//! for mode 3 `(i, j)` maps to `i * d2 + j`. Row `i` of the mode-1 unfolding is
//! therefore slab `i` flattened row-major.

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    /// Parses the 1-based mode number.
    pub fn from_number(n: usize) -> Result<Mode> {
        match n {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(Error::Config(format!("tensor mode must be 1, 2 or 3, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            dims: [d1, d2, d3],
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == dims.iter().product::<usize>(), || {
            format!("{} values for tensor of dims {dims:?}", data.len())
        })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Rank-(1,1,1) tensor `a ⊗ b ⊗ c`.
    pub fn outer(a: &[f64], b: &[f64], c: &[f64]) -> Self {
        Self::from_fn([a.len(), b.len(), c.len()], |i, j, k| a[i] * b[j] * c[k])
    }

    /// Stacks equally-shaped matrices along mode 1.
    pub fn from_slabs(slabs: &[Matrix]) -> Result<Self> {
        let (r, c) = slabs.first().map(Matrix::shape).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(slabs.len() * r * c);
        for (i, s) in slabs.iter().enumerate() {
            ensure(s.shape() == (r, c), || {
                format!("slab {i} has shape {:?}, expected {:?}", s.shape(), (r, c))
            })?;
            data.extend_from_slice(s.data());
        }
        Ok(Self {
            dims: [slabs.len(), r, c],
            data,
        })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
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
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Slab `i` along mode 1 as a `d2 × d3` matrix.
    pub fn slab(&self, i: usize) -> Matrix {
        let n = self.dims[1] * self.dims[2];
        Matrix::from_vec(self.dims[1], self.dims[2], self.data[i * n..(i + 1) * n].to_vec())
            .expect("slab shape")
    }

    pub fn slab_data(&self, i: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slab_data_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.dims[1] * self.dims[2];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn set_slab(&mut self, i: usize, m: &Matrix) -> Result<()> {
        ensure(m.shape() == (self.dims[1], self.dims[2]), || {
            format!("slab shape {:?} into tensor {:?}", m.shape(), self.dims)
        })?;
        self.slab_data_mut(i).copy_from_slice(m.data());
        Ok(())
    }

    pub fn unfold(&self, mode: Mode) -> Matrix {
        let [d1, d2, d3] = self.dims;
        match mode {
            Mode::One => Matrix::from_vec(d1, d2 * d3, self.data.clone()).expect("unfold"),
            Mode::Two => {
                let mut m = Matrix::zeros(d2, d1 * d3);
                for i in 0..d1 {
                    for j in 0..d2 {
                        let src = &self.data[self.offset(i, j, 0)..self.offset(i, j, 0) + d3];
                        m.row_mut(j)[i * d3..(i + 1) * d3].copy_from_slice(src);
                    }
                }
                m
            }
            Mode::Three => {
                let mut m = Matrix::zeros(d3, d1 * d2);
                for i in 0..d1 {
                    for j in 0..d2 {
                        for k in 0..d3 {
                            m[(k, i * d2 + j)] = self.get(i, j, k);
                        }
                    }
                }
                m
            }
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(m: &Matrix, mode: Mode, dims: [usize; 3]) -> Result<Tensor3> {
        let [d1, d2, d3] = dims;
        let expected = match mode {
            Mode::One => (d1, d2 * d3),
            Mode::Two => (d2, d1 * d3),
            Mode::Three => (d3, d1 * d2),
        };
        ensure(m.shape() == expected, || {
            format!("fold {:?} matrix into dims {dims:?} along {mode:?}", m.shape())
        })?;
        let mut t = Tensor3::zeros(d1, d2, d3);
        match mode {
            Mode::One => t.data.copy_from_slice(m.data()),
            Mode::Two => {
                for i in 0..d1 {
                    for j in 0..d2 {
                        let o = t.offset(i, j, 0);
                        t.data[o..o + d3].copy_from_slice(&m.row(j)[i * d3..(i + 1) * d3]);
                    }
                }
            }
            Mode::Three => {
                for i in 0..d1 {
                    for j in 0..d2 {
                        for k in 0..d3 {
                            t.set(i, j, k, m[(k, i * d2 + j)]);
                        }
                    }
                }
            }
        }
        Ok(t)
    }

    /// `self ×_mode m`: replaces `dims[mode]` by `m.rows()`.
    pub fn mode_product(&self, m: &Matrix, mode: Mode) -> Result<Tensor3> {
        let n = mode.index();
        ensure(m.cols() == self.dims[n], || {
            format!(
                "mode-{} product: matrix has {} columns, tensor dim is {}",
                n + 1,
                m.cols(),
                self.dims[n]
            )
        })?;
        let mut dims = self.dims;
        dims[n] = m.rows();
        if mode == Mode::One {
            // Mode-1 unfolding is the raw buffer; skip the copy.
            let flat = Matrix::from_vec(self.dims[0], self.dims[1] * self.dims[2], self.data.clone())?;
            let prod = m.matmul(&flat)?;
            return Ok(Tensor3 {
                dims,
                data: prod.into_data(),
            });
        }
        let prod = m.matmul(&self.unfold(mode))?;
        Tensor3::fold(&prod, mode, dims)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        ensure(self.dims == other.dims, || {
            format!("subtract {:?} and {:?}", self.dims, other.dims)
        })?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        ensure(self.dims == other.dims, || {
            format!("add {:?} and {:?}", self.dims, other.dims)
        })?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
