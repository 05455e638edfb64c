//! Dense row-major `f64` matrices and the handful of products the probe needs.
//!
//! Every output element is produced by one fixed summation order, whatever
//! the thread count or SIMD width, so results are bitwise reproducible. The
//! SIMD variants are the same scalar code compiled with wider vector units;
//! no fused multiply-add is introduced, so they agree with the portable path
//! bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has empty rows.
        let cols = self.cols.max(1);
        self.data
            .chunks_exact(cols)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        const TILE: usize = 32;
        let (r, c) = (self.rows, self.cols);
        let mut out = Matrix::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        out.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self · otherᵀ`: (n×k)·(m×k)ᵀ → n×m.
    pub fn matmul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        matmul_bt(self, other)
    }

    /// `self · other`: (n×k)·(k×m) → n×m.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let m = other.cols;
        if m == 0 {
            return out;
        }
        out.data
            .par_chunks_mut(m)
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(orow, arow)| {
                for (p, &a) in arow.iter().enumerate() {
                    axpy(orow, a, other.row(p));
                }
            });
        out
    }

    /// `selfᵀ · other`: (n×p)ᵀ·(n×q) → p×q.
    pub fn transposed_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "outer dimensions differ");
        matmul_bt(&self.transpose(), &other.transpose())
    }
}

const LANES: usize = 8;
const WEIGHT_BLOCK: usize = 16;
const ROW_TILE: usize = 4;
const COL_TILE: usize = 4;

/// Dot product with a fixed lane-split summation order.
#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    reduce_lanes(&acc) + tail
}

#[inline(always)]
fn reduce_lanes(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// A 4×4 tile of dot products. Each result is bitwise equal to
/// `dot_body(a_r, b_c)`.
#[inline(always)]
fn dot_tile_body(a: [&[f64]; ROW_TILE], b: [&[f64]; COL_TILE]) -> [[f64; COL_TILE]; ROW_TILE] {
    let mut acc = [[[0.0f64; LANES]; COL_TILE]; ROW_TILE];
    let k = b[0].len();
    let full = k / LANES * LANES;
    let mut p = 0;
    while p < full {
        let y: [&[f64]; COL_TILE] = std::array::from_fn(|c| &b[c][p..p + LANES]);
        for r in 0..ROW_TILE {
            let x = &a[r][p..p + LANES];
            for c in 0..COL_TILE {
                for l in 0..LANES {
                    acc[r][c][l] += x[l] * y[c][l];
                }
            }
        }
        p += LANES;
    }
    let mut out = [[0.0; COL_TILE]; ROW_TILE];
    for r in 0..ROW_TILE {
        for c in 0..COL_TILE {
            let mut tail = 0.0;
            for (x, y) in a[r][full..].iter().zip(&b[c][full..]) {
                tail += x * y;
            }
            out[r][c] = reduce_lanes(&acc[r][c]) + tail;
        }
    }
    out
}

#[inline(always)]
fn axpy_body(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Same arithmetic as `dot_tile_body`, one zmm register per accumulator
    /// lane group. Multiplies and adds stay separate so results match the
    /// portable path bit for bit.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot_tile_avx512(a: [&[f64]; 4], b: [&[f64]; 4]) -> [[f64; 4]; 4] {
        let k = b[0].len();
        assert!(a.iter().chain(&b).all(|v| v.len() == k));
        let full = k / 8 * 8;
        let mut acc = [[_mm512_setzero_pd(); 4]; 4];
        let mut p = 0;
        while p < full {
            let y: [__m512d; 4] = std::array::from_fn(|c| unsafe { _mm512_loadu_pd(b[c].as_ptr().add(p)) });
            for r in 0..4 {
                let x = _mm512_loadu_pd(a[r].as_ptr().add(p));
                for c in 0..4 {
                    acc[r][c] = _mm512_add_pd(acc[r][c], _mm512_mul_pd(x, y[c]));
                }
            }
            p += 8;
        }
        let mut out = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                let mut tail = 0.0;
                for (x, y) in a[r][full..].iter().zip(&b[c][full..]) {
                    tail += x * y;
                }
                out[r][c] = reduce_zmm(acc[r][c]) + tail;
            }
        }
        out
    }

    /// The `reduce_lanes` tree in registers. IEEE addition is commutative,
    /// so every partial sum matches the scalar version exactly.
    #[target_feature(enable = "avx512f")]
    unsafe fn reduce_zmm(v: __m512d) -> f64 {
        let v = _mm512_add_pd(v, _mm512_permute_pd::<0b0101_0101>(v));
        let v = _mm512_add_pd(v, _mm512_permutex_pd::<0b0100_1110>(v));
        let v = _mm512_add_pd(v, _mm512_shuffle_f64x2::<0b0100_1110>(v, v));
        _mm512_cvtsd_f64(v)
    }
    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_tile_avx2(a: [&[f64]; 4], b: [&[f64]; 4]) -> [[f64; 4]; 4] {
        super::dot_tile_body(a, b)
    }
    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot_avx512(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }
    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }
    #[target_feature(enable = "avx512f")]
    pub unsafe fn axpy_avx512(out: &mut [f64], a: f64, x: &[f64]) {
        super::axpy_body(out, a, x)
    }
    #[target_feature(enable = "avx2")]
    pub unsafe fn axpy_avx2(out: &mut [f64], a: f64, x: &[f64]) {
        super::axpy_body(out, a, x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { simd::dot_avx512(a, b) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { simd::dot_avx2(a, b) };
        }
    }
    dot_body(a, b)
}

fn dot_tile(a: [&[f64]; ROW_TILE], b: [&[f64]; COL_TILE]) -> [[f64; COL_TILE]; ROW_TILE] {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { simd::dot_tile_avx512(a, b) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { simd::dot_tile_avx2(a, b) };
        }
    }
    dot_tile_body(a, b)
}

pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { simd::axpy_avx512(out, a, x) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { simd::axpy_avx2(out, a, x) };
        }
    }
    axpy_body(out, a, x)
}

/// (n×k)·(m×k)ᵀ. Work is split over blocks of `b` rows so each block stays
/// cache-resident while all of `a` streams past it.
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m) = (a.rows, b.rows);
    let mut out = Matrix::zeros(n, m);
    if n == 0 || m == 0 {
        return out;
    }
    let blocks: Vec<(usize, Vec<f64>)> = (0..m)
        .step_by(WEIGHT_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|j0| {
            let j1 = (j0 + WEIGHT_BLOCK).min(m);
            let width = j1 - j0;
            // block[i * width + (j - j0)]
            let mut block = vec![0.0; n * width];
            let put = |block: &mut [f64], i: usize, j: usize, v: f64| block[i * width + (j - j0)] = v;
            let mut i = 0;
            while i + ROW_TILE <= n {
                let tile: [&[f64]; ROW_TILE] = std::array::from_fn(|r| a.row(i + r));
                let mut j = j0;
                while j + COL_TILE <= j1 {
                    let cols: [&[f64]; COL_TILE] = std::array::from_fn(|c| b.row(j + c));
                    let d = dot_tile(tile, cols);
                    for (r, row) in d.iter().enumerate() {
                        for (c, &v) in row.iter().enumerate() {
                            put(&mut block, i + r, j + c, v);
                        }
                    }
                    j += COL_TILE;
                }
                for j in j..j1 {
                    for r in 0..ROW_TILE {
                        put(&mut block, i + r, j, dot(a.row(i + r), b.row(j)));
                    }
                }
                i += ROW_TILE;
            }
            for i in i..n {
                for j in j0..j1 {
                    put(&mut block, i, j, dot(a.row(i), b.row(j)));
                }
            }
            (j0, block)
        })
        .collect();
    for (j0, block) in blocks {
        let width = block.len() / n;
        for i in 0..n {
            out.row_mut(i)[j0..j0 + width].copy_from_slice(&block[i * width..(i + 1) * width]);
        }
    }
    out
}
