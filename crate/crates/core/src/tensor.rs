//! Row-major dense matrices and the handful of kernels the models need.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<F> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[n×m] = a[n×k] · w[k×m] + bias[m]`
pub fn affine<F: Scalar>(a: &[F], n: usize, k: usize, w: &[F], bias: &[F], m: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        o.copy_from_slice(bias);
        let ai = &a[i * k..(i + 1) * k];
        for (p, &x) in ai.iter().enumerate() {
            if x == F::zero() {
                continue;
            }
            let wp = &w[p * m..(p + 1) * m];
            for (oj, &wj) in o.iter_mut().zip(wp) {
                *oj += x * wj;
            }
        }
    }
}

/// Backward of [`affine`]: accumulates `dw += aᵀ·dy`, `db += Σ dy`, and, if requested,
/// writes `da = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward<F: Scalar>(
    a: &[F],
    n: usize,
    k: usize,
    w: &[F],
    m: usize,
    dy: &[F],
    dw: &mut [F],
    db: &mut [F],
    da: Option<&mut [F]>,
) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        if dyi.iter().all(|&g| g == F::zero()) {
            continue;
        }
        for (dbj, &g) in db.iter_mut().zip(dyi) {
            *dbj += g;
        }
        let ai = &a[i * k..(i + 1) * k];
        for (p, &x) in ai.iter().enumerate() {
            let dwp = &mut dw[p * m..(p + 1) * m];
            for (d, &g) in dwp.iter_mut().zip(dyi) {
                *d += x * g;
            }
        }
    }
    if let Some(da) = da {
        for i in 0..n {
            let dyi = &dy[i * m..(i + 1) * m];
            let dai = &mut da[i * k..(i + 1) * k];
            if dyi.iter().all(|&g| g == F::zero()) {
                dai.iter_mut().for_each(|d| *d = F::zero());
                continue;
            }
            for (p, d) in dai.iter_mut().enumerate() {
                let wp = &w[p * m..(p + 1) * m];
                *d = wp.iter().zip(dyi).map(|(&wj, &g)| wj * g).sum();
            }
        }
    }
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
