//! Dense row-major f64 tensors and the raw kernels behind the graph ops.
//!
//! Kernels parallelize over disjoint output rows (see [`crate::par`]); the
//! arithmetic inside one row is always sequential, which keeps results
//! independent of thread count.

use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor with no shape")
    }

    /// Product of all axes except the last: the number of rows a matrix
    /// kernel sees.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        let mut out = Tensor::zeros(&self.shape);
        let src = &self.data;
        par::fill_indexed(&mut out.data, |i| f(src[i]));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// out = a @ b for row-major a [m x k] and b [k x n].
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    par::for_each_chunk(out, n, |i, row| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(b_row) {
                *slot += av * bv;
            }
        }
    });
}

/// Sequential twin of [`matmul_into`], kept for benchmark comparison.
pub fn seq_matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    par::seq_for_each_chunk(out, n, |i, row| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(b_row) {
                *slot += av * bv;
            }
        }
    });
}

/// out = a^T @ b for a [m x k], b [m x n]; the gradient-of-weights shape.
pub fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    par::for_each_chunk(out, n, |p, row| {
        row.fill(0.0);
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(b_row) {
                *slot += av * bv;
            }
        }
    });
}

/// out = a @ b^T for a [m x k], b [n x k]; the gradient-of-inputs shape.
pub fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    par::for_each_chunk(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *slot = acc;
        }
    });
}

/// Numerically stable softmax over each row of length `n`.
pub fn softmax_rows_into(out: &mut [f64], x: &[f64], n: usize) {
    assert_eq!(out.len(), x.len());
    assert!(n > 0 && x.len() % n == 0);
    par::for_each_chunk(out, n, |i, row| {
        let src = &x[i * n..(i + 1) * n];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (slot, &v) in row.iter_mut().zip(src) {
            let e = (v - max).exp();
            *slot = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for slot in row.iter_mut() {
            *slot *= inv;
        }
    });
}
