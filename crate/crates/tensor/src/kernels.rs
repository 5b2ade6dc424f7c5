//! Raw numeric kernels shared by the tape's forward and backward passes.

use crate::error::{Result, TensorError};
use crate::tensor::numel;

/// A row-major matrix view described by strides, so transposes cost nothing.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// Logical view of a stored `[r, c]` block, optionally transposed.
    pub fn stored(r: usize, c: usize, transposed: bool) -> Self {
        if transposed {
            MatView { rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            MatView { rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }

    pub fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a·b + beta·c` on strided views.
pub(crate) fn gemm(a: &[f32], av: MatView, b: &[f32], bv: MatView, beta: f32, c: &mut [f32], cv: MatView) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * cv.rs + j as isize * cv.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(max_offset(av) < a.len() && max_offset(bv) < b.len() && max_offset(cv) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

fn max_offset(v: MatView) -> usize {
    ((v.rows.max(1) - 1) as isize * v.rs + (v.cols.max(1) - 1) as isize * v.cs) as usize
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out)
}

/// How an operand's elements line up with a broadcast output.
pub(crate) enum Bcast {
    /// Same number of elements, same layout.
    Same,
    /// Operand repeats every `len` output elements (trailing-dims match).
    Cycle(usize),
    /// Each output element maps through an explicit index table.
    Table(Vec<u32>),
}

impl Bcast {
    pub fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in = numel(input);
        let n_out = numel(out);
        if n_in == n_out {
            return Bcast::Same;
        }
        // Strip leading unit dims then check whether input equals a suffix of out.
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Cycle(n_in.max(1));
        }
        let rank = out.len();
        let offset = rank - input.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            strides[i + offset] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        let mut table = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        for _ in 0..n_out {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>() as u32);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Bcast::Table(table)
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(len) => i % len,
            Bcast::Table(t) => t[i] as usize,
        }
    }
}

/// Element-wise binary op with broadcasting.
pub(crate) fn zip_broadcast(
    a: &[f32],
    ab: &Bcast,
    b: &[f32],
    bb: &Bcast,
    n: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    match (ab, bb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Cycle(len)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks(*len) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => (0..n).map(|i| f(a[ab.at(i)], b[bb.at(i)])).collect(),
    }
}

/// Sums `g` (output-shaped) back down to an operand of `len` elements.
pub(crate) fn reduce_into(acc: &mut [f32], map: &Bcast, g: impl Iterator<Item = f32>) {
    match map {
        Bcast::Same => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        _ => {
            for (i, v) in g.enumerate() {
                acc[map.at(i)] += v;
            }
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    // Iterate over all but the last output axis, copying strided runs.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let outer = n / run.max(1);
    for _ in 0..outer {
        let base: usize = idx[..last].iter().zip(&src_strides[..last]).map(|(i, s)| i * s).sum();
        for j in 0..run {
            out.push(data[base + j * run_stride]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operands() {
        // a = [[1,2],[3,4]], b stored as [[5,6],[7,8]] and used transposed.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(&a, MatView::stored(2, 2, false), &b, MatView::stored(2, 2, true), 0.0, &mut c, MatView::stored(2, 2, false));
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1], &[1, 5]).unwrap(), vec![4, 5]);
        assert!(broadcast_shape("t", &[4, 3], &[4]).is_err());
    }

    #[test]
    fn column_broadcast_uses_table() {
        let map = Bcast::new(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|i| map.at(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_swaps_middle_axes() {
        let data: Vec<f32> = (0..24).map(|x| x as f32).collect();
        let (out, shape) = permute(&data, &[2, 3, 4], &[0, 2, 1]);
        assert_eq!(shape, vec![2, 4, 3]);
        assert_eq!(&out[..6], &[0.0, 4.0, 8.0, 1.0, 5.0, 9.0]);
        let (back, back_shape) = permute(&out, &shape, &[0, 2, 1]);
        assert_eq!(back_shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3f64;
            let xf = x as f64;
            let f = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
            let numeric = (f(xf + h) - f(xf - h)) / (2.0 * h);
            assert!((gelu_grad(x) as f64 - numeric).abs() < 1e-4);
        }
    }
}
