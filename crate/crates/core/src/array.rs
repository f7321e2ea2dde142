//! Dense row-major f64 arrays and the shape algebra used everywhere else.
//!
//! An [`Array`] is an immutable value: construct it, then read it. The data
//! buffer is reference counted, so cloning an array (or capturing one in a
//! tape closure) never copies the floats. Rank 0 is allowed and denotes a
//! scalar. Binary operations broadcast trailing-aligned, NumPy style: each
//! trailing dimension pair must be equal or one of them must be 1.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Clone, Debug)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Array {
    /// Wraps a buffer. The product of `shape` must equal `data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Array> {
        if numel(&shape) != data.len() {
            return Err(Error::op(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Array { shape, data: Arc::new(data), requires_grad: false })
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Array {
        Array { shape: vec![], data: Arc::new(vec![v]), requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Array {
        Array::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Array {
        Array::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Array {
        Array {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
            requires_grad: false,
        }
    }

    /// Builds an array by calling `f` with the flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Array {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f(i));
        }
        Array { shape: shape.to_vec(), data: Arc::new(data), requires_grad: false }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Array {
        Array::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Returns the same array flagged as a differentiation leaf.
    pub fn with_grad(mut self) -> Array {
        self.requires_grad = true;
        self
    }

    /// Value of a rank-0 or single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element by multi-index, for tests and small helpers.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank(), "at() index rank mismatch");
        let mut flat = 0;
        for (d, (&i, &s)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(i < s, "at(): index {} out of bounds in axis {}", i, d);
            flat = flat * s + i;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        if numel(shape) != self.len() {
            return Err(Error::op(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data: Arc::clone(&self.data), requires_grad: false })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            requires_grad: false,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl PartialEq for Array {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Largest absolute elementwise difference; infinity on shape mismatch.
pub fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- broadcasting -----------------------------------------------------

/// Shape of `lhs op rhs` under trailing-aligned broadcasting.
pub fn broadcast_shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let l = if i < rank - lhs.len() { 1 } else { lhs[i - (rank - lhs.len())] };
        let r = if i < rank - rhs.len() { 1 } else { rhs[i - (rank - rhs.len())] };
        out[i] = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes being broadcast, for an input
/// of `shape` viewed as `out_rank`-dimensional.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_rank = out_shape.len();
    let offset = out_rank - shape.len();
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Elementwise combine with broadcasting.
pub fn binary_op(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    // Fast path: identical shapes.
    if a.shape == b.shape {
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Array { shape: a.shape.clone(), data: Arc::new(data), requires_grad: false });
    }
    // Fast path: scalar on either side.
    if b.len() == 1 {
        let s = b.data[0];
        return Ok(a.map(|x| f(x, s)));
    }
    if a.len() == 1 {
        let s = a.data[0];
        return Ok(b.map(|y| f(s, y)));
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    // Fast path: rhs is a trailing block of lhs (bias rows and the like).
    if a.shape == out_shape && out_shape.ends_with(&b.shape) {
        let block = b.len();
        let mut data = Vec::with_capacity(a.len());
        for chunk in a.data.chunks_exact(block) {
            for (x, y) in chunk.iter().zip(b.data.iter()) {
                data.push(f(*x, *y));
            }
        }
        return Ok(Array { shape: out_shape, data: Arc::new(data), requires_grad: false });
    }
    // General strided walk.
    let n = numel(&out_shape);
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(a.data[off_a], b.data[off_b]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Ok(Array { shape: out_shape, data: Arc::new(data), requires_grad: false })
}

/// Sums `src` down to `shape` (the adjoint of broadcasting `shape` up to
/// `src.shape()`).
pub fn sum_to(src: &Array, shape: &[usize]) -> Result<Array> {
    if src.shape() == shape {
        return Ok(src.clone());
    }
    if broadcast_shapes("sum_to", shape, src.shape())? != src.shape {
        return Err(Error::ShapeMismatch {
            op: "sum_to",
            lhs: src.shape.clone(),
            rhs: shape.to_vec(),
        });
    }
    let strides = broadcast_strides(shape, &src.shape);
    let rank = src.rank();
    let mut out = vec![0.0; numel(shape)];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in src.data.iter() {
        out[off] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < src.shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * src.shape[ax];
        }
    }
    Array::from_vec(shape.to_vec(), out)
}

// ---- arithmetic -------------------------------------------------------

pub fn add(a: &Array, b: &Array) -> Result<Array> {
    binary_op("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Array, b: &Array) -> Result<Array> {
    binary_op("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Array, b: &Array) -> Result<Array> {
    binary_op("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Array, b: &Array) -> Result<Array> {
    binary_op("div", a, b, |x, y| x / y)
}

// ---- matmul -----------------------------------------------------------

/// Batched matrix product. Both operands must have rank >= 2; the trailing
/// two axes multiply as matrices and every leading axis broadcasts.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::op(
            "matmul",
            format!("needs rank >= 2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, ka) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if ka != kb {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let lead = broadcast_shapes("matmul", &a.shape[..a.rank() - 2], &b.shape[..b.rank() - 2])?;
    let batches = numel(&lead);
    let sa = broadcast_strides(&a.shape[..a.rank() - 2], &lead);
    let sb = broadcast_strides(&b.shape[..b.rank() - 2], &lead);

    let mut out_shape = lead.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batches * m * n];

    let mut idx = vec![0usize; lead.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for batch in 0..batches {
        let am = &a.data[off_a * m * ka..(off_a + 1) * m * ka];
        let bm = &b.data[off_b * kb * n..(off_b + 1) * kb * n];
        let om = &mut out[batch * m * n..(batch + 1) * m * n];
        matmul_kernel(am, bm, om, m, ka, n);
        for ax in (0..lead.len()).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < lead[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * lead[ax];
            off_b -= sb[ax] * lead[ax];
        }
    }
    Array::from_vec(out_shape, out)
}

/// out += a (m x k) times b (k x n), accumulated row by row so the inner
/// loop runs over contiguous memory.
fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Swaps two axes.
pub fn transpose(a: &Array, ax0: usize, ax1: usize) -> Result<Array> {
    let rank = a.rank();
    if ax0 >= rank {
        return Err(Error::Axis { op: "transpose", axis: ax0, rank });
    }
    if ax1 >= rank {
        return Err(Error::Axis { op: "transpose", axis: ax1, rank });
    }
    if ax0 == ax1 {
        return Ok(a.clone());
    }
    let mut out_shape = a.shape.clone();
    out_shape.swap(ax0, ax1);

    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * a.shape[i + 1];
    }
    let mut perm_strides = src_strides.clone();
    perm_strides.swap(ax0, ax1);

    let n = a.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(a.data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= perm_strides[ax] * out_shape[ax];
        }
    }
    Array::from_vec(out_shape, out)
}

/// Swaps the trailing two axes of a rank >= 2 array.
pub fn transpose_last(a: &Array) -> Result<Array> {
    if a.rank() < 2 {
        return Err(Error::op("transpose_last", format!("rank {} array", a.rank())));
    }
    transpose(a, a.rank() - 2, a.rank() - 1)
}

// ---- reductions and joins ----------------------------------------------

fn check_axis(op: &'static str, a: &Array, axis: usize) -> Result<()> {
    if axis >= a.rank() {
        return Err(Error::Axis { op, axis, rank: a.rank() });
    }
    Ok(())
}

/// Sum along one axis. With `keepdims` the axis stays with extent 1.
pub fn sum_axis(a: &Array, axis: usize, keepdims: bool) -> Result<Array> {
    check_axis("sum_axis", a, axis)?;
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&a.data[base..base + inner]) {
                *d += v;
            }
        }
    }
    let mut shape: Vec<usize> = a.shape.clone();
    if keepdims {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Array::from_vec(shape, out)
}

pub fn mean_axis(a: &Array, axis: usize, keepdims: bool) -> Result<Array> {
    check_axis("mean_axis", a, axis)?;
    let n = a.shape[axis] as f64;
    Ok(sum_axis(a, axis, keepdims)?.map(|v| v / n))
}

/// Maximum along one axis, kept with extent 1 for broadcasting.
pub fn max_axis_keep(a: &Array, axis: usize) -> Result<Array> {
    check_axis("max_axis", a, axis)?;
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&a.data[base..base + inner]) {
                if v > *d {
                    *d = v;
                }
            }
        }
    }
    let mut shape = a.shape.clone();
    shape[axis] = 1;
    Array::from_vec(shape, out)
}

pub fn sum_all(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum())
}

pub fn mean_all(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
}

/// Concatenates along `axis`. All other axes must agree.
pub fn concat(axis: usize, parts: &[&Array]) -> Result<Array> {
    if parts.is_empty() {
        return Err(Error::op("concat", "no inputs"));
    }
    let rank = parts[0].rank();
    check_axis("concat", parts[0], axis)?;
    for p in parts {
        if p.rank() != rank
            || p.shape[..axis] != parts[0].shape[..axis]
            || p.shape[axis + 1..] != parts[0].shape[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let outer: usize = parts[0].shape[..axis].iter().product();
    let inner: usize = parts[0].shape[axis + 1..].iter().product();
    let total_mid: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_mid * inner);
    for o in 0..outer {
        for p in parts {
            let mid = p.shape[axis];
            let base = o * mid * inner;
            out.extend_from_slice(&p.data[base..base + mid * inner]);
        }
    }
    let mut shape = parts[0].shape.clone();
    shape[axis] = total_mid;
    Array::from_vec(shape, out)
}

/// Stacks equally shaped arrays along a fresh leading axis.
pub fn stack(parts: &[&Array]) -> Result<Array> {
    if parts.is_empty() {
        return Err(Error::op("stack", "no inputs"));
    }
    let mut out = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape != parts[0].shape {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        out.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&parts[0].shape);
    Array::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Array::from_vec(vec![2, 3], vec![1.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_preserves() {
        let a = arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = matmul(&Array::eye(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = matmul(&a, &Array::zeros(&[2, 4])).unwrap();
        assert_eq!(out, Array::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // Independent triple-loop reference on a fixed 3x4 by 4x2 case.
        let mut rng = 9u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a_data: Vec<f64> = (0..12).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..8).map(|_| next()).collect();
        let a = arr(&[3, 4], &a_data);
        let b = arr(&[4, 2], &b_data);
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
                want[i * 2 + j] = acc;
            }
        }
        let got = matmul(&a, &b).unwrap();
        assert!(max_abs_diff(&got, &arr(&[3, 2], &want)) < 1e-15);
    }

    #[test]
    fn matmul_broadcasts_leading_axes() {
        // [2,2,3] x [3,2]: the rank-2 rhs applies to both batch entries.
        let a = Array::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Array::from_fn(&[3, 2], |i| (i as f64) * 0.5);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        let single = matmul(&arr(&[2, 3], &a.data()[6..12]), &b).unwrap();
        assert!(max_abs_diff(&arr(&[2, 2], &out.data()[4..8]), &single) < 1e-15);
    }

    #[test]
    fn matmul_inner_dim_mismatch_reports_shapes() {
        let a = Array::zeros(&[2, 3]);
        let b = Array::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn broadcast_add_bias_row() {
        let x = arr(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = arr(&[3], &[10.0, 20.0, 30.0]);
        let out = add(&x, &b).unwrap();
        assert_eq!(out, arr(&[2, 3], &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]));
    }

    #[test]
    fn broadcast_keepdims_column() {
        let x = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = arr(&[2, 1], &[10.0, 100.0]);
        let out = mul(&x, &c).unwrap();
        assert_eq!(out, arr(&[2, 2], &[10.0, 20.0, 300.0, 400.0]));
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let err = add(&Array::zeros(&[2, 3]), &Array::zeros(&[2, 2])).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn sum_to_undoes_broadcast() {
        let g = Array::ones(&[4, 3]);
        assert_eq!(sum_to(&g, &[3]).unwrap(), arr(&[3], &[4.0, 4.0, 4.0]));
        assert_eq!(sum_to(&g, &[4, 1]).unwrap(), arr(&[4, 1], &[3.0, 3.0, 3.0, 3.0]));
        assert_eq!(sum_to(&g, &[]).unwrap().item(), 12.0);
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = Array::from_fn(&[2, 3, 4], |i| i as f64);
        let t = transpose(&a, 0, 2).unwrap();
        assert_eq!(t.shape(), &[4, 3, 2]);
        assert_eq!(t.at(&[1, 2, 0]), a.at(&[0, 2, 1]));
        let back = transpose(&t, 0, 2).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn reductions_match_hand_values() {
        let a = arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(sum_axis(&a, 0, false).unwrap(), arr(&[3], &[5.0, 7.0, 9.0]));
        assert_eq!(sum_axis(&a, 1, false).unwrap(), arr(&[2], &[6.0, 15.0]));
        assert_eq!(mean_axis(&a, 1, true).unwrap(), arr(&[2, 1], &[2.0, 5.0]));
        assert_eq!(sum_all(&a).item(), 21.0);
        assert_eq!(mean_all(&a).item(), 3.5);
        assert_eq!(max_axis_keep(&a, 1).unwrap(), arr(&[2, 1], &[3.0, 6.0]));
    }

    #[test]
    fn concat_and_stack() {
        let a = arr(&[1, 2], &[1.0, 2.0]);
        let b = arr(&[1, 2], &[3.0, 4.0]);
        assert_eq!(concat(0, &[&a, &b]).unwrap(), arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(concat(1, &[&a, &b]).unwrap(), arr(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let s = stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
    }

    #[test]
    fn scalar_arrays_broadcast_everywhere() {
        let a = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = mul(&a, &Array::scalar(2.0)).unwrap();
        assert_eq!(out, arr(&[2, 2], &[2.0, 4.0, 6.0, 8.0]));
    }
}
