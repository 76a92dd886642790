//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built on. Nothing in here tracks gradients.

use std::fmt;
use std::sync::Arc;

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= *d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the (higher or equal rank) `out` shape,
/// zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every element of `out_shape` in row-major order and calls
/// `f(out_index, [offsets...])` once per contiguous run along the last axis.
fn for_each_run<const K: usize>(
    out_shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K], usize, [usize; K]),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, [0; K], 1, [0; K]);
        return;
    }
    let last = out_shape[rank - 1];
    let inner: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let outer: usize = out_shape[..rank - 1].iter().product();
    if last == 0 || outer == 0 {
        return;
    }
    let mut counter = vec![0usize; rank - 1];
    let mut offsets = [0usize; K];
    for run in 0..outer {
        f(run * last, offsets, last, inner);
        // increment the multi-index over the leading axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            counter[axis] += 1;
            for k in 0..K {
                offsets[k] += strides[k][axis];
            }
            if counter[axis] < out_shape[axis] {
                break;
            }
            for k in 0..K {
                offsets[k] -= strides[k][axis] * out_shape[axis];
            }
            counter[axis] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Tensor::new(self.shape.clone(), data);
        }
        if other.len() == 1 && other.shape.len() <= self.shape.len() {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        let (a, b) = (&self.data, &other.data);
        for_each_run(&out_shape, [&sa, &sb], |o, [oa, ob], len, [ia, ib]| {
            let dst = &mut out[o..o + len];
            match (ia, ib) {
                (1, 1) => {
                    for ((d, x), y) in dst.iter_mut().zip(&a[oa..oa + len]).zip(&b[ob..ob + len]) {
                        *d = f(*x, *y);
                    }
                }
                (0, 1) => {
                    let x = a[oa];
                    for (d, y) in dst.iter_mut().zip(&b[ob..ob + len]) {
                        *d = f(x, *y);
                    }
                }
                (1, 0) => {
                    let y = b[ob];
                    for (d, x) in dst.iter_mut().zip(&a[oa..oa + len]) {
                        *d = f(*x, y);
                    }
                }
                _ => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = f(a[oa + i * ia], b[ob + i * ib]);
                    }
                }
            }
        });
        Tensor::new(out_shape, out)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Materializes `self` broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let check = broadcast_shapes(&self.shape, shape);
        assert!(
            check.as_deref() == Some(shape),
            "cannot broadcast {:?} to {shape:?}",
            self.shape
        );
        let sa = broadcast_strides(&self.shape, shape);
        let mut out = vec![0.0; numel(shape)];
        let a = &self.data;
        for_each_run(shape, [&sa], |o, [oa], len, [ia]| {
            let dst = &mut out[o..o + len];
            if ia == 1 {
                dst.copy_from_slice(&a[oa..oa + len]);
            } else {
                dst.fill(a[oa]);
            }
        });
        Tensor::new(shape.to_vec(), out)
    }

    /// Sums `self` down to `shape`, the adjoint of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        if shape.iter().all(|&d| d == 1) {
            return Tensor::new(shape.to_vec(), vec![self.sum()]);
        }
        let check = broadcast_shapes(shape, &self.shape);
        assert!(
            check.as_deref() == Some(&self.shape[..]),
            "cannot sum {:?} down to {shape:?}",
            self.shape
        );
        let src_strides = contiguous_strides(&self.shape);
        let dst_strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        let a = &self.data;
        for_each_run(&self.shape, [&src_strides, &dst_strides], |_, [os, od], len, [_, id]| {
            let src = &a[os..os + len];
            if id == 0 {
                out[od] += src.iter().sum::<f64>();
            } else {
                for (d, s) in out[od..od + len].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        });
        Tensor::new(shape.to_vec(), out)
    }

    /// General axis permutation: `out.shape[i] = self.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape.len(), "permutation rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let own = contiguous_strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let mut out = vec![0.0; self.len()];
        let a = &self.data;
        for_each_run(&out_shape, [&src_strides], |o, [os], len, [is]| {
            for (i, d) in out[o..o + len].iter_mut().enumerate() {
                *d = a[os + i * is];
            }
        });
        Tensor::new(out_shape, out)
    }

    /// `op(a) @ op(b)` for 2-D tensors, with optional transposition of either
    /// operand.
    pub fn matmul(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2-D, got {:?}", self.shape);
        assert_eq!(other.shape.len(), 2, "matmul rhs must be 2-D, got {:?}", other.shape);
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: pointers and strides describe the live buffers above with
            // exactly the dimensions checked by the assertions.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Sliding windows over axis 1 of a `[B, T, C]` tensor, zero padded:
    /// `[B, T_out, k * C]` with `T_out = (T + 2 pad - k) / stride + 1`.
    pub fn unfold(&self, kernel: usize, stride: usize, pad: usize) -> Tensor {
        let [b, t, c] = self.shape[..] else {
            panic!("unfold expects [B, T, C], got {:?}", self.shape)
        };
        let t_out = unfold_len(t, kernel, stride, pad)
            .unwrap_or_else(|| panic!("sequence of length {t} too short for kernel {kernel}"));
        let mut out = vec![0.0; b * t_out * kernel * c];
        let a = &self.data;
        for bi in 0..b {
            for to in 0..t_out {
                for j in 0..kernel {
                    let src_t = (to * stride + j) as isize - pad as isize;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src = (bi * t + src_t as usize) * c;
                    let dst = ((bi * t_out + to) * kernel + j) * c;
                    out[dst..dst + c].copy_from_slice(&a[src..src + c]);
                }
            }
        }
        Tensor::new(vec![b, t_out, kernel * c], out)
    }

    /// Adjoint of [`Tensor::unfold`]: scatters windows back onto a length-`t`
    /// sequence, summing overlaps.
    pub fn fold(&self, t: usize, kernel: usize, stride: usize, pad: usize) -> Tensor {
        let [b, t_out, kc] = self.shape[..] else {
            panic!("fold expects [B, T_out, k*C], got {:?}", self.shape)
        };
        let c = kc / kernel;
        let mut out = vec![0.0; b * t * c];
        let a = &self.data;
        for bi in 0..b {
            for to in 0..t_out {
                for j in 0..kernel {
                    let src_t = (to * stride + j) as isize - pad as isize;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let dst = (bi * t + src_t as usize) * c;
                    let src = ((bi * t_out + to) * kernel + j) * c;
                    for (d, s) in out[dst..dst + c].iter_mut().zip(&a[src..src + c]) {
                        *d += *s;
                    }
                }
            }
        }
        Tensor::new(vec![b, t, c], out)
    }

    /// Row gather along axis 0.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let row = self.len() / self.shape[0].max(1);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, out)
    }

    /// Adjoint of [`Tensor::gather_rows`]: `out[idx[r]] += self[r]`.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Tensor {
        let row = self.len() / self.shape[0].max(1);
        let mut out = vec![0.0; rows * row];
        for (r, &i) in idx.iter().enumerate() {
            for (d, s) in out[i * row..(i + 1) * row].iter_mut().zip(&self.data[r * row..(r + 1) * row]) {
                *d += *s;
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, out)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let dim = self.shape[axis];
        assert!(start + len <= dim, "narrow {start}+{len} out of range for axis of size {dim}");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }

    /// Adjoint of [`Tensor::narrow`]: embeds `self` at `start` inside a zero
    /// tensor with `total` entries along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let len = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        let first = parts[0];
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, out)
    }

    /// Elementwise choice: `mask ? self : other`.
    pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "select operands differ in shape");
        assert_eq!(mask.len(), a.len(), "select mask length mismatch");
        let data = mask
            .iter()
            .zip(a.data.iter().zip(b.data.iter()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Tensor::new(a.shape.clone(), data)
    }
}

/// Output length of an unfold / strided convolution, `None` if the input is
/// shorter than the kernel.
pub fn unfold_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
