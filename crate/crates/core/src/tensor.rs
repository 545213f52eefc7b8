//! Dense row-major tensors and the raw numeric kernels the graph is built on.

use crate::{Error, Real, Result};

/// Dense n-dimensional array of [`Real`] values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Real>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: Real) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> Real) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    /// Copies samples `indices` along the leading axis into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let row: usize = self.shape[1..].iter().product();
        let n = self.shape[0];
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::dim(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }
}

const MR: usize = 4;
const NR: usize = 4;
const KC: usize = 256;
const NC: usize = 512;

/// `c[m×n] += A · B` with `A(i, p)` read through `a_at` and `B(p, j)` through `b_at`.
///
/// Work is split into `KC × NC` panels of `B` and `MR × NR` register tiles of
/// `C`; both operands are packed into zero-padded strips first. Every output
/// element sums its panels in increasing `p` order, so the result depends on
/// nothing but the operand shapes.
fn gemm_packed(
    m: usize,
    k: usize,
    n: usize,
    a_at: impl Fn(usize, usize) -> Real,
    b_at: impl Fn(usize, usize) -> Real,
    c: &mut [Real],
) {
    let kc_max = KC.min(k);
    let strips = NC.min(n).div_ceil(NR);
    let mut bpack = vec![0.0; strips * kc_max * NR];
    let mut apack = vec![0.0; kc_max * MR];
    for j0 in (0..n).step_by(NC) {
        let nc = NC.min(n - j0);
        for p0 in (0..k).step_by(KC) {
            let kc = KC.min(k - p0);
            for s in 0..nc.div_ceil(NR) {
                let strip = &mut bpack[s * kc * NR..(s + 1) * kc * NR];
                for (pp, row) in strip.chunks_exact_mut(NR).enumerate() {
                    for (jj, v) in row.iter_mut().enumerate() {
                        let j = s * NR + jj;
                        *v = if j < nc { b_at(p0 + pp, j0 + j) } else { 0.0 };
                    }
                }
            }
            for i0 in (0..m).step_by(MR) {
                let mr = MR.min(m - i0);
                let apanel = &mut apack[..kc * MR];
                for (pp, col) in apanel.chunks_exact_mut(MR).enumerate() {
                    for (r, v) in col.iter_mut().enumerate() {
                        *v = if r < mr { a_at(i0 + r, p0 + pp) } else { 0.0 };
                    }
                }
                for s in 0..nc.div_ceil(NR) {
                    let strip = &bpack[s * kc * NR..(s + 1) * kc * NR];
                    let mut acc = [[0.0; NR]; MR];
                    for (av, bv) in apanel.chunks_exact(MR).zip(strip.chunks_exact(NR)) {
                        for (acc_r, &ar) in acc.iter_mut().zip(av) {
                            for (x, &b) in acc_r.iter_mut().zip(bv) {
                                *x += ar * b;
                            }
                        }
                    }
                    let nr = NR.min(nc - s * NR);
                    for (r, acc_r) in acc.iter().enumerate().take(mr) {
                        let start = (i0 + r) * n + j0 + s * NR;
                        for (cv, &x) in c[start..start + nr].iter_mut().zip(acc_r) {
                            *cv += x;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_packed(m, k, n, |i, p| a[i * k + p], |p, j| b[p * n + j], c);
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_packed(m, k, n, |i, p| a[p * m + i], |p, j| b[p * n + j], c);
}

/// `c[m×n] += a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    gemm_packed(m, k, n, |i, p| a[i * k + p], |p, j| b[j * k + p], c);
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::dim("convolution stride must be at least 1"));
        }
        if self.kernel_h > self.height + 2 * self.padding
            || self.kernel_w > self.width + 2 * self.padding
        {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.height + 2 * self.padding,
                self.width + 2 * self.padding
            )));
        }
        Ok(())
    }
}

/// Unfolds one `[C×H×W]` sample into a `[C·kh·kw × OH·OW]` patch matrix whose
/// rows start `row_stride` elements apart, so several samples can share one
/// wide matrix.
pub fn im2col(geo: &ConvGeometry, x: &[Real], cols: &mut [Real], row_stride: usize) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let spatial = oh * ow;
    let pad = geo.padding as isize;
    for c in 0..geo.channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let out = &mut cols[row * row_stride..row * row_stride + spatial];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - pad;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= geo.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= geo.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the sample.
pub fn col2im(geo: &ConvGeometry, cols: &[Real], dx: &mut [Real], row_stride: usize) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let spatial = oh * ow;
    let pad = geo.padding as isize;
    for c in 0..geo.channels {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let src = &cols[row * row_stride..row * row_stride + spatial];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - pad;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kj) as isize - pad;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Offsets into an operand of shape `src` for every element of the broadcast
/// shape `out`, in row-major order of `out`.
pub fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    // Strides of `src` aligned to `out`, zero on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let d = dim_from_right(src, rank - 1 - i);
        strides[i] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out[axis] {
                break;
            }
            offset -= strides[axis] * out[axis];
            index[axis] = 0;
        }
    }
    offsets
}
