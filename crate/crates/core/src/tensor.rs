//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is a plain value: a [`Shape`] and a contiguous buffer. Gradient
//! state lives on the [`Tape`](crate::Tape), not here. The free functions at
//! the bottom are the raw kernels the tape dispatches to.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape", "rank must be at least 1"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(
                "shape",
                format!("axis {axis} has zero extent in {dims:?}"),
            ));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Validates an axis set against this shape, returning it sorted and
    /// deduplicated.
    pub fn check_axes(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&a| a >= self.rank()) {
            return Err(Error::shape(
                "axes",
                format!("axis {bad} out of range for rank {}", self.rank()),
            ));
        }
        Ok(sorted)
    }

    /// The shape left after collapsing `axes` to extent 1.
    pub fn reduced(&self, axes: &[usize]) -> Shape {
        let mut dims = self.0.clone();
        for &a in axes {
            dims[a] = 1;
        }
        Shape(dims)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but {} values were given",
                    shape,
                    shape.numel(),
                    values.len()
                ),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn from_shape(shape: Shape, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.0, values)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let values = vec![value; shape.numel()];
        Ok(Tensor { shape, values })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            values: vec![value],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.values.len() {
            return Err(Error::mismatch(
                "reshape",
                self.shape.dims(),
                shape.dims(),
            ));
        }
        Ok(Tensor {
            shape,
            values: self.values,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::mismatch(
                "max_abs_diff",
                self.dims(),
                other.dims(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Copies the listed rows (first-axis slices) into a new tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let row_len = self.numel() / self.dims()[0];
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= self.dims()[0] {
                return Err(Error::usage(format!(
                    "row {r} out of range for {:?}",
                    self.shape
                )));
            }
            values.extend_from_slice(&self.values[r * row_len..(r + 1) * row_len]);
        }
        let mut dims = self.dims().to_vec();
        dims[0] = rows.len();
        Tensor::new(dims, values)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

/// A rank-4 `B×C×H×W` feature map batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch(Tensor);

impl FeatureBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().rank() != 4 {
            return Err(Error::shape(
                "feature_batch",
                format!("expected B×C×H×W, got {:?}", tensor.shape()),
            ));
        }
        Ok(FeatureBatch(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_dims(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }
}

/// For every element of `full`, the flat index of the element of `reduced`
/// it collapses onto. `reduced` must have the same rank with each extent
/// either equal to `full`'s or 1. Indices are generated on the fly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct CollapseMap {
    // Axes of `full` after merging neighbours that step uniformly, with the
    // stride of each into `reduced` (0 where collapsed).
    dims: Vec<usize>,
    eff: Vec<usize>,
    len: usize,
    groups: usize,
}

impl CollapseMap {
    pub(crate) fn new(full: &Shape, reduced: &Shape) -> Self {
        let rstrides = reduced.strides();
        let mut dims: Vec<usize> = Vec::new();
        let mut eff: Vec<usize> = Vec::new();
        for (axis, &d) in full.dims().iter().enumerate().rev() {
            if d == 1 {
                continue;
            }
            let e = if reduced.dims()[axis] == 1 { 0 } else { rstrides[axis] };
            match (dims.last_mut(), eff.last()) {
                (Some(inner), Some(&inner_eff)) if e == inner_eff * *inner => *inner *= d,
                _ => {
                    dims.push(d);
                    eff.push(e);
                }
            }
        }
        if dims.is_empty() {
            dims.push(1);
            eff.push(0);
        }
        dims.reverse();
        eff.reverse();
        CollapseMap {
            dims,
            eff,
            len: full.numel(),
            groups: reduced.numel(),
        }
    }

    pub(crate) fn groups(&self) -> usize {
        self.groups
    }

    pub(crate) fn iter(&self) -> CollapseIter<'_> {
        CollapseIter {
            map: self,
            index: vec![0; self.dims.len()],
            base: 0,
            inner: 0,
            remaining: self.len,
        }
    }

    #[cfg(test)]
    pub(crate) fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

pub(crate) struct CollapseIter<'a> {
    map: &'a CollapseMap,
    index: Vec<usize>,
    base: usize,
    inner: usize,
    remaining: usize,
}

impl Iterator for CollapseIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let last = self.map.dims.len() - 1;
        if self.inner == self.map.dims[last] {
            self.inner = 0;
            for axis in (0..last).rev() {
                self.index[axis] += 1;
                self.base += self.map.eff[axis];
                if self.index[axis] < self.map.dims[axis] {
                    break;
                }
                self.base -= self.map.eff[axis] * self.index[axis];
                self.index[axis] = 0;
            }
        }
        let out = self.base + self.inner * self.map.eff[last];
        self.inner += 1;
        self.remaining -= 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for CollapseIter<'_> {}

/// Numpy-style broadcast of two shapes. Returns the output shape and, for
/// each operand that is not already of the output shape, its index map.
pub(crate) fn broadcast(
    op: &'static str,
    a: &Shape,
    b: &Shape,
) -> Result<(Shape, Option<CollapseMap>, Option<CollapseMap>)> {
    if a == b {
        return Ok((a.clone(), None, None));
    }
    let rank = a.rank().max(b.rank());
    let pad = |s: &Shape| {
        let mut d = vec![1; rank - s.rank()];
        d.extend_from_slice(s.dims());
        Shape(d)
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.dims().iter().zip(pb.dims()) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::mismatch(op, a.dims(), b.dims()));
        }
    }
    let out = Shape(out);
    let map_a = (pa.dims() != out.dims() || a.rank() != rank).then(|| CollapseMap::new(&out, &pa));
    let map_b = (pb.dims() != out.dims() || b.rank() != rank).then(|| CollapseMap::new(&out, &pb));
    Ok((out, map_a, map_b))
}

/// `a[M×K] · b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().rank() != 2 || b.shape().rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(Error::mismatch("matmul", a.dims(), b.dims()));
    }
    let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.values(), b.values(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

/// Accumulates `a[M×K] · b[K×N]` into `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose2(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1 square-kernel cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &Shape, kernel: &Shape, stride: usize, padding: usize) -> Result<Self> {
        let (i, k) = (input.dims(), kernel.dims());
        if i.len() != 4 || k.len() != 4 {
            return Err(Error::mismatch("conv2d", i, k));
        }
        if stride != 1 {
            return Err(Error::shape("conv2d", format!("stride {stride} unsupported, only 1")));
        }
        if k[2] != k[3] || !(k[2] == 1 || k[2] == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be 1×1 or 3×3, got {}×{}", k[2], k[3]),
            ));
        }
        if k[1] != i[1] {
            return Err(Error::mismatch("conv2d", i, k));
        }
        let (h, w, ks) = (i[2], i[3], k[2]);
        if h + 2 * padding < ks || w + 2 * padding < ks {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}×{w} with padding {padding} is smaller than kernel {ks}"),
            ));
        }
        Ok(ConvGeometry {
            batch: i[0],
            in_channels: i[1],
            out_channels: k[0],
            height: h,
            width: w,
            kernel: ks,
            padding,
            out_height: h + 2 * padding - ks + 1,
            out_width: w + 2 * padding - ks + 1,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Output columns `ox` whose input column `ox + kx - padding` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.width + self.padding).saturating_sub(kx).min(self.out_width);
        (lo, hi.max(lo))
    }

    /// Rows of the unfolded input: one per (input channel, kernel tap).
    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Calls `f(tap_row, out_offset, in_offset, len)` for every contiguous run
    /// shared by an unfolded row and one input row of sample `b`.
    #[inline]
    fn for_each_run(&self, b: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.kernel;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let tap = (ci * k + ky) * k + kx;
                    for oy in 0..self.out_height {
                        let iy = oy + ky;
                        if iy < self.padding || iy - self.padding >= self.height {
                            continue;
                        }
                        let in_row = ((b * self.in_channels + ci) * self.height + iy - self.padding) * self.width;
                        // lo >= padding - kx, so this never underflows
                        f(tap, oy * self.out_width + lo, in_row + lo + kx - self.padding, hi - lo);
                    }
                }
            }
        }
    }

    /// Unfolds sample `b` into `cols[patch_rows × out_plane]`, zero where the
    /// kernel overlaps padding.
    /// Positions that only see padding are never written, so a buffer zeroed
    /// once can be reused across samples.
    fn im2col(&self, b: usize, input: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        self.for_each_run(b, |tap, out_at, in_at, len| {
            let start = tap * plane + out_at;
            cols[start..start + len].copy_from_slice(&input[in_at..in_at + len]);
        });
    }

    /// Adds unfolded gradients back onto the input layout of sample `b`.
    fn col2im(&self, b: usize, cols: &[f64], grad_in: &mut [f64]) {
        let plane = self.out_plane();
        self.for_each_run(b, |tap, out_at, in_at, len| {
            let start = tap * plane + out_at;
            for (d, &c) in grad_in[in_at..in_at + len].iter_mut().zip(&cols[start..start + len]) {
                *d += c;
            }
        });
    }
}

/// Cross-correlation forward pass: per sample, `kernel[Cout × Cin·k²]`
/// times the unfolded input.
pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (rows, plane) = (g.patch_rows(), g.out_plane());
    let per_sample = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * per_sample];
    let mut cols = vec![0.0; rows * plane];
    for b in 0..g.batch {
        g.im2col(b, input, &mut cols);
        let dst = &mut out[b * per_sample..(b + 1) * per_sample];
        matmul_into(kernel, &cols, dst, g.out_channels, rows, plane);
    }
    out
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients of the cross-correlation w.r.t. input and kernel.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, plane) = (g.patch_rows(), g.out_plane());
    let per_sample = g.out_channels * plane;
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    // `cols` keeps its padding zeros between samples, so the input gradient
    // needs a buffer of its own.
    let mut cols = vec![0.0; rows * plane];
    let mut gcols = vec![0.0; if want_input { rows * plane } else { 0 }];
    for b in 0..g.batch {
        let go = &grad_out[b * per_sample..(b + 1) * per_sample];
        if let Some(gk) = gk.as_mut() {
            g.im2col(b, input, &mut cols);
            for co in 0..g.out_channels {
                let grow = &go[co * plane..(co + 1) * plane];
                for r in 0..rows {
                    let crow = &cols[r * plane..(r + 1) * plane];
                    gk[co * rows + r] += dot(grow, crow);
                }
            }
        }
        if let Some(gin) = gin.as_mut() {
            for r in 0..rows {
                let crow = &mut gcols[r * plane..(r + 1) * plane];
                crow.fill(0.0);
                for co in 0..g.out_channels {
                    let w = kernel[co * rows + r];
                    if w == 0.0 {
                        continue;
                    }
                    for (c, &gv) in crow.iter_mut().zip(&go[co * plane..(co + 1) * plane]) {
                        *c += w * gv;
                    }
                }
            }
            g.col2im(b, &gcols, gin);
        }
    }
    (gin, gk)
}
