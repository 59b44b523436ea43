//! Forward and backward kernels on raw buffers. The tape wires these into
//! the autodiff graph; they know nothing about gradients bookkeeping.

use super::real::{matmul, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, in_c, h, w], &[out_c, k_in, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(format!(
                "conv2d expects 4-D input and kernel, got input {input:?} and kernel {kernel:?}"
            )));
        };
        if k_in != in_c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?} (padding {pad})"
            )));
        }
        Ok(ConvGeom {
            batch,
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn in_offset(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }
}

/// Unfolds `x` into a `(in_c·kh·kw) × (batch·oh·ow)` patch matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * n];
    for ci in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..g.batch {
                    let plane = &x[(bi * g.in_c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_offset(oy, ki, g.h) else {
                            continue;
                        };
                        let src = &plane[iy * g.w..][..g.w];
                        let out = &mut dst[(bi * g.oh + oy) * g.ow..][..g.ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            if let Some(ix) = g.in_offset(ox, kj, g.w) {
                                *o = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..g.batch {
                    let plane = &mut dx[(bi * g.in_c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_offset(oy, ki, g.h) else {
                            continue;
                        };
                        let drow = &mut plane[iy * g.w..][..g.w];
                        let s = &src[(bi * g.oh + oy) * g.ow..][..g.ow];
                        for (ox, &v) in s.iter().enumerate() {
                            if let Some(ix) = g.in_offset(ox, kj, g.w) {
                                drow[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_c] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                g.out_c
            )));
        }
    }
    let cols = im2col(&g, x.data());
    let n = g.col_cols();
    let mut out = vec![T::zero(); g.out_c * n];
    matmul(g.out_c, g.col_rows(), n, kernel.data(), false, &cols, false, &mut out, false);

    // [out_c, batch, oh*ow] -> [batch, out_c, oh*ow]
    let plane = g.oh * g.ow;
    let mut y = vec![T::zero(); g.batch * g.out_c * plane];
    for co in 0..g.out_c {
        let bias_v = bias.map_or(T::zero(), |b| b.data()[co]);
        for bi in 0..g.batch {
            let src = &out[(co * g.batch + bi) * plane..][..plane];
            let dst = &mut y[(bi * g.out_c + co) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias_v;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![g.batch, g.out_c, g.oh, g.ow], y),
        g,
    ))
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dk, need_db) = need;
    let plane = g.oh * g.ow;
    let n = g.col_cols();
    let mut dy2 = vec![T::zero(); g.out_c * n];
    for bi in 0..g.batch {
        for co in 0..g.out_c {
            let src = &dy[(bi * g.out_c + co) * plane..][..plane];
            dy2[(co * g.batch + bi) * plane..][..plane].copy_from_slice(src);
        }
    }
    let dbias = need_db.then(|| {
        (0..g.out_c)
            .map(|co| dy2[co * n..(co + 1) * n].iter().copied().sum())
            .collect()
    });
    let dkernel = need_dk.then(|| {
        let cols = im2col(g, x);
        let mut dk = vec![T::zero(); g.out_c * g.col_rows()];
        matmul(g.out_c, n, g.col_rows(), &dy2, false, &cols, true, &mut dk, false);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.col_rows() * n];
        matmul(g.col_rows(), g.out_c, n, kernel, true, &dy2, false, &mut dcols, false);
        let mut dx = vec![T::zero(); x.len()];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads {
        dx,
        dkernel,
        dbias,
    }
}

/// `y = x · wᵀ + b` for `x: n×in`, `w: out×in`.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (&[n, fin], &[fout, win]) = (x.shape(), w.shape()) else {
        return Err(Error::shape(format!(
            "linear expects 2-D input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if fin != win {
        return Err(Error::shape(format!(
            "linear feature mismatch: input {:?}, weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [fout] {
            return Err(Error::shape(format!(
                "linear bias {:?} vs weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
    }
    let mut y = vec![T::zero(); n * fout];
    if let Some(b) = b {
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    matmul(n, fin, fout, x.data(), false, w.data(), true, &mut y, b.is_some());
    Ok(Tensor::from_parts(vec![n, fout], y))
}

pub fn max_pool2d_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "max_pool2d(2x2) needs spatial size >= 2, got {:?}",
            x.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, oh, ow], y), idx))
}

/// Scatter `dy` to the positions recorded by an argmax pooling.
pub fn scatter_argmax<T: Real>(dy: &[T], idx: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i] += g;
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![b, c, 1, 1], data))
}

pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    let mut data = Vec::with_capacity(b * c);
    let mut idx = Vec::with_capacity(b * c);
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let (arg, &v) = plane
            .iter()
            .enumerate()
            .fold((0, &plane[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        data.push(v);
        idx.push(p * h * w + arg);
    }
    Ok((Tensor::from_parts(vec![b, c, 1, 1], data), idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average along each row: `b×c×H×1`.
    Height,
    /// Average along each column: `b×c×1×W`.
    Width,
}

pub fn directional_pool<T: Real>(x: &Tensor<T>, axis: PoolAxis) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let xd = x.data();
    match axis {
        PoolAxis::Height => {
            let inv = T::one() / T::from_usize(w).unwrap();
            let data = xd
                .chunks(w)
                .map(|row| row.iter().copied().sum::<T>() * inv)
                .collect();
            Ok(Tensor::from_parts(vec![b, c, h, 1], data))
        }
        PoolAxis::Width => {
            let inv = T::one() / T::from_usize(h).unwrap();
            let mut data = vec![T::zero(); b * c * w];
            for (p, plane) in xd.chunks(h * w).enumerate() {
                let out = &mut data[p * w..(p + 1) * w];
                for row in plane.chunks(w) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            Ok(Tensor::from_parts(vec![b, c, 1, w], data))
        }
    }
}

/// Per-pixel mean over channels: `b×1×H×W`.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(c).unwrap();
    let mut data = vec![T::zero(); b * hw];
    for bi in 0..b {
        let out = &mut data[bi * hw..(bi + 1) * hw];
        for plane in x.data()[bi * c * hw..(bi + 1) * c * hw].chunks(hw) {
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![b, 1, h, w], data))
}

/// Per-pixel max over channels with argmax positions into the input buffer.
pub fn channel_max<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut data = vec![T::zero(); b * hw];
    let mut idx = vec![0; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = bi * c * hw + p;
            for ci in 1..c {
                let i = (bi * c + ci) * hw + p;
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            data[bi * hw + p] = xd[best];
            idx[bi * hw + p] = best;
        }
    }
    Ok((Tensor::from_parts(vec![b, 1, h, w], data), idx))
}

/// Strides into a 4-D gate that broadcasts over `target` wherever the gate
/// has a singleton dimension.
pub fn broadcast_strides(target: &[usize], gate: &[usize]) -> Result<[usize; 4]> {
    if target.len() != 4 || gate.len() != 4 {
        return Err(Error::shape(format!(
            "broadcast multiply expects 4-D operands, got {target:?} and {gate:?}"
        )));
    }
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if gate[d] == target[d] {
            strides[d] = if gate[d] == 1 { 0 } else { acc };
        } else if gate[d] == 1 {
            strides[d] = 0;
        } else {
            return Err(Error::shape(format!(
                "gate {gate:?} cannot broadcast over {target:?}"
            )));
        }
        acc *= gate[d];
    }
    if gate[0] != target[0] {
        return Err(Error::shape(format!(
            "gate batch size differs: gate {gate:?}, input {target:?}"
        )));
    }
    Ok(strides)
}

/// Visits `(flat index into target, flat index into gate)` pairs.
pub fn for_each_broadcast(target: &[usize], strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let (b, c, h, w) = (target[0], target[1], target[2], target[3]);
    let mut i = 0;
    for bi in 0..b {
        for ci in 0..c {
            let gc = bi * strides[0] + ci * strides[1];
            for yi in 0..h {
                let gy = gc + yi * strides[2];
                for xi in 0..w {
                    f(i, gy + xi * strides[3]);
                    i += 1;
                }
            }
        }
    }
}

pub struct BatchNormTrain<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance (used for normalization).
    pub var: Vec<T>,
}

fn bn_check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch_norm affine shapes {:?}/{:?} vs input {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    Ok((b, c, h * w))
}

pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<BatchNormTrain<T>> {
    let (b, c, hw) = bn_check(x, gamma, beta)?;
    let count = T::from_usize(b * hw).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            mean[ci] += xd[(bi * c + ci) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for bi in 0..b {
        for ci in 0..c {
            let m = mean[ci];
            var[ci] += xd[(bi * c + ci) * hw..][..hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let (m, s, g, be) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for i in off..off + hw {
                let n = (xd[i] - m) * s;
                xhat[i] = n;
                y[i] = g * n + be;
            }
        }
    }
    Ok(BatchNormTrain {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Returns `(dx, dgamma, dbeta)` for training-mode normalization.
pub fn batch_norm_train_backward<T: Real>(
    shape: &[usize],
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_usize(b * hw).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                dgamma[ci] += dy[i] * xhat[i];
                dbeta[ci] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            // dxhat = dy * gamma; sums over dxhat reduce to gamma * dbeta and gamma * dgamma
            let k = gamma[ci] * inv_std[ci] / count;
            for i in off..off + hw {
                dx[i] = k * (count * dy[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, hw) = bn_check(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(format!(
            "batch_norm running statistics hold {} / {} channels, input {:?}",
            running_mean.len(),
            running_var.len(),
            x.shape()
        )));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = x.data().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let scale = gamma.data()[ci] * inv_std[ci];
            let shift = beta.data()[ci] - running_mean[ci] * scale;
            for v in &mut y[(bi * c + ci) * hw..][..hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), inv_std))
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = x.shape() else {
        return Err(Error::shape(format!(
            "softmax expects a 2-D tensor, got {:?}",
            x.shape()
        )));
    };
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Concatenates 4-D tensors along `axis`.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} on rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
            return Err(Error::shape(format!(
                "concat along axis {axis} of incompatible shapes {shapes:?}"
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, data))
}

/// `x[.., start..start+len, ..]` along `axis`.
pub fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(format!(
            "slice [{start}, {}) along axis {axis} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[o * full + start * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}
