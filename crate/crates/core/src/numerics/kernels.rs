//! Forward and backward kernels on raw tensors.
//!
//! Spatial tensors are laid out `[N, C, T, F]`; dense inputs are `[rows, features]`.
//! Every backward kernel is the analytic adjoint of its forward kernel.

use rayon::prelude::*;

use super::scalar::{gemm, Trans};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution over `(time, frequency)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    /// `(t_lo, t_hi, f_lo, f_hi)`
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), pad: (usize, usize, usize, usize)) -> Self {
        ConvGeometry { stride, pad }
    }

    pub fn unit() -> Self {
        Self::new((1, 1), (0, 0, 0, 0))
    }

    /// Output extents for an `h×w` input and a `kh×kw` kernel.
    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (st, sf) = self.stride;
        if st == 0 || sf == 0 {
            return Err(Error::config("convolution stride must be at least 1"));
        }
        let (tl, th, fl, fh) = self.pad;
        let ph = h + tl + th;
        let pw = w + fl + fh;
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / st + 1, (pw - kw) / sf + 1))
    }
}

#[derive(Clone, Copy)]
struct Patch {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
}

impl Patch {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input column range hit by kernel tap `kj` for output columns `0..wo`.
    fn col_span(&self, kj: usize) -> (usize, usize) {
        let sf = self.geo.stride.1;
        let fl = self.geo.pad.2;
        let mut lo = 0;
        while lo < self.wo && (lo * sf + kj) < fl {
            lo += 1;
        }
        let mut hi = self.wo;
        while hi > lo && (hi - 1) * sf + kj >= fl + self.w {
            hi -= 1;
        }
        (lo, hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (st, sf) = self.geo.stride;
        let (tl, _, fl, _) = self.geo.pad;
        let ncol = self.cols();
        cols.fill(T::zero());
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    let (jlo, jhi) = self.col_span(kj);
                    for oi in 0..self.ho {
                        let ii = oi * st + ki;
                        if ii < tl || ii >= tl + self.h {
                            continue;
                        }
                        let src = &xc[(ii - tl) * self.w..(ii - tl + 1) * self.w];
                        let out = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if sf == 1 {
                            let base = jlo + kj - fl;
                            out[jlo..jhi].copy_from_slice(&src[base..base + (jhi - jlo)]);
                        } else {
                            for oj in jlo..jhi {
                                out[oj] = src[oj * sf + kj - fl];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (st, sf) = self.geo.stride;
        let (tl, _, fl, _) = self.geo.pad;
        let ncol = self.cols();
        for c in 0..self.cin {
            let xc = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let (jlo, jhi) = self.col_span(kj);
                    for oi in 0..self.ho {
                        let ii = oi * st + ki;
                        if ii < tl || ii >= tl + self.h {
                            continue;
                        }
                        let dst = &mut xc[(ii - tl) * self.w..(ii - tl + 1) * self.w];
                        let inp = &src[oi * self.wo..(oi + 1) * self.wo];
                        for oj in jlo..jhi {
                            dst[oj * sf + kj - fl] += inp[oj];
                        }
                    }
                }
            }
        }
    }
}

fn spatial_dims(x: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("{what}: expected [N, C, T, F], got {x:?}"))),
    }
}

fn kernel_dims(w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *w {
        [a, b, kh, kw] => Ok((a, b, kh, kw)),
        _ => Err(Error::shape(format!("kernel must be rank 4, got {w:?}"))),
    }
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::shape(format!("bias {:?} for {n} outputs", b.shape())));
        }
    }
    Ok(())
}

/// Sums per-example partial gradients in a fixed order.
fn reduce_ordered<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = spatial_dims(x.shape(), "conv2d input")?;
    let (cout, wcin, kh, kw) = kernel_dims(w.shape())?;
    if wcin != cin {
        return Err(Error::config(format!(
            "conv2d kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    check_bias(b, cout)?;
    let (ho, wo) = geo.output_extent(h, wd, kh, kw)?;
    let p = Patch { cin, h, w: wd, kh, kw, ho, wo, geo };
    let in_len = cin * h * wd;
    let out_len = cout * ho * wo;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(i, y)| {
            let mut cols = vec![T::zero(); p.rows() * p.cols()];
            p.im2col(&x.data()[i * in_len..(i + 1) * in_len], &mut cols);
            if let Some(b) = b {
                for (c, row) in y.chunks_mut(ho * wo).enumerate() {
                    row.fill(b.data()[c]);
                }
            }
            gemm(cout, p.rows(), p.cols(), w.data(), Trans::No, &cols, Trans::No, y, b.is_some());
        });
    Tensor::new(vec![n, cout, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geo: ConvGeometry,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = spatial_dims(x.shape(), "conv2d input")?;
    let (cout, _, kh, kw) = kernel_dims(w.shape())?;
    let (ho, wo) = geo.output_extent(h, wd, kh, kw)?;
    let p = Patch { cin, h, w: wd, kh, kw, ho, wo, geo };
    let in_len = cin * h * wd;
    let out_len = cout * ho * wo;
    let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let dyi = &dy.data()[i * out_len..(i + 1) * out_len];
            let mut cols = vec![T::zero(); p.rows() * p.cols()];
            p.im2col(xi, &mut cols);
            let mut dw = vec![T::zero(); w.len()];
            gemm(cout, p.cols(), p.rows(), dyi, Trans::No, &cols, Trans::Yes, &mut dw, false);
            let db: Vec<T> = dyi.chunks(ho * wo).map(|c| c.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if need_dx {
                gemm(p.rows(), cout, p.cols(), w.data(), Trans::Yes, dyi, Trans::No, &mut cols, false);
                dx = vec![T::zero(); in_len];
                p.col2im(&cols, &mut dx);
            }
            (dw, db, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    let mut dx = Vec::with_capacity(if need_dx { n * in_len } else { 0 });
    for (dw, db, dxi) in parts {
        dws.push(dw);
        dbs.push(db);
        dx.extend(dxi);
    }
    Ok(ConvGrads {
        dx: if need_dx {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        dw: Tensor::new(w.shape().to_vec(), reduce_ordered(dws, w.len()))?,
        db: Tensor::new(vec![cout], reduce_ordered(dbs, cout))?,
    })
}

/// Transposed convolution with kernel `[Cin, Cout, kT, kF]`, no padding:
/// output extents are `(T - 1)·sT + kT` by `(F - 1)·sF + kF`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = spatial_dims(x.shape(), "transposed conv input")?;
    let (wcin, cout, kh, kw) = kernel_dims(w.shape())?;
    if wcin != cin {
        return Err(Error::config(format!(
            "transposed conv kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::config("convolution stride must be at least 1"));
    }
    check_bias(b, cout)?;
    let (oh, ow) = ((h - 1) * stride.0 + kh, (wd - 1) * stride.1 + kw);
    let p = Patch {
        cin: cout,
        h: oh,
        w: ow,
        kh,
        kw,
        ho: h,
        wo: wd,
        geo: ConvGeometry::new(stride, (0, 0, 0, 0)),
    };
    let in_len = cin * h * wd;
    let out_len = cout * oh * ow;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(i, y)| {
            let mut cols = vec![T::zero(); p.rows() * p.cols()];
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            gemm(p.rows(), cin, p.cols(), w.data(), Trans::Yes, xi, Trans::No, &mut cols, false);
            if let Some(b) = b {
                for (c, plane) in y.chunks_mut(oh * ow).enumerate() {
                    plane.fill(b.data()[c]);
                }
            }
            p.col2im(&cols, y);
        });
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = spatial_dims(x.shape(), "transposed conv input")?;
    let (_, cout, kh, kw) = kernel_dims(w.shape())?;
    let (oh, ow) = ((h - 1) * stride.0 + kh, (wd - 1) * stride.1 + kw);
    let p = Patch {
        cin: cout,
        h: oh,
        w: ow,
        kh,
        kw,
        ho: h,
        wo: wd,
        geo: ConvGeometry::new(stride, (0, 0, 0, 0)),
    };
    let in_len = cin * h * wd;
    let out_len = cout * oh * ow;
    let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let dyi = &dy.data()[i * out_len..(i + 1) * out_len];
            let mut cols = vec![T::zero(); p.rows() * p.cols()];
            p.im2col(dyi, &mut cols);
            let mut dw = vec![T::zero(); w.len()];
            gemm(cin, p.cols(), p.rows(), xi, Trans::No, &cols, Trans::Yes, &mut dw, false);
            let db: Vec<T> = dyi.chunks(oh * ow).map(|c| c.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if need_dx {
                dx = vec![T::zero(); in_len];
                gemm(cin, p.rows(), p.cols(), w.data(), Trans::No, &cols, Trans::No, &mut dx, false);
            }
            (dw, db, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(n);
    let mut dbs = Vec::with_capacity(n);
    let mut dx = Vec::new();
    for (dw, db, dxi) in parts {
        dws.push(dw);
        dbs.push(db);
        dx.extend(dxi);
    }
    Ok(ConvGrads {
        dx: if need_dx {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        },
        dw: Tensor::new(w.shape().to_vec(), reduce_ordered(dws, w.len()))?,
        db: Tensor::new(vec![cout], reduce_ordered(dbs, cout))?,
    })
}

/// `y = x·wᵀ + b` for `x: [R, Fin]`, `w: [Fout, Fin]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, fin) = match *x.shape() {
        [r, f] => (r, f),
        _ => return Err(Error::shape(format!("dense input must be [rows, features], got {:?}", x.shape()))),
    };
    let (fout, wfin) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape(format!("dense weight must be rank 2, got {:?}", w.shape()))),
    };
    if wfin != fin {
        return Err(Error::config(format!(
            "dense weight expects {wfin} input features, input has {fin}"
        )));
    }
    check_bias(b, fout)?;
    let mut y = vec![T::zero(); rows * fout];
    if let Some(b) = b {
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(rows, fin, fout, x.data(), Trans::No, w.data(), Trans::Yes, &mut y, b.is_some());
    Tensor::new(vec![rows, fout], y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let (rows, fin) = (x.dim(0), x.dim(1));
    let fout = w.dim(0);
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * fin];
        gemm(rows, fout, fin, dy.data(), Trans::No, w.data(), Trans::No, &mut dx, false);
        Tensor::new(vec![rows, fin], dx).expect("dense dx shape")
    });
    let mut dw = vec![T::zero(); fout * fin];
    gemm(fout, rows, fin, dy.data(), Trans::Yes, x.data(), Trans::No, &mut dw, false);
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    ConvGrads {
        dx,
        dw: Tensor::new(vec![fout, fin], dw).expect("dense dw shape"),
        db: Tensor::new(vec![fout], db).expect("dense db shape"),
    }
}

/// `(outer, channels, inner)` view of a tensor normalized along `axis`.
pub fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-channel `(mean, biased variance)` over all other axes.
pub fn channel_moments<T: Scalar>(x: &[T], layout: (usize, usize, usize)) -> (Vec<T>, Vec<T>) {
    let (outer, ch, inner) = layout;
    let count = T::c((outer * inner) as f64);
    let mut mean = vec![T::zero(); ch];
    for o in 0..outer {
        for (c, m) in mean.iter_mut().enumerate() {
            let base = (o * ch + c) * inner;
            *m += x[base..base + inner].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![T::zero(); ch];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            let m = mean[c];
            var[c] += x[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

/// Numerically stable softmax along the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().expect("softmax of a scalar-less tensor");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
