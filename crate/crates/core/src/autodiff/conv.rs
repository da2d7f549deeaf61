//! Direct (loop) 2-D convolution kernels.
//!
//! Both directions share one geometry: the "big" side is the conv2d input /
//! conv_transpose2d output, the "small" side the other end. Kernels are always
//! laid out `[c_small, c_big, kh, kw]`, which is `[out, in, kh, kw]` for conv2d and
//! `[in, out, kh, kw]` for conv_transpose2d.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c_big: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub c_small: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

fn batch_chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!(
            "{what} must be [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, kh, kw] => Ok((a, b, kh, kw)),
        _ => Err(Error::dim(format!("kernels must be rank 4, got {shape:?}"))),
    }
}

impl Geometry {
    pub fn forward(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        let (n, c, h, w) = batch_chw(input, "conv2d input")?;
        let (o, ck, kh, kw) = kernel_dims(kernels)?;
        if stride == 0 {
            return Err(Error::contract("stride must be positive"));
        }
        if ck != c {
            return Err(Error::dim(format!(
                "conv2d kernels expect {ck} input channels, input has {c}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(Geometry {
            n,
            c_big: c,
            h_big: h,
            w_big: w,
            c_small: o,
            h_small: (h - kh) / stride + 1,
            w_small: (w - kw) / stride + 1,
            kh,
            kw,
            stride,
        })
    }

    pub fn transpose(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        output_padding: (usize, usize),
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::contract("stride must be positive"));
        }
        if output_padding.0 >= stride || output_padding.1 >= stride {
            return Err(Error::dim(format!(
                "output padding {output_padding:?} must be smaller than stride {stride}"
            )));
        }
        let (_, _, h, w) = batch_chw(input, "conv_transpose2d input")?;
        let (_, _, kh, kw) = kernel_dims(kernels)?;
        let target = (
            (h - 1) * stride + kh + output_padding.0,
            (w - 1) * stride + kw + output_padding.1,
        );
        Self::transpose_with_output(input, kernels, stride, target)
    }

    pub fn transpose_with_output(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        (h_big, w_big): (usize, usize),
    ) -> Result<Self> {
        let (n, c, h, w) = batch_chw(input, "conv_transpose2d input")?;
        let (ck, o, kh, kw) = kernel_dims(kernels)?;
        if ck != c {
            return Err(Error::dim(format!(
                "conv_transpose2d kernels expect {ck} input channels, input has {c}"
            )));
        }
        if h_big < kh || w_big < kw || (h_big - kh) / stride + 1 != h || (w_big - kw) / stride + 1 != w
        {
            return Err(Error::dim(format!(
                "conv_transpose2d geometry inconsistent: {h}x{w} input, {kh}x{kw} kernel, stride {stride}, output {h_big}x{w_big}"
            )));
        }
        Ok(Geometry {
            n,
            c_big: o,
            h_big,
            w_big,
            c_small: c,
            h_small: h,
            w_small: w,
            kh,
            kw,
            stride,
        })
    }

    pub fn output_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![self.c_small, self.h_small, self.w_small];
        if rank == 4 {
            s.insert(0, self.n);
        }
        s
    }

    pub fn input_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![self.c_big, self.h_big, self.w_big];
        if rank == 4 {
            s.insert(0, self.n);
        }
        s
    }

    fn big_len(&self) -> usize {
        self.n * self.c_big * self.h_big * self.w_big
    }

    fn small_len(&self) -> usize {
        self.n * self.c_small * self.h_small * self.w_small
    }

    fn kernel_len(&self) -> usize {
        self.c_small * self.c_big * self.kh * self.kw
    }

    /// Visits every (small index, big index, kernel index) triple once.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for n in 0..g.n {
            for o in 0..g.c_small {
                for y in 0..g.h_small {
                    for x in 0..g.w_small {
                        let si = ((n * g.c_small + o) * g.h_small + y) * g.w_small + x;
                        for c in 0..g.c_big {
                            for ky in 0..g.kh {
                                let row = ((n * g.c_big + c) * g.h_big + y * g.stride + ky) * g.w_big
                                    + x * g.stride;
                                let krow = ((o * g.c_big + c) * g.kh + ky) * g.kw;
                                for kx in 0..g.kw {
                                    f(si, row + kx, krow + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(big: &[f64], k: &[f64], g: &Geometry) -> Vec<f64> {
    let mut small = vec![0.0; g.small_len()];
    g.for_each(|si, bi, ki| small[si] += big[bi] * k[ki]);
    small
}

pub(crate) fn conv_transpose2d(small: &[f64], k: &[f64], g: &Geometry) -> Vec<f64> {
    let mut big = vec![0.0; g.big_len()];
    g.for_each(|si, bi, ki| big[bi] += small[si] * k[ki]);
    big
}

pub(crate) fn conv2d_backward(
    big: &[f64],
    k: &[f64],
    g_small: &[f64],
    g: &Geometry,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_big = vec![0.0; g.big_len()];
    let mut g_k = vec![0.0; g.kernel_len()];
    g.for_each(|si, bi, ki| {
        g_big[bi] += g_small[si] * k[ki];
        g_k[ki] += g_small[si] * big[bi];
    });
    (g_big, g_k)
}

pub(crate) fn conv_transpose2d_backward(
    small: &[f64],
    k: &[f64],
    g_big: &[f64],
    g: &Geometry,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_small = vec![0.0; g.small_len()];
    let mut g_k = vec![0.0; g.kernel_len()];
    g.for_each(|si, bi, ki| {
        g_small[si] += g_big[bi] * k[ki];
        g_k[ki] += small[si] * g_big[bi];
    });
    (g_small, g_k)
}
