//! Forward and backward kernels for the toy backbone: same-padded
//! convolution, ReLU, 2× average pooling and upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Spatial, Tensor};

/// Kernel extent along (depth, height, width). All entries odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Kernel {
    pub fn cube(size: usize, rank: usize) -> Self {
        Self {
            d: if rank == 3 { size } else { 1 },
            h: size,
            w: size,
        }
    }

    pub fn volume(&self) -> usize {
        self.d * self.h * self.w
    }
}

fn im2col(input: &Tensor, k: Kernel) -> Vec<f64> {
    let sp = input.spatial();
    let n = sp.volume();
    let (pd, ph, pw) = (k.d / 2, k.h / 2, k.w / 2);
    let rows = input.channels() * k.volume();
    let mut cols = vec![0.0; rows * n];
    let mut row = 0;
    for c in 0..input.channels() {
        let src = input.channel(c);
        for kz in 0..k.d {
            for ky in 0..k.h {
                for kx in 0..k.w {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for z in 0..sp.d {
                        let iz = z as isize + kz as isize - pd as isize;
                        if iz < 0 || iz >= sp.d as isize {
                            continue;
                        }
                        for y in 0..sp.h {
                            let iy = y as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= sp.h as isize {
                                continue;
                            }
                            let x_lo = pw.saturating_sub(kx);
                            let x_hi = (sp.w + pw).saturating_sub(kx).min(sp.w);
                            let base_out = sp.index(z, y, 0);
                            let base_in = sp.index(iz as usize, iy as usize, 0);
                            for x in x_lo..x_hi {
                                dst[base_out + x] = src[base_in + x + kx - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, sp: Spatial, k: Kernel) -> Tensor {
    let n = sp.volume();
    let (pd, ph, pw) = (k.d / 2, k.h / 2, k.w / 2);
    let mut out = Tensor::zeros(channels, sp);
    let mut row = 0;
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for kz in 0..k.d {
            for ky in 0..k.h {
                for kx in 0..k.w {
                    let src = &cols[row * n..(row + 1) * n];
                    for z in 0..sp.d {
                        let iz = z as isize + kz as isize - pd as isize;
                        if iz < 0 || iz >= sp.d as isize {
                            continue;
                        }
                        for y in 0..sp.h {
                            let iy = y as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= sp.h as isize {
                                continue;
                            }
                            let x_lo = pw.saturating_sub(kx);
                            let x_hi = (sp.w + pw).saturating_sub(kx).min(sp.w);
                            let base_out = sp.index(z, y, 0);
                            let base_in = sp.index(iz as usize, iy as usize, 0);
                            for x in x_lo..x_hi {
                                dst[base_in + x + kx - pw] += src[base_out + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe row-major (or transposed) views that stay
    // within the asserted slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded convolution. `weight` is `[c_out][c_in][kd][kh][kw]`.
pub fn conv_forward(input: &Tensor, weight: &[f64], bias: &[f64], c_out: usize, k: Kernel) -> Tensor {
    let sp = input.spatial();
    let n = sp.volume();
    let kk = input.channels() * k.volume();
    debug_assert_eq!(weight.len(), c_out * kk);
    let mut out = Tensor::zeros(c_out, sp);
    if k.volume() == 1 {
        gemm(c_out, kk, n, weight, false, input.data(), false, out.data_mut(), false);
    } else {
        let cols = im2col(input, k);
        gemm(c_out, kk, n, weight, false, &cols, false, out.data_mut(), false);
    }
    for (c, &b) in bias.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v += b;
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    k: Kernel,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let sp = input.spatial();
    let n = sp.volume();
    let c_out = grad_out.channels();
    let kk = input.channels() * k.volume();
    for (c, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(c).iter().sum::<f64>();
    }
    if k.volume() == 1 {
        gemm(c_out, n, kk, grad_out.data(), false, input.data(), true, grad_weight, true);
        if !need_input_grad {
            return None;
        }
        let mut gi = Tensor::zeros(input.channels(), sp);
        gemm(kk, c_out, n, weight, true, grad_out.data(), false, gi.data_mut(), false);
        Some(gi)
    } else {
        let cols = im2col(input, k);
        gemm(c_out, n, kk, grad_out.data(), false, &cols, true, grad_weight, true);
        if !need_input_grad {
            return None;
        }
        let mut gcols = vec![0.0; kk * n];
        gemm(kk, c_out, n, weight, true, grad_out.data(), false, &mut gcols, false);
        Some(col2im(&gcols, input.channels(), sp, k))
    }
}

pub fn relu(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    t
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, mut grad: Tensor) -> Tensor {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

pub fn avg_pool2(input: &Tensor, rank: usize) -> Tensor {
    let sp = input.spatial();
    let out_sp = sp.downsampled(2, rank).expect("divisible by 2");
    let fd = if rank == 3 { 2 } else { 1 };
    let inv = 1.0 / (fd * 4) as f64;
    let mut out = Tensor::zeros(input.channels(), out_sp);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..out_sp.d {
            for y in 0..out_sp.h {
                for x in 0..out_sp.w {
                    let mut s = 0.0;
                    for dz in 0..fd {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += src[sp.index(z * fd + dz, y * 2 + dy, x * 2 + dx)];
                            }
                        }
                    }
                    dst[out_sp.index(z, y, x)] = s * inv;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor, in_sp: Spatial, rank: usize) -> Tensor {
    let out_sp = grad_out.spatial();
    let fd = if rank == 3 { 2 } else { 1 };
    let inv = 1.0 / (fd * 4) as f64;
    let mut gi = Tensor::zeros(grad_out.channels(), in_sp);
    for c in 0..grad_out.channels() {
        let src = grad_out.channel(c);
        let dst = gi.channel_mut(c);
        for z in 0..in_sp.d {
            for y in 0..in_sp.h {
                for x in 0..in_sp.w {
                    dst[in_sp.index(z, y, x)] = src[out_sp.index(z / fd, y / 2, x / 2)] * inv;
                }
            }
        }
    }
    gi
}

/// Interpolation used when bringing coarse logits to full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Bilinear in 2D, trilinear in 3D, half-pixel aligned with edge clamping.
    Linear,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "linear" | "bilinear" | "trilinear" => Ok(Self::Linear),
            other => Err(Error::Parse(format!("unknown upsample mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Linear => "linear",
        })
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "upsampling factor {factor} is not a power of two"
        )));
    }
    Ok(())
}

/// Per-axis linear interpolation taps: for each output coordinate, the two
/// source indices and their weights.
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Upsamples every spatial axis of the given rank by `factor`.
pub fn upsample(input: &Tensor, factor: usize, rank: usize, mode: UpsampleMode) -> Result<Tensor> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let sp = input.spatial();
    let out_sp = sp.upsampled(factor, rank);
    let fd = if rank == 3 { factor } else { 1 };
    let mut out = Tensor::zeros(input.channels(), out_sp);
    match mode {
        UpsampleMode::Nearest => {
            for c in 0..input.channels() {
                let src = input.channel(c);
                let dst = out.channel_mut(c);
                for z in 0..out_sp.d {
                    for y in 0..out_sp.h {
                        for x in 0..out_sp.w {
                            dst[out_sp.index(z, y, x)] =
                                src[sp.index(z / fd, y / factor, x / factor)];
                        }
                    }
                }
            }
        }
        UpsampleMode::Linear => {
            let tz = linear_taps(sp.d, fd);
            let ty = linear_taps(sp.h, factor);
            let tx = linear_taps(sp.w, factor);
            for c in 0..input.channels() {
                let src = input.channel(c);
                let dst = out.channel_mut(c);
                for (z, &(z0, z1, wz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let mut v = 0.0;
                            for (zi, zw) in [(z0, 1.0 - wz), (z1, wz)] {
                                for (yi, yw) in [(y0, 1.0 - wy), (y1, wy)] {
                                    for (xi, xw) in [(x0, 1.0 - wx), (x1, wx)] {
                                        v += zw * yw * xw * src[sp.index(zi, yi, xi)];
                                    }
                                }
                            }
                            dst[out_sp.index(z, y, x)] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample`]: maps a full-resolution gradient back to `in_sp`.
pub fn upsample_backward(
    grad_out: &Tensor,
    in_sp: Spatial,
    factor: usize,
    rank: usize,
    mode: UpsampleMode,
) -> Result<Tensor> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let out_sp = grad_out.spatial();
    let fd = if rank == 3 { factor } else { 1 };
    let mut gi = Tensor::zeros(grad_out.channels(), in_sp);
    match mode {
        UpsampleMode::Nearest => {
            for c in 0..grad_out.channels() {
                let src = grad_out.channel(c);
                let dst = gi.channel_mut(c);
                for z in 0..out_sp.d {
                    for y in 0..out_sp.h {
                        for x in 0..out_sp.w {
                            dst[in_sp.index(z / fd, y / factor, x / factor)] +=
                                src[out_sp.index(z, y, x)];
                        }
                    }
                }
            }
        }
        UpsampleMode::Linear => {
            let tz = linear_taps(in_sp.d, fd);
            let ty = linear_taps(in_sp.h, factor);
            let tx = linear_taps(in_sp.w, factor);
            for c in 0..grad_out.channels() {
                let src = grad_out.channel(c);
                let dst = gi.channel_mut(c);
                for (z, &(z0, z1, wz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let g = src[out_sp.index(z, y, x)];
                            for (zi, zw) in [(z0, 1.0 - wz), (z1, wz)] {
                                for (yi, yw) in [(y0, 1.0 - wy), (y1, wy)] {
                                    for (xi, xw) in [(x0, 1.0 - wx), (x1, wx)] {
                                        dst[in_sp.index(zi, yi, xi)] += zw * yw * xw * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gi)
}
