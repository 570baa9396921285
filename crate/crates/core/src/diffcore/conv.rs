//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Both ops share one geometry: an "image" of `c x h x w` scanned by a
//! `kh x kw` window at `stride`/`pad`, producing an `oh x ow` grid of
//! columns. For conv2d the image is the input; for deconv2d it is the output.

use rayon::prelude::*;

use super::tape::{Op, Var};
use super::{Real, Tape, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a strided convolution, `None` when the window does not fit.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `None` when nonpositive.
pub fn deconv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (size as isize - 1) * stride as isize + kernel as isize - 2 * pad as isize;
    (stride > 0 && full >= 1).then_some(full as usize)
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for s in 0..n {
        for (c, d) in db.iter_mut().enumerate() {
            let off = (s * channels + c) * plane;
            *d += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_partials<T: Real>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in partials {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
    }
    acc
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(dim_err(
                "bias",
                format!("expected {channels} values, got dims {:?}", b.dims()),
            ));
        }
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input [N,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).nchw()?;
        let (cout, kcin, kh, kw) = self.value(kernel).nchw()?;
        if kcin != cin {
            return Err(dim_err(
                "channels",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        check_bias(bias.map(|b| self.value(b)), cout)?;
        let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            dim_err("height", format!("H={h} pad={pad} stride={stride} cannot fit kh={kh}"))
        })?;
        let ow = conv_out_extent(w, kw, stride, pad).ok_or_else(|| {
            dim_err("width", format!("W={w} pad={pad} stride={stride} cannot fit kw={kw}"))
        })?;
        let geom = ConvGeom {
            c: cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            n,
            cout,
            &geom,
        );
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Transposed convolution of `input [N,Cin,H,W]` with `kernel [Cin,Cout,kh,kw]`:
    /// the adjoint of [`Tape::conv2d`] with respect to its input.
    pub fn deconv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).nchw()?;
        let (kcin, cout, kh, kw) = self.value(kernel).nchw()?;
        if kcin != cin {
            return Err(dim_err(
                "channels",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        check_bias(bias.map(|b| self.value(b)), cout)?;
        let oh = deconv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| dim_err("height", format!("nonpositive output extent from H={h}")))?;
        let ow = deconv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| dim_err("width", format!("nonpositive output extent from W={w}")))?;
        let geom = ConvGeom {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let out = deconv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            n,
            cin,
            &geom,
        );
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Deconv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }
}

fn conv2d_forward<T: Real>(
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    n: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * cout * p];
    out.par_chunks_mut(cout * p)
        .zip(x.par_chunks(g.c * g.h * g.w))
        .for_each(|(o, xi)| {
            let mut scratch = Vec::new();
            let col: &[T] = if g.is_pointwise() {
                xi
            } else {
                scratch.resize(rows * p, T::zero());
                im2col(xi, g, &mut scratch);
                &scratch
            };
            T::gemm(
                cout,
                rows,
                p,
                T::one(),
                k,
                (rows as isize, 1),
                col,
                (p as isize, 1),
                T::zero(),
                o,
                (p as isize, 1),
            );
            if let Some(b) = bias {
                add_bias(o, b, p);
            }
        });
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input).data();
    let k = tape.value(kernel).data();
    let n = tape.value(input).dims()[0];
    let cout = tape.value(kernel).dims()[0];
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_plane = g.c * g.h * g.w;
    let mut out = Vec::new();

    if tape.needs(input) {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(in_plane)
            .zip(grad.par_chunks(cout * p))
            .for_each(|(dxi, gi)| {
                if g.is_pointwise() {
                    T::gemm(
                        rows,
                        cout,
                        p,
                        T::one(),
                        k,
                        (1, rows as isize),
                        gi,
                        (p as isize, 1),
                        T::zero(),
                        dxi,
                        (p as isize, 1),
                    );
                } else {
                    let mut dcol = vec![T::zero(); rows * p];
                    T::gemm(
                        rows,
                        cout,
                        p,
                        T::one(),
                        k,
                        (1, rows as isize),
                        gi,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcol,
                        (p as isize, 1),
                    );
                    col2im(&dcol, g, dxi);
                }
            });
        out.push((input, dx));
    }

    if tape.needs(kernel) {
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xi = &x[s * in_plane..(s + 1) * in_plane];
                let gi = &grad[s * cout * p..(s + 1) * cout * p];
                let mut scratch = Vec::new();
                let col: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    scratch.resize(rows * p, T::zero());
                    im2col(xi, g, &mut scratch);
                    &scratch
                };
                let mut dk = vec![T::zero(); cout * rows];
                T::gemm(
                    cout,
                    p,
                    rows,
                    T::one(),
                    gi,
                    (p as isize, 1),
                    col,
                    (1, p as isize),
                    T::zero(),
                    &mut dk,
                    (rows as isize, 1),
                );
                dk
            })
            .collect();
        out.push((kernel, sum_partials(partials, cout * rows)));
    }

    if let Some(b) = bias.filter(|&b| tape.needs(b)) {
        out.push((b, bias_grad(grad, n, cout, p)));
    }
    out
}

fn deconv2d_forward<T: Real>(
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    n: usize,
    cin: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let out_plane = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(x.par_chunks(cin * p))
        .for_each(|(o, xi)| {
            let mut col = vec![T::zero(); rows * p];
            T::gemm(
                rows,
                cin,
                p,
                T::one(),
                k,
                (1, rows as isize),
                xi,
                (p as isize, 1),
                T::zero(),
                &mut col,
                (p as isize, 1),
            );
            col2im(&col, g, o);
            if let Some(b) = bias {
                add_bias(o, b, g.h * g.w);
            }
        });
    out
}

pub(crate) fn deconv2d_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input).data();
    let k = tape.value(kernel).data();
    let (n, cin) = (tape.value(input).dims()[0], tape.value(input).dims()[1]);
    let (rows, p) = (g.col_rows(), g.col_cols());
    let out_plane = g.c * g.h * g.w;
    let needs_input = tape.needs(input);
    let needs_kernel = tape.needs(kernel);
    let mut out = Vec::new();

    if needs_input || needs_kernel {
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let gi = &grad[s * out_plane..(s + 1) * out_plane];
                let xi = &x[s * cin * p..(s + 1) * cin * p];
                let mut dcol = vec![T::zero(); rows * p];
                im2col(gi, g, &mut dcol);
                let mut dx = Vec::new();
                if needs_input {
                    dx = vec![T::zero(); cin * p];
                    T::gemm(
                        cin,
                        rows,
                        p,
                        T::one(),
                        k,
                        (rows as isize, 1),
                        &dcol,
                        (p as isize, 1),
                        T::zero(),
                        &mut dx,
                        (p as isize, 1),
                    );
                }
                let mut dk = Vec::new();
                if needs_kernel {
                    dk = vec![T::zero(); cin * rows];
                    T::gemm(
                        cin,
                        p,
                        rows,
                        T::one(),
                        xi,
                        (p as isize, 1),
                        &dcol,
                        (1, p as isize),
                        T::zero(),
                        &mut dk,
                        (rows as isize, 1),
                    );
                }
                (dx, dk)
            })
            .collect();
        let (dxs, dks): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
        if needs_input {
            out.push((input, dxs.concat()));
        }
        if needs_kernel {
            out.push((kernel, sum_partials(dks, cin * rows)));
        }
    }

    if let Some(b) = bias.filter(|&b| tape.needs(b)) {
        out.push((b, bias_grad(grad, n, g.c, g.h * g.w)));
    }
    out
}
