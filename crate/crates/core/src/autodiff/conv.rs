//! Convolution kernels. Dense convolutions lower to GEMM through im2col;
//! depthwise convolutions run as direct loops.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        [n, c, h, w]: [usize; 4],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let (hw_out, s, p) = (g.col_cols(), g.stride as isize, g.pad as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let (hw_out, s, p) = (g.col_cols(), g.stride as isize, g.pad as isize);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x`: N x C x H x W, `w`: O x C x KH x KW, `b`: O. Returns N x O x HO x WO.
pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeom,
    out_ch: usize,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Vec<S> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![S::zero(); g.n * out_ch * cols_n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); rows * cols_n]
    };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let on = &mut out[n * out_ch * cols_n..(n + 1) * out_ch * cols_n];
        if let Some(b) = b {
            for (o, chunk) in on.chunks_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let src: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let beta = if b.is_some() { S::one() } else { S::zero() };
        S::gemm(
            out_ch,
            rows,
            cols_n,
            S::one(),
            w,
            (rows, 1),
            src,
            (cols_n, 1),
            beta,
            on,
            (cols_n, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    out_ch: usize,
    x: &[S],
    w: &[S],
    dout: &[S],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<S> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let plane_in = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![S::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![S::zero(); out_ch];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let base = (n * out_ch + o) * cols_n;
                *acc += dout[base..base + cols_n].iter().copied().sum::<S>();
            }
        }
        db
    });
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { rows * cols_n }];
    let mut dcols = vec![S::zero(); if need_dx && !g.is_pointwise() { rows * cols_n } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * plane_in..(n + 1) * plane_in];
        let gn = &dout[n * out_ch * cols_n..(n + 1) * out_ch * cols_n];
        if let Some(dw) = dw.as_mut() {
            let src: &[S] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW += dOut (O x HW) * cols^T (HW x rows)
            S::gemm(
                out_ch,
                cols_n,
                rows,
                S::one(),
                gn,
                (cols_n, 1),
                src,
                (1, cols_n),
                S::one(),
                dw,
                (rows, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * plane_in..(n + 1) * plane_in];
            if g.is_pointwise() {
                S::gemm(
                    rows,
                    out_ch,
                    cols_n,
                    S::one(),
                    w,
                    (1, rows),
                    gn,
                    (cols_n, 1),
                    S::zero(),
                    dxn,
                    (cols_n, 1),
                );
            } else {
                S::gemm(
                    rows,
                    out_ch,
                    cols_n,
                    S::one(),
                    w,
                    (1, rows),
                    gn,
                    (cols_n, 1),
                    S::zero(),
                    &mut dcols,
                    (cols_n, 1),
                );
                col2im_add(g, &dcols, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel convolution: `w` is C x 1 x KH x KW.
pub(crate) fn depthwise_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let mut out = vec![S::zero(); g.n * g.c * g.ho * g.wo];
    let (s, p) = (g.stride as isize, g.pad as isize);
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            let kern = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(n * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
            let bias = b.map_or(S::zero(), |b| b[c]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias;
                    for ky in 0..g.kh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += kern[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dout: &[S],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<S> {
    let mut dx = need_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![S::zero(); w.len()]);
    let mut db = need_db.then(|| vec![S::zero(); g.c]);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for n in 0..g.n {
        for c in 0..g.c {
            let base_in = (n * g.c + c) * g.h * g.w;
            let base_out = (n * g.c + c) * g.ho * g.wo;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = dout[base_out + oy * g.wo + ox];
                    if let Some(db) = db.as_mut() {
                        db[c] += go;
                    }
                    for ky in 0..g.kh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = base_in + iy as usize * g.w + ix as usize;
                            let wi = c * g.kh * g.kw + ky * g.kw + kx;
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += go * x[xi];
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += go * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}
