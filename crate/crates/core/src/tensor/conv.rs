//! Convolution and affine layers, lowered to matrix products.

use super::tape::{GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.n * g.positions();
    let mut cols = vec![0.0; g.taps() * np];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let plane = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let r = (ci * g.k + ki) * g.k + kj;
                    let row = &mut cols[r * np + n * g.positions()..][..g.positions()];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.w_out {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                row[oh * g.w_out + ow] = plane[ih as usize * g.w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let np = g.n * g.positions();
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let plane = &mut dx[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let r = (ci * g.k + ki) * g.k + kj;
                    let row = &dcols[r * np + n * g.positions()..][..g.positions()];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.w_out {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                plane[ih as usize * g.w + iw as usize] += row[oh * g.w_out + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Cross-correlation of `x: (N, C_in, H, W)` with `weight: (C_out, C_in, k, k)`.
    /// Output extents are `floor((H + 2·pad − k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[weight.0].shape);
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("input {xs:?} / weight {ws:?} must be 4-D with a square kernel"),
            });
        }
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.clone(),
                rhs: ws.clone(),
            });
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {} with stride {stride}, pad {pad} does not fit {xs:?}",
                ws[2]
            )));
        }
        if let Some(b) = bias {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![ws[0]],
                    rhs: bs.clone(),
                });
            }
        }
        let (k, h, w) = (ws[2], xs[2], xs[3]);
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h,
            w,
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(&self.nodes[x.0].data, &geom);
        let (p, np, kk) = (geom.positions(), geom.n * geom.positions(), geom.taps());
        let mut prod = vec![0.0; geom.c_out * np];
        gemm(
            (geom.c_out, kk, np),
            &self.nodes[weight.0].data,
            (kk, 1),
            &cols,
            (np, 1),
            0.0,
            &mut prod,
        );
        let bias_data = bias.map(|b| &self.nodes[b.0].data);
        let mut out = vec![0.0; geom.n * geom.c_out * p];
        for n in 0..geom.n {
            for co in 0..geom.c_out {
                let b = bias_data.map_or(0.0, |d| d[co]);
                let src = &prod[co * np + n * p..][..p];
                let dst = &mut out[(n * geom.c_out + co) * p..][..p];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + b);
            }
        }
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x: x.0,
                w: weight.0,
                b: bias.map(|v| v.0),
                geom,
                cols,
            },
        ))
    }

    /// Affine map `x · weightᵀ + bias` for `x: (rows, in)`, `weight: (out, in)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[weight.0].shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.clone(),
                rhs: ws.clone(),
            });
        }
        let (rows, in_f, out_f) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [out_f] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out_f],
                    rhs: bs.clone(),
                });
            }
        }
        let mut out = match bias {
            Some(b) => self.nodes[b.0].data.repeat(rows),
            None => vec![0.0; rows * out_f],
        };
        gemm(
            (rows, in_f, out_f),
            &self.nodes[x.0].data,
            (in_f, 1),
            &self.nodes[weight.0].data,
            (1, in_f),
            1.0,
            &mut out,
        );
        Ok(self.push(
            vec![rows, out_f],
            out,
            Op::Linear {
                x: x.0,
                w: weight.0,
                b: bias.map(|v| v.0),
                rows,
                in_f,
                out_f,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
    cols: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (p, np, kk) = (geom.positions(), geom.n * geom.positions(), geom.taps());
    // (N, C_out, P) -> (C_out, N·P)
    let mut gmat = vec![0.0; geom.c_out * np];
    for n in 0..geom.n {
        for co in 0..geom.c_out {
            gmat[co * np + n * p..][..p].copy_from_slice(&g[(n * geom.c_out + co) * p..][..p]);
        }
    }
    if let Some(gb) = b.and_then(|b| sink.buf(b)) {
        for co in 0..geom.c_out {
            gb[co] += gmat[co * np..(co + 1) * np].iter().sum::<f64>();
        }
    }
    if let Some(gw) = sink.buf(w) {
        gemm((geom.c_out, np, kk), &gmat, (np, 1), cols, (1, np), 1.0, gw);
    }
    if let Some(gx) = sink.buf(x) {
        let mut dcols = vec![0.0; kk * np];
        gemm(
            (kk, geom.c_out, np),
            &nodes[w].data,
            (1, kk),
            &gmat,
            (np, 1),
            0.0,
            &mut dcols,
        );
        col2im_add(&dcols, geom, gx);
    }
}

pub(crate) fn linear_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    (rows, in_f, out_f): (usize, usize, usize),
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    if let Some(gb) = b.and_then(|b| sink.buf(b)) {
        for row in g.chunks_exact(out_f) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    if let Some(gw) = sink.buf(w) {
        gemm((out_f, rows, in_f), g, (1, out_f), &nodes[x].data, (in_f, 1), 1.0, gw);
    }
    if let Some(gx) = sink.buf(x) {
        gemm((rows, out_f, in_f), g, (out_f, 1), &nodes[w].data, (in_f, 1), 1.0, gx);
    }
}
