//! Raw convolution kernels on row-major `channels × time` buffers.
//!
//! Each kernel parallelises over output rows only; every element is accumulated
//! in a fixed order, so results do not depend on the [`Exec`] policy.

#![allow(clippy::needless_range_loop)]

use super::Scalar;
use crate::exec::Exec;

/// Geometry of a (possibly strided, dilated, zero-padded) 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output length, or `None` when the padded input is shorter than the receptive field.
    pub fn t_out(&self) -> Option<usize> {
        let span = self.t_in + 2 * self.pad;
        let rf = self.receptive_field();
        (span >= rf).then(|| (span - rf) / self.stride + 1)
    }

    /// Range of output frames `t` for which input index `t*stride + offset` is in bounds.
    fn valid(&self, k: usize, t_out: usize) -> (usize, usize, isize) {
        let offset = (k * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset) + s - 1) / s
        };
        let hi = (self.t_in as isize - 1 - offset).div_euclid(s) + 1;
        let hi = hi.clamp(0, t_out as isize);
        (lo.min(hi) as usize, hi as usize, offset)
    }
}

pub fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, exec: Exec) -> Vec<T> {
    let t_out = g
        .t_out()
        .expect("conv1d: input shorter than receptive field");
    let mut out = vec![T::zero(); g.c_out * t_out];
    exec.for_each_row(&mut out, t_out, |co, row| {
        for ci in 0..g.c_in {
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let wv = w[(co * g.c_in + ci) * g.kernel + k];
                let (lo, hi, off) = g.valid(k, t_out);
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let src = &xrow[start..start + (hi - lo)];
                    for (o, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *o = *o + wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        let i = (t as isize * g.stride as isize + off) as usize;
                        row[t] = row[t] + wv * xrow[i];
                    }
                }
            }
        }
    });
    out
}

pub fn conv1d_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom, exec: Exec) -> Vec<T> {
    let t_out = g.t_out().unwrap();
    let mut gx = vec![T::zero(); g.c_in * g.t_in];
    exec.for_each_row(&mut gx, g.t_in, |ci, row| {
        for co in 0..g.c_out {
            let grow = &gout[co * t_out..(co + 1) * t_out];
            for k in 0..g.kernel {
                let wv = w[(co * g.c_in + ci) * g.kernel + k];
                let (lo, hi, off) = g.valid(k, t_out);
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    for (dst, &gv) in row[start..start + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                        *dst = *dst + wv * gv;
                    }
                } else {
                    for t in lo..hi {
                        let i = (t as isize * g.stride as isize + off) as usize;
                        row[i] = row[i] + wv * grow[t];
                    }
                }
            }
        }
    });
    gx
}

pub fn conv1d_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom, exec: Exec) -> Vec<T> {
    let t_out = g.t_out().unwrap();
    let mut gw = vec![T::zero(); g.c_out * g.c_in * g.kernel];
    exec.for_each_row(&mut gw, g.c_in * g.kernel, |co, row| {
        let grow = &gout[co * t_out..(co + 1) * t_out];
        for ci in 0..g.c_in {
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let (lo, hi, off) = g.valid(k, t_out);
                let mut acc = T::zero();
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[start..start + (hi - lo)]) {
                        acc = acc + gv * xv;
                    }
                } else {
                    for t in lo..hi {
                        let i = (t as isize * g.stride as isize + off) as usize;
                        acc = acc + grow[t] * xrow[i];
                    }
                }
                row[ci * g.kernel + k] = acc;
            }
        }
    });
    gw
}

/// Depthwise conv: channel `c` of the output only sees channel `c` of the input.
/// `w` is `channels × kernel`; `g.c_in == g.c_out`.
pub fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, exec: Exec) -> Vec<T> {
    let t_out = g
        .t_out()
        .expect("depthwise conv: input shorter than receptive field");
    let mut out = vec![T::zero(); g.c_out * t_out];
    exec.for_each_row(&mut out, t_out, |c, row| {
        let xrow = &x[c * g.t_in..(c + 1) * g.t_in];
        for k in 0..g.kernel {
            let wv = w[c * g.kernel + k];
            let (lo, hi, off) = g.valid(k, t_out);
            for t in lo..hi {
                let i = (t as isize * g.stride as isize + off) as usize;
                row[t] = row[t] + wv * xrow[i];
            }
        }
    });
    out
}

pub fn depthwise_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    exec: Exec,
) -> (Vec<T>, Vec<T>) {
    let t_out = g.t_out().unwrap();
    // Row c holds [grad_x(c, 0..t_in) | grad_w(c, 0..kernel)].
    let width = g.t_in + g.kernel;
    let mut both = vec![T::zero(); g.c_in * width];
    exec.for_each_row(&mut both, width, |c, row| {
        let (gx, gw) = row.split_at_mut(g.t_in);
        let xrow = &x[c * g.t_in..(c + 1) * g.t_in];
        let grow = &gout[c * t_out..(c + 1) * t_out];
        for k in 0..g.kernel {
            let wv = w[c * g.kernel + k];
            let (lo, hi, off) = g.valid(k, t_out);
            let mut acc = T::zero();
            for t in lo..hi {
                let i = (t as isize * g.stride as isize + off) as usize;
                gx[i] = gx[i] + wv * grow[t];
                acc = acc + grow[t] * xrow[i];
            }
            gw[k] = acc;
        }
    });
    let mut gx = Vec::with_capacity(g.c_in * g.t_in);
    let mut gw = Vec::with_capacity(g.c_in * g.kernel);
    for row in both.chunks(width) {
        gx.extend_from_slice(&row[..g.t_in]);
        gw.extend_from_slice(&row[g.t_in..]);
    }
    (gx, gw)
}

/// Geometry of a transposed conv; `w` is `c_in × c_out × kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub stride: usize,
}

impl ConvTGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in - 1) * self.stride + self.kernel
    }
}

pub fn conv_transpose_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvTGeom, exec: Exec) -> Vec<T> {
    let t_out = g.t_out();
    let mut out = vec![T::zero(); g.c_out * t_out];
    exec.for_each_row(&mut out, t_out, |co, row| {
        for ci in 0..g.c_in {
            let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
            for k in 0..g.kernel {
                let wv = w[(ci * g.c_out + co) * g.kernel + k];
                for (t, &xv) in xrow.iter().enumerate() {
                    let o = t * g.stride + k;
                    row[o] = row[o] + wv * xv;
                }
            }
        }
    });
    out
}

pub fn conv_transpose_backward_input<T: Scalar>(
    gout: &[T],
    w: &[T],
    g: &ConvTGeom,
    exec: Exec,
) -> Vec<T> {
    let t_out = g.t_out();
    let mut gx = vec![T::zero(); g.c_in * g.t_in];
    exec.for_each_row(&mut gx, g.t_in, |ci, row| {
        for co in 0..g.c_out {
            let grow = &gout[co * t_out..(co + 1) * t_out];
            for k in 0..g.kernel {
                let wv = w[(ci * g.c_out + co) * g.kernel + k];
                for (t, r) in row.iter_mut().enumerate() {
                    *r = *r + wv * grow[t * g.stride + k];
                }
            }
        }
    });
    gx
}

pub fn conv_transpose_backward_weight<T: Scalar>(
    gout: &[T],
    x: &[T],
    g: &ConvTGeom,
    exec: Exec,
) -> Vec<T> {
    let t_out = g.t_out();
    let mut gw = vec![T::zero(); g.c_in * g.c_out * g.kernel];
    exec.for_each_row(&mut gw, g.c_out * g.kernel, |ci, row| {
        let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
        for co in 0..g.c_out {
            let grow = &gout[co * t_out..(co + 1) * t_out];
            for k in 0..g.kernel {
                let mut acc = T::zero();
                for (t, &xv) in xrow.iter().enumerate() {
                    acc = acc + xv * grow[t * g.stride + k];
                }
                row[co * g.kernel + k] = acc;
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let t_out = g.t_out().unwrap();
        let mut out = vec![0.0; g.c_out * t_out];
        for co in 0..g.c_out {
            for t in 0..t_out {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    for k in 0..g.kernel {
                        let i = (t * g.stride + k * g.dilation) as isize - g.pad as isize;
                        if i >= 0 && (i as usize) < g.t_in {
                            acc +=
                                w[(co * g.c_in + ci) * g.kernel + k] * x[ci * g.t_in + i as usize];
                        }
                    }
                }
                out[co * t_out + t] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, dilation, pad) in &[(1, 1, 0), (2, 1, 1), (1, 3, 3), (3, 2, 2), (16, 1, 0)] {
            let g = ConvGeom {
                c_in: 3,
                c_out: 2,
                kernel: 4,
                t_in: 37,
                stride,
                dilation,
                pad,
            };
            let x: Vec<f64> = (0..3 * 37).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..2 * 3 * 4)
                .map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.7)
                .collect();
            let fast = conv1d_forward(&x, &w, &g, Exec::Sequential);
            let slow = naive_conv(&x, &w, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_short_has_no_output() {
        let g = ConvGeom {
            c_in: 1,
            c_out: 1,
            kernel: 32,
            t_in: 31,
            stride: 16,
            dilation: 1,
            pad: 0,
        };
        assert_eq!(g.t_out(), None);
        assert_eq!(ConvGeom { t_in: 32, ..g }.t_out(), Some(1));
        assert_eq!(ConvGeom { t_in: 16_000, ..g }.t_out(), Some(999));
    }
}
