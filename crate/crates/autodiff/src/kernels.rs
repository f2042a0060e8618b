//! Raw loops behind the differentiable primitives. All buffers are row-major.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl Conv1dGeom {
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let p = (t * self.stride + j * self.dilation) as isize - self.pad_left as isize;
        (p >= 0 && (p as usize) < self.len_in).then_some(p as usize)
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv1dGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.c_out * g.len_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let orow = &mut out[(b * g.c_out + o) * g.len_out..][..g.len_out];
            for c in 0..g.c_in {
                let xrow = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
                for j in 0..g.kernel {
                    let wv = w[(o * g.c_in + c) * g.kernel + j];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        if let Some(p) = g.src(t, j) {
                            *ov += wv * xrow[p];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &Conv1dGeom,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let mut gx = gx;
    let mut gw = gw;
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &grad[(b * g.c_out + o) * g.len_out..][..g.len_out];
            for c in 0..g.c_in {
                let xoff = (b * g.c_in + c) * g.len_in;
                for j in 0..g.kernel {
                    let widx = (o * g.c_in + c) * g.kernel + j;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for (t, &gv) in grow.iter().enumerate() {
                        if let Some(p) = g.src(t, j) {
                            acc += gv * x[xoff + p];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[xoff + p] += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (h, wd) = (g.height, g.width);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = h * wd;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let obase = (b * g.c_out + o) * plane;
            for c in 0..g.c_in {
                let xbase = (b * g.c_in + c) * plane;
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let wv = w[((o * g.c_in + c) * g.kh + di) * g.kw + dj];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + di as isize - ph;
                            if si < 0 || si as usize >= h {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - pw;
                                if sj < 0 || sj as usize >= wd {
                                    continue;
                                }
                                out[obase + i * wd + j] +=
                                    wv * x[xbase + si as usize * wd + sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &Conv2dGeom,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let mut gx = gx;
    let mut gw = gw;
    let (h, wd) = (g.height, g.width);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = h * wd;
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let obase = (b * g.c_out + o) * plane;
            for c in 0..g.c_in {
                let xbase = (b * g.c_in + c) * plane;
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let widx = ((o * g.c_in + c) * g.kh + di) * g.kw + dj;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for i in 0..h {
                            let si = i as isize + di as isize - ph;
                            if si < 0 || si as usize >= h {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - pw;
                                if sj < 0 || sj as usize >= wd {
                                    continue;
                                }
                                let gv = grad[obase + i * wd + j];
                                let xi = xbase + si as usize * wd + sj as usize;
                                acc += gv * x[xi];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xi] += gv * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Split `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm_nn(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let g = Conv1dGeom {
            batch: 1,
            c_in: 1,
            c_out: 1,
            len_in: 4,
            len_out: 4,
            kernel: 3,
            pad_left: 1,
            dilation: 1,
            stride: 1,
        };
        let out = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0], &g);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
