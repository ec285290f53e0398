//! Raw numeric kernels behind the tape primitives. Everything here works on
//! flat row-major slices; shape checking happens in the callers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is `k × n`.
/// `a_t`/`b_t` say whether the stored operand is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted above.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin·k·k, ho·wo]`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub(crate) fn col2im(col: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = oh as isize + ki as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = ow as isize + kj as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `k × k` mean pooling over `planes` planes of `h × w`.
pub(crate) fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = 0.0;
                for i in 0..k {
                    let r = &src[(oh * k + i) * w + ow * k..(oh * k + i) * w + ow * k + k];
                    s += r.iter().sum::<f64>();
                }
                dst[oh * wo + ow] = s * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    gy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [f64],
) {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for p in 0..planes {
        let src = &gy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = src[oh * wo + ow] * inv;
                for i in 0..k {
                    for j in 0..k {
                        dst[(oh * k + i) * w + ow * k + j] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if a_t { transpose(m, k, &a) } else { a.clone() };
            let bb = if b_t { transpose(k, n, &b) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &aa, a_t, &bb, b_t, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { cin: 2, h: 5, w: 4, k: 3, pad: 1, ho: 5, wo: 4 };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.out_pixels())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
