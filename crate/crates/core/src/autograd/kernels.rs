//! Forward/adjoint kernel pairs used by the tape.

use crate::tensor::{gemm, Element, MatView};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ow * stride + kj - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let last = g.w as isize - 1 + g.pad as isize - kj as isize;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / g.stride + 1).min(g.wo)
    };
    (lo.min(hi), hi)
}

pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.col_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let out = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

pub fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.col_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &src_row[oh * g.wo + lo..oh * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &s) in dst[start..start + src.len()].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    } else {
                        for (d, &s) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let l = g.col_len();
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * l];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * l]
    };
    let wv = MatView::row_major(0, cout, g.col_rows());
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let dst = &mut out[s * cout * l..(s + 1) * cout * l];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(l).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            w,
            wv,
            src,
            MatView::row_major(0, g.col_rows(), l),
            beta,
            dst,
            MatView::row_major(0, cout, l),
        );
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let l = g.col_len();
    let rows = g.col_rows();
    let in_per = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_per]);
    let mut dw = want_dw.then(|| vec![T::zero(); cout * rows]);
    let mut db = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * l }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { rows * l } else { 0 }];
    let wv = MatView::row_major(0, cout, rows);
    for s in 0..n {
        let dys = &dy[s * cout * l..(s + 1) * cout * l];
        for (co, row) in dys.chunks(l).enumerate() {
            db[co] = db[co] + row.iter().copied().sum();
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_per..(s + 1) * in_per];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dw += dy_s · cols^T
            gemm(
                T::one(),
                dys,
                MatView::row_major(0, cout, l),
                src,
                MatView::row_major(0, rows, l).t(),
                T::one(),
                dw,
                MatView::row_major(0, cout, rows),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(
                    T::one(),
                    w,
                    wv.t(),
                    dys,
                    MatView::row_major(0, cout, l),
                    T::zero(),
                    dxs,
                    MatView::row_major(0, rows, l),
                );
            } else {
                gemm(
                    T::one(),
                    w,
                    wv.t(),
                    dys,
                    MatView::row_major(0, cout, l),
                    T::zero(),
                    &mut dcols,
                    MatView::row_major(0, rows, l),
                );
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Reflect index into `[0, n)` without repeating the edge sample (`-1 -> 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Adaptive average pooling bin `[start, end)` for output index `i`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Bilinear source taps (half-pixel centers, edge clamped) for a 1-D resize.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = src - i0 as f64;
            (i0, i1, if i0 == i1 { 0.0 } else { lambda })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_reflect() {
        let n = 4;
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-2, 1), 0);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bin(0, 10, 3), (0, 4));
        assert_eq!(adaptive_bin(1, 10, 3), (3, 7));
        assert_eq!(adaptive_bin(2, 10, 3), (6, 10));
        assert_eq!(adaptive_bin(1, 8, 4), (2, 4));
    }

    #[test]
    fn bilinear_upsample_by_two_taps() {
        let taps = bilinear_taps(2, 4);
        assert_eq!((taps[0].0, taps[0].2), (0, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1);
        let x: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5 % 13) as f64) * 0.1).collect();
        let b = [0.5, -1.0, 2.0];
        let y = conv2d_forward(&x, 1, &g, &w, 3, Some(&b));
        for co in 0..3 {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= 5 || iw >= 4 {
                                    continue;
                                }
                                acc += w[((co * 2 + ci) * 3 + ki) * 3 + kj]
                                    * x[(ci * 5 + ih as usize) * 4 + iw as usize];
                            }
                        }
                    }
                    let got = y[(co * g.ho + oh) * g.wo + ow];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for &(h, w, k, stride, pad) in &[
            (5, 4, 3, 2, 1),
            (6, 7, 3, 1, 1),
            (4, 4, 1, 1, 0),
            (7, 5, 3, 2, 0),
            (3, 3, 3, 1, 2),
            (8, 9, 5, 3, 2),
        ] {
            let g = ConvGeom::new(2, h, w, k, stride, pad);
            let n = 2 * h * w;
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.col_len())
                .map(|i| ((i * 5 % 13) as f64) - 6.0)
                .collect();
            let mut cols = vec![1e9; c.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; n];
            col2im_add(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs, "{h}x{w} k{k} s{stride} p{pad}");
        }
    }
}
