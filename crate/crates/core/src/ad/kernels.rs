//! Dense kernels shared by the forward and backward passes.

use super::graph::ConvGeom;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k`, `op(b)` is `k x n` and `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Stored shapes: a is [m, k] or [k, m]; b is [k, n] or [n, k].
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above guarantee every index reached through
    // these strides lies inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Unfolds one `[in_ch, h, w]` example into a `[in_ch*k*k, h*w]` patch matrix.
pub fn im2col(geom: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let (h, w, k, pad) = (geom.height as isize, geom.width as isize, geom.kernel, geom.pad() as isize);
    let plane = geom.plane();
    for c in 0..geom.in_ch {
        let chan = &input[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y + ki as isize - pad;
                    for x in 0..w {
                        let sx = x + kj as isize - pad;
                        dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            chan[(sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the input gradient.
pub fn col2im(geom: &ConvGeom, col: &[f64], grad: &mut [f64]) {
    let (h, w, k, pad) = (geom.height as isize, geom.width as isize, geom.kernel, geom.pad() as isize);
    let plane = geom.plane();
    for c in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y + ki as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kj as isize - pad;
                        if sx >= 0 && sx < w {
                            grad[c * plane + (sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}
