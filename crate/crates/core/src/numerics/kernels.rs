//! Inner loops shared by the tape ops. Layouts are row-major; the matmul
//! family uses an i-k-j ordering so the innermost loop runs over contiguous
//! memory and vectorizes.

use super::Element;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            orow[j] = orow[j] + acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image [c,h,w] into columns [c*kh*kw, oh*ow] for conv-as-matmul.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    img: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    cols: &mut [E],
) {
    let oh = conv_out_dim(h, kh, stride.0, pad.0);
    let ow = conv_out_dim(w, kw, stride.1, pad.1);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let ospatial = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * ospatial;
                for oi in 0..oh {
                    let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                    let base = row + oi * ow;
                    if ii < 0 || ii >= h as isize {
                        cols[base..base + ow].fill(E::zero());
                        continue;
                    }
                    let irow = ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                        cols[base + oj] = if jj < 0 || jj >= w as isize {
                            E::zero()
                        } else {
                            plane[irow + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlaps (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    img: &mut [E],
) {
    let oh = conv_out_dim(h, kh, stride.0, pad.0);
    let ow = conv_out_dim(w, kw, stride.1, pad.1);
    debug_assert_eq!(img.len(), c * h * w);
    let ospatial = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * ospatial;
                for oi in 0..oh {
                    let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let irow = ii as usize * w;
                    let base = row + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                        if jj >= 0 && jj < w as isize {
                            let idx = irow + jj as usize;
                            plane[idx] = plane[idx] + cols[base + oj];
                        }
                    }
                }
            }
        }
    }
}
