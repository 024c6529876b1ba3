//! Raw numeric kernels behind the tape ops.
//!
//! All loops write disjoint output slices when parallelized, and the
//! per-element summation order is fixed, so results are identical no matter
//! how rayon schedules the work.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let row_b = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row_out[j] += av * row_b[j];
            }
        }
    }
    out
}

/// B[n,m] = A[m,n]^T
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output spatial dims of a 3-D cross-correlation.
pub fn conv3d_out_dims(
    in_dims: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return None;
        }
        let padded = in_dims[a] + 2 * pad[a];
        if kernel[a] == 0 || kernel[a] > padded {
            return None;
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Some(out)
}

fn pad_volume<T: Scalar>(
    x: &[T],
    c: usize,
    dims: [usize; 3],
    pad: [usize; 3],
) -> (Vec<T>, [usize; 3]) {
    let [d, h, w] = dims;
    let [pd, ph, pw] = pad;
    if pad == [0, 0, 0] {
        return (x.to_vec(), dims);
    }
    let (dp, hp, wp) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); c * dp * hp * wp];
    for ci in 0..c {
        for zi in 0..d {
            for yi in 0..h {
                let src = ci * d * h * w + zi * h * w + yi * w;
                let dst = ci * dp * hp * wp + (zi + pd) * hp * wp + (yi + ph) * wp + pw;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    (out, [dp, hp, wp])
}

fn crop_volume<T: Scalar>(
    xp: &[T],
    c: usize,
    padded: [usize; 3],
    pad: [usize; 3],
    dims: [usize; 3],
) -> Vec<T> {
    let [dp, hp, wp] = padded;
    let [pd, ph, pw] = pad;
    let [d, h, w] = dims;
    if pad == [0, 0, 0] {
        return xp.to_vec();
    }
    let mut out = vec![T::zero(); c * d * h * w];
    for ci in 0..c {
        for zi in 0..d {
            for yi in 0..h {
                let src = ci * dp * hp * wp + (zi + pd) * hp * wp + (yi + ph) * wp + pw;
                let dst = ci * d * h * w + zi * h * w + yi * w;
                out[dst..dst + w].copy_from_slice(&xp[src..src + w]);
            }
        }
    }
    out
}

/// 3-D cross-correlation. `x` is [c_in, D, H, W], `k` is
/// [c_out, c_in, kD, kH, kW]; returns [c_out, D', H', W'].
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    c_in: usize,
    in_dims: [usize; 3],
    k: &[T],
    c_out: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<T> {
    let out_dims = conv3d_out_dims(in_dims, kernel, stride, pad).expect("checked by caller");
    let (xp, pdims) = pad_volume(x, c_in, in_dims, pad);
    let [dp, hp, wp] = pdims;
    let [kd, kh, kw] = kernel;
    let [sd, sh, sw] = stride;
    let [od, oh, ow] = out_dims;
    let ksize = c_in * kd * kh * kw;
    let out_spatial = od * oh * ow;

    let mut out = vec![T::zero(); c_out * out_spatial];
    out.par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(co, out_c)| {
            let kbase = co * ksize;
            for z in 0..od {
                for y in 0..oh {
                    let acc = &mut out_c[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for ci in 0..c_in {
                        for dz in 0..kd {
                            let zp = z * sd + dz;
                            for dy in 0..kh {
                                let yp = y * sh + dy;
                                let xrow = &xp[ci * dp * hp * wp + zp * hp * wp + yp * wp..];
                                let krow = &k[kbase + ((ci * kd + dz) * kh + dy) * kw..];
                                if sw == 1 {
                                    for dx in 0..kw {
                                        let kv = krow[dx];
                                        let src = &xrow[dx..dx + ow];
                                        for i in 0..ow {
                                            acc[i] += kv * src[i];
                                        }
                                    }
                                } else {
                                    for dx in 0..kw {
                                        let kv = krow[dx];
                                        for i in 0..ow {
                                            acc[i] += kv * xrow[i * sw + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of `conv3d_forward` with respect to the kernels.
pub fn conv3d_backward_kernels<T: Scalar>(
    x: &[T],
    c_in: usize,
    in_dims: [usize; 3],
    g: &[T],
    c_out: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<T> {
    let out_dims = conv3d_out_dims(in_dims, kernel, stride, pad).expect("checked by caller");
    let (xp, pdims) = pad_volume(x, c_in, in_dims, pad);
    let [dp, hp, wp] = pdims;
    let [kd, kh, kw] = kernel;
    let [sd, sh, sw] = stride;
    let [od, oh, ow] = out_dims;
    let ksize = c_in * kd * kh * kw;

    let mut dk = vec![T::zero(); c_out * ksize];
    dk.par_chunks_mut(ksize).enumerate().for_each(|(co, dk_c)| {
        for z in 0..od {
            for y in 0..oh {
                let grow = &g[co * od * oh * ow + (z * oh + y) * ow..][..ow];
                for ci in 0..c_in {
                    for dz in 0..kd {
                        let zp = z * sd + dz;
                        for dy in 0..kh {
                            let yp = y * sh + dy;
                            let xrow = &xp[ci * dp * hp * wp + zp * hp * wp + yp * wp..];
                            let krow = &mut dk_c[((ci * kd + dz) * kh + dy) * kw..][..kw];
                            if sw == 1 {
                                for dx in 0..kw {
                                    let src = &xrow[dx..dx + ow];
                                    let mut acc = T::zero();
                                    for i in 0..ow {
                                        acc += grow[i] * src[i];
                                    }
                                    krow[dx] += acc;
                                }
                            } else {
                                for dx in 0..kw {
                                    let mut acc = T::zero();
                                    for i in 0..ow {
                                        acc += grow[i] * xrow[i * sw + dx];
                                    }
                                    krow[dx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dk
}

/// Gradient of `conv3d_forward` with respect to the input.
pub fn conv3d_backward_input<T: Scalar>(
    c_in: usize,
    in_dims: [usize; 3],
    k: &[T],
    c_out: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    g: &[T],
) -> Vec<T> {
    let out_dims = conv3d_out_dims(in_dims, kernel, stride, pad).expect("checked by caller");
    let [d, h, w] = in_dims;
    let [pd, ph, pw] = pad;
    let (dp, hp, wp) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
    let [kd, kh, kw] = kernel;
    let [sd, sh, sw] = stride;
    let [od, oh, ow] = out_dims;
    let ksize = c_in * kd * kh * kw;
    let pvol = dp * hp * wp;

    let mut dxp = vec![T::zero(); c_in * pvol];
    dxp.par_chunks_mut(pvol).enumerate().for_each(|(ci, dx_c)| {
        for co in 0..c_out {
            let kbase = co * ksize + ci * kd * kh * kw;
            for z in 0..od {
                for y in 0..oh {
                    let grow = &g[co * od * oh * ow + (z * oh + y) * ow..][..ow];
                    for dz in 0..kd {
                        let zp = z * sd + dz;
                        for dy in 0..kh {
                            let yp = y * sh + dy;
                            let dxrow = &mut dx_c[zp * hp * wp + yp * wp..][..wp];
                            let krow = &k[kbase + (dz * kh + dy) * kw..][..kw];
                            if sw == 1 {
                                for dx in 0..kw {
                                    let kv = krow[dx];
                                    let dst = &mut dxrow[dx..dx + ow];
                                    for i in 0..ow {
                                        dst[i] += kv * grow[i];
                                    }
                                }
                            } else {
                                for dx in 0..kw {
                                    let kv = krow[dx];
                                    for i in 0..ow {
                                        dxrow[i * sw + dx] += kv * grow[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    crop_volume(&dxp, c_in, [dp, hp, wp], pad, in_dims)
}

/// Max-pool over non-overlapping windows; window == stride per axis.
/// Returns the pooled volume and the flat input index of each maximum.
pub fn maxpool3d_forward<T: Scalar>(
    x: &[T],
    c: usize,
    in_dims: [usize; 3],
    window: [usize; 3],
) -> (Vec<T>, Vec<u32>, [usize; 3]) {
    let [d, h, w] = in_dims;
    let [pd, ph, pw] = window;
    let (od, oh, ow) = (d / pd, h / ph, w / pw);
    let mut out = vec![T::zero(); c * od * oh * ow];
    let mut arg = vec![0u32; c * od * oh * ow];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dz in 0..pd {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let idx = ci * d * h * w
                                    + (z * pd + dz) * h * w
                                    + (y * ph + dy) * w
                                    + (xo * pw + dx);
                                // ties keep the first (lowest flat index)
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = ci * od * oh * ow + (z * oh + y) * ow + xo;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg, [od, oh, ow])
}

pub fn maxpool3d_backward<T: Scalar>(g: &[T], arg: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (gi, &ai) in g.iter().zip(arg.iter()) {
        dx[ai as usize] += *gi;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // I2 * [[1,2],[3,4]] = [[1,2],[3,4]]
        let i2 = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&i2, &b, 2, 2, 2), b.to_vec());
    }

    #[test]
    fn matmul_selector_row() {
        // [[1,0],[0,0]] * [[5,6],[7,8]] = [[5,6],[0,0]]
        let a = [1.0f64, 0.0, 0.0, 0.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[test]
    fn conv3d_all_ones_sums_window() {
        // 1x1x3x3x3 ones against a 3x3x3 ones kernel -> scalar 27
        let x = vec![1.0f64; 27];
        let k = vec![1.0f64; 27];
        let out = conv3d_forward(&x, 1, [3, 3, 3], &k, 1, [3, 3, 3], [1, 1, 1], [0, 0, 0]);
        assert_eq!(out, vec![27.0]);
    }

    #[test]
    fn conv3d_delta_kernel_is_identity() {
        // centered delta kernel with pad 1 reproduces the input
        let x: Vec<f64> = (0..27).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut k = vec![0.0f64; 27];
        k[13] = 1.0; // center of 3x3x3
        let out = conv3d_forward(&x, 1, [3, 3, 3], &k, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1]);
        assert_eq!(out, x);
    }

    #[test]
    fn conv3d_out_dims_reject_oversized_kernel() {
        assert!(conv3d_out_dims([2, 2, 2], [3, 3, 3], [1, 1, 1], [0, 0, 0]).is_none());
        assert_eq!(
            conv3d_out_dims([2, 2, 2], [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            Some([2, 2, 2])
        );
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = vec![1.0f64, 5.0, 2.0, 0.0, -1.0, -7.0, -3.0, -2.0];
        let (out, arg, dims) = maxpool3d_forward(&x, 1, [2, 2, 2], [2, 2, 2]);
        assert_eq!(dims, [1, 1, 1]);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![1]);
        let dx = maxpool3d_backward(&[2.0], &arg, 8);
        assert_eq!(dx[1], 2.0);
        assert_eq!(dx.iter().sum::<f64>(), 2.0);
    }
}
