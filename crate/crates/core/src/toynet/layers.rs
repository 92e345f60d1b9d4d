//! Forward and backward kernels on `(batch, channels, height, width)` tensors.

use super::tensor::Tensor;

/// Stride-1 convolution with odd square kernel and zero "same" padding.
/// `weight` is `[c_out, c_in, k, k]`, `bias` is `[c_out]`.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: &[f64], c_out: usize, k: usize) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    debug_assert_eq!(weight.len(), c_out * c_in * k * k);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    for s in 0..n {
        for co in 0..c_out {
            let o = out.plane_mut(s, co);
            o.fill(bias[co]);
            for ci in 0..c_in {
                let i = x.plane(s, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let iy = (y as isize + dy) as usize;
                            let start = (iy * w) as isize + x0 as isize + dx;
                            let irow = &i[start as usize..start as usize + (x1 - x0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. `d_input` is left
/// at zero when `input_grad` is false.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    d_out: &Tensor,
    k: usize,
    input_grad: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c_in, h, w) = x.dims4();
    let c_out = d_out.dims4().1;
    let pad = (k / 2) as isize;
    let mut dx = Tensor::zeros(&[n, c_in, h, w]);
    let mut dw = vec![0.0; c_out * c_in * k * k];
    let mut db = vec![0.0; c_out];
    for s in 0..n {
        for co in 0..c_out {
            db[co] += d_out.plane(s, co).iter().sum::<f64>();
        }
        for ci in 0..c_in {
            let i = x.plane(s, ci);
            for co in 0..c_out {
                let g = d_out.plane(s, co);
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * c_in + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (dy, ddx) = (ky as isize - pad, kx as isize - pad);
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, ddx);
                        let mut acc = 0.0;
                        let dplane = dx.plane_mut(s, ci);
                        for y in y0..y1 {
                            let grow = &g[y * w + x0..y * w + x1];
                            let iy = (y as isize + dy) as usize;
                            let start = ((iy * w) as isize + x0 as isize + ddx) as usize;
                            let irow = &i[start..start + (x1 - x0)];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            if input_grad {
                                let drow = &mut dplane[start..start + (x1 - x0)];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Output rows/cols `[lo, hi)` whose input `y + d` stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

pub fn relu(pre: &Tensor) -> Tensor {
    let data = pre.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(pre.shape(), data).expect("same shape")
}

pub fn relu_backward(pre: &Tensor, d_out: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.shape(), data).expect("same shape")
}

/// Mean over non-overlapping `f × f` windows.
pub fn avg_pool(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / f, w / f);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let inv = 1.0 / (f * f) as f64;
    for s in 0..n {
        for ch in 0..c {
            let i = x.plane(s, ch);
            let o = out.plane_mut(s, ch);
            for y in 0..h {
                for xx in 0..w {
                    o[(y / f) * ow + xx / f] += i[y * w + xx];
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(d_out: &Tensor, f: usize) -> Tensor {
    let (n, c, oh, ow) = d_out.dims4();
    let (h, w) = (oh * f, ow * f);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let inv = 1.0 / (f * f) as f64;
    for s in 0..n {
        for ch in 0..c {
            let g = d_out.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for y in 0..h {
                for xx in 0..w {
                    d[y * w + xx] = g[(y / f) * ow + xx / f] * inv;
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return x.clone();
    }
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            let i = x.plane(s, ch);
            let o = out.plane_mut(s, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    o[y * ow + xx] = i[(y / f) * w + xx / f];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `f × f` block.
pub fn upsample_nearest_backward(d_out: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return d_out.clone();
    }
    let (n, c, oh, ow) = d_out.dims4();
    let (h, w) = (oh / f, ow / f);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let g = d_out.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    d[(y / f) * w + xx / f] += g[y * ow + xx];
                }
            }
        }
    }
    dx
}

/// Brings `x` to `h × w` by integer-factor nearest upsampling or average pooling.
pub fn resize(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (_, _, xh, xw) = x.dims4();
    if xh == h && xw == w {
        x.clone()
    } else if xh < h {
        upsample_nearest(x, h / xh)
    } else {
        avg_pool(x, xh / h)
    }
}

pub fn resize_backward(d_out: &Tensor, src_h: usize, src_w: usize) -> Tensor {
    let (_, _, h, w) = d_out.dims4();
    if src_h == h && src_w == w {
        d_out.clone()
    } else if src_h < h {
        upsample_nearest_backward(d_out, h / src_h)
    } else {
        avg_pool_backward(d_out, src_h / h)
    }
}

/// Channel-wise concatenation of equally sized maps.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = parts[0].dims4();
    let c_total: usize = parts.iter().map(|p| p.dims4().1).sum();
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    for s in 0..n {
        let mut offset = 0;
        for p in parts {
            let c = p.dims4().1;
            for ch in 0..c {
                out.plane_mut(s, offset + ch).copy_from_slice(p.plane(s, ch));
            }
            offset += c;
        }
    }
    out
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (n, _, h, w) = x.dims4();
    let mut offset = 0;
    sizes
        .iter()
        .map(|&c| {
            let mut part = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                for ch in 0..c {
                    part.plane_mut(s, ch).copy_from_slice(x.plane(s, offset + ch));
                }
            }
            offset += c;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Direct definition of a padded convolution, independent of the kernel above.
    fn conv_reference(x: &Tensor, w: &[f64], b: &[f64], c_out: usize, k: usize) -> Tensor {
        let (n, c_in, h, wd) = x.dims4();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, c_out, h, wd]);
        for s in 0..n {
            for co in 0..c_out {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[((co * c_in + ci) * k + ky) * k + kx]
                                            * x.at(s, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * c_out + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let x = t(&[2, 2, 4, 5], &x);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b = [0.1, -0.2, 0.3];
        let got = conv2d(&x, &w, &b, 3, 3);
        let want = conv_reference(&x, &w, &b, 3, 3);
        for (g, r) in got.data().iter().zip(want.data()) {
            assert!((g - r).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let x: Vec<f64> = (0..3 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = t(&[1, 3, 3, 4], &x);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let g: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 1.3).sin()).collect();
        let g = t(&[1, 2, 3, 4], &g);
        let y = conv2d(&x, &w, &[0.0, 0.0], 2, 3);
        let (dx, dw, db) = conv2d_backward(&x, &w, &g, 3, true);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        assert!((db[0] - g.plane(0, 0).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool(&x, 2).data(), &[2.5]);
        let up = upsample_nearest(&x, 2);
        assert_eq!(up.dims4(), (1, 1, 4, 4));
        assert_eq!(up.at(0, 0, 3, 1), 3.0);
        let back = upsample_nearest_backward(&Tensor::from_vec(&[1, 1, 4, 4], vec![1.0; 16]).unwrap(), 2);
        assert_eq!(back.data(), &[4.0; 4]);
        assert_eq!(resize(&up, 2, 2).data(), x.data());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = t(&[1, 1, 1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat_channels(&[&a, &b]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
