//! Raw f64 kernels shared by the forward ops and their backward closures.
//! Loop orders keep the innermost access contiguous so the compiler can
//! vectorize; nothing here touches the autodiff graph.

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// out[k,n] = a[m,k]ᵀ · b[m,n], accumulated into `out`.
pub(crate) fn mm_tn_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
/// in_: [ci, h, w], weight: [co, ci, 3, 3], bias: [co], out: [co, h, w].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3(
    in_: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    debug_assert_eq!(in_.len(), ci * h * w);
    debug_assert_eq!(weight.len(), co * ci * 9);
    debug_assert_eq!(out.len(), co * h * w);
    let plane = h * w;
    for o in 0..co {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        oplane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..ci {
            let iplane = &in_[i * plane..(i + 1) * plane];
            let k = &weight[(o * ci + i) * 9..(o * ci + i) * 9 + 9];
            for y in 0..h {
                for (dy, krow) in k.chunks_exact(3).enumerate() {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let irow = &iplane[sy * w..(sy + 1) * w];
                    let orow = &mut oplane[y * w..(y + 1) * w];
                    // dx = 0, 1, 2  ->  source column x + dx - 1
                    if krow[0] != 0.0 {
                        for x in 1..w {
                            orow[x] += krow[0] * irow[x - 1];
                        }
                    }
                    if krow[1] != 0.0 {
                        for x in 0..w {
                            orow[x] += krow[1] * irow[x];
                        }
                    }
                    if krow[2] != 0.0 {
                        for x in 0..w.saturating_sub(1) {
                            orow[x] += krow[2] * irow[x + 1];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv3x3 with respect to its input, accumulated into `din`.
pub(crate) fn conv3x3_input_grad(
    gout: &[f64],
    weight: &[f64],
    din: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for o in 0..co {
        let gplane = &gout[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let dplane = &mut din[i * plane..(i + 1) * plane];
            let k = &weight[(o * ci + i) * 9..(o * ci + i) * 9 + 9];
            // din[i, sy, sx] += gout[o, y, x] * k[dy, dx] with sy = y+dy-1.
            for y in 0..h {
                let grow = &gplane[y * w..(y + 1) * w];
                for (dy, krow) in k.chunks_exact(3).enumerate() {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let drow = &mut dplane[(sy - 1) * w..sy * w];
                    if krow[0] != 0.0 {
                        for x in 1..w {
                            drow[x - 1] += krow[0] * grow[x];
                        }
                    }
                    if krow[1] != 0.0 {
                        for x in 0..w {
                            drow[x] += krow[1] * grow[x];
                        }
                    }
                    if krow[2] != 0.0 {
                        for x in 0..w.saturating_sub(1) {
                            drow[x + 1] += krow[2] * grow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv3x3 with respect to weight and bias, accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_weight_grad(
    gout: &[f64],
    in_: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for o in 0..co {
        let gplane = &gout[o * plane..(o + 1) * plane];
        dbias[o] += gplane.iter().sum::<f64>();
        for i in 0..ci {
            let iplane = &in_[i * plane..(i + 1) * plane];
            let dk = &mut dweight[(o * ci + i) * 9..(o * ci + i) * 9 + 9];
            for y in 0..h {
                let grow = &gplane[y * w..(y + 1) * w];
                for dy in 0..3usize {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let irow = &iplane[(sy - 1) * w..sy * w];
                    let mut s0 = 0.0;
                    for x in 1..w {
                        s0 += grow[x] * irow[x - 1];
                    }
                    let s1: f64 = grow.iter().zip(irow).map(|(g, v)| g * v).sum();
                    let mut s2 = 0.0;
                    for x in 0..w.saturating_sub(1) {
                        s2 += grow[x] * irow[x + 1];
                    }
                    dk[dy * 3] += s0;
                    dk[dy * 3 + 1] += s1;
                    dk[dy * 3 + 2] += s2;
                }
            }
        }
    }
}
