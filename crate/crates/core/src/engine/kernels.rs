//! CPU kernels for the layer kinds of the graph IR. All tensors are NCHW.
//! Convolutions lower to GEMM through im2col/col2im.

use super::tensor::Tensor;

/// Sliding-window geometry shared by conv, transposed conv and im2col.
#[derive(Debug, Clone, Copy)]
pub struct Geom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dil: usize,
}

impl Geom {
    fn k2(&self) -> usize {
        self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// `c = a * b + beta * c` on row-major views given by (row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
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

/// `c x ih x iw` image to a `(c*kh*kw) x (oh*ow)` column matrix. The output
/// grid is passed explicitly so transposed convs can reuse the routine.
#[allow(clippy::too_many_arguments)]
pub fn im2col(src: &[f64], c: usize, ih: usize, iw: usize, g: &Geom, oh: usize, ow: usize, col: &mut [f64]) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * ih * iw..(ci + 1) * ih * iw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * n;
                let dst = &mut col[row..row + n];
                let off = (kj * g.dil) as isize - g.pw as isize;
                for y in 0..oh {
                    let iy = (y * g.sh + ki * g.dil) as isize - g.ph as isize;
                    let d = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= ih as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for (x, v) in d.iter_mut().enumerate() {
                        let ix = (x * g.sw) as isize + off;
                        *v = if ix >= 0 && ix < iw as isize { srow[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(col: &[f64], c: usize, ih: usize, iw: usize, g: &Geom, oh: usize, ow: usize, dst: &mut [f64]) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * ih * iw..(ci + 1) * ih * iw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * n;
                let src = &col[row..row + n];
                let off = (kj * g.dil) as isize - g.pw as isize;
                for y in 0..oh {
                    let iy = (y * g.sh + ki * g.dil) as isize - g.ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for (x, v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = (x * g.sw) as isize + off;
                        if ix >= 0 && ix < iw as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Grouped convolution. `w` is `(cout, cin/groups, kh, kw)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &Tensor,
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    groups: usize,
    g: &Geom,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (n, cin, ih, iw) = x.dims4();
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x, w, g, &mut y);
    } else {
        let kk = cin_g * g.k2();
        let npix = oh * ow;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * npix] };
        for b in 0..n {
            for gi in 0..groups {
                let xs = &x.data()[(b * cin + gi * cin_g) * ih * iw..(b * cin + (gi + 1) * cin_g) * ih * iw];
                let cols: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, cin_g, ih, iw, g, oh, ow, &mut col);
                    &col
                };
                let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let yo = (b * cout + gi * cout_g) * npix;
                gemm(cout_g, kk, npix, wg, (kk, 1), cols, (npix, 1), 0.0, &mut y.data_mut()[yo..yo + cout_g * npix]);
            }
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

fn add_channel_bias(y: &mut Tensor, bias: &[f64]) {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    for b in 0..n {
        for ci in 0..c {
            let o = (b * c + ci) * plane;
            for v in &mut y.data_mut()[o..o + plane] {
                *v += bias[ci];
            }
        }
    }
}

fn channel_sums(dy: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut s = vec![0.0; c];
    for b in 0..n {
        for (ci, acc) in s.iter_mut().enumerate() {
            let o = (b * c + ci) * plane;
            *acc += dy.data()[o..o + plane].iter().sum::<f64>();
        }
    }
    s
}

fn depthwise_forward(x: &Tensor, w: &[f64], g: &Geom, y: &mut Tensor) {
    let (n, c, ih, iw) = x.dims4();
    let (_, _, oh, ow) = y.dims4();
    let k2 = g.k2();
    for b in 0..n {
        for ci in 0..c {
            let xs = &x.data()[(b * c + ci) * ih * iw..(b * c + ci + 1) * ih * iw];
            let ys = &mut y.data_mut()[(b * c + ci) * oh * ow..(b * c + ci + 1) * oh * ow];
            let wk = &w[ci * k2..(ci + 1) * k2];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    let off = (kj * g.dil) as isize - g.pw as isize;
                    for oy in 0..oh {
                        let iy = (oy * g.sh + ki * g.dil) as isize - g.ph as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let srow = &xs[iy as usize * iw..(iy as usize + 1) * iw];
                        let drow = &mut ys[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.sw) as isize + off;
                            if ix >= 0 && ix < iw as isize {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(x: &Tensor, w: &[f64], dy: &Tensor, g: &Geom, dx: Option<&mut Tensor>, dw: &mut [f64]) {
    let (n, c, ih, iw) = x.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let k2 = g.k2();
    let mut dx = dx;
    for b in 0..n {
        for ci in 0..c {
            let xo = (b * c + ci) * ih * iw;
            let yo = (b * c + ci) * oh * ow;
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = ci * k2 + ki * g.kw + kj;
                    let wv = w[widx];
                    let off = (kj * g.dil) as isize - g.pw as isize;
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * g.sh + ki * g.dil) as isize - g.ph as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = xo + iy as usize * iw;
                        let grow = &dy.data()[yo + oy * ow..yo + (oy + 1) * ow];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * g.sw) as isize + off;
                            if ix >= 0 && ix < iw as isize {
                                acc += gv * x.data()[row + ix as usize];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx.data_mut()[row + ix as usize] += gv * wv;
                                }
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Gradients of [`conv_forward`]: `(dx, dw, dbias)`.
pub fn conv_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    groups: usize,
    g: &Geom,
    need_dx: bool,
    has_bias: bool,
) -> (Option<Tensor>, Vec<f64>, Option<Vec<f64>>) {
    let (n, cin, ih, iw) = x.dims4();
    let (_, cout, oh, ow) = dy.dims4();
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut dw = vec![0.0; w.len()];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    if cin_g == 1 && cout_g == 1 {
        depthwise_backward(x, w, dy, g, dx.as_mut(), &mut dw);
    } else {
        let kk = cin_g * g.k2();
        let npix = oh * ow;
        let pointwise = g.is_pointwise();
        let mut col = vec![0.0; if pointwise { 0 } else { kk * npix }];
        let mut dcol = vec![0.0; if need_dx { kk * npix } else { 0 }];
        for b in 0..n {
            for gi in 0..groups {
                let xo = (b * cin + gi * cin_g) * ih * iw;
                let xs = &x.data()[xo..xo + cin_g * ih * iw];
                let cols: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(xs, cin_g, ih, iw, g, oh, ow, &mut col);
                    &col
                };
                let yo = (b * cout + gi * cout_g) * npix;
                let dys = &dy.data()[yo..yo + cout_g * npix];
                let wo = gi * cout_g * kk;
                gemm(cout_g, npix, kk, dys, (npix, 1), cols, (1, npix), 1.0, &mut dw[wo..wo + cout_g * kk]);
                if let Some(dx) = dx.as_mut() {
                    let wg = &w[wo..wo + cout_g * kk];
                    let dxs = &mut dx.data_mut()[xo..xo + cin_g * ih * iw];
                    if pointwise {
                        gemm(kk, cout_g, npix, wg, (1, kk), dys, (npix, 1), 1.0, dxs);
                    } else {
                        gemm(kk, cout_g, npix, wg, (1, kk), dys, (npix, 1), 0.0, &mut dcol);
                        col2im(&dcol, cin_g, ih, iw, g, oh, ow, dxs);
                    }
                }
            }
        }
    }
    (dx, dw, has_bias.then(|| channel_sums(dy)))
}

/// Transposed convolution. `w` is `(cin, cout/groups, kh, kw)`; the output
/// size is given (it may be a crop of the full scatter).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_forward(
    x: &Tensor,
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    groups: usize,
    g: &Geom,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (n, cin, ih, iw) = x.dims4();
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let kk = cout_g * g.k2();
    let npix = ih * iw;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    let mut cols = vec![0.0; kk * npix];
    for b in 0..n {
        for gi in 0..groups {
            let xo = (b * cin + gi * cin_g) * npix;
            let xs = &x.data()[xo..xo + cin_g * npix];
            let wg = &w[gi * cin_g * kk..(gi + 1) * cin_g * kk];
            gemm(kk, cin_g, npix, wg, (1, kk), xs, (npix, 1), 0.0, &mut cols);
            let yo = (b * cout + gi * cout_g) * oh * ow;
            col2im(&cols, cout_g, oh, ow, g, ih, iw, &mut y.data_mut()[yo..yo + cout_g * oh * ow]);
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

pub fn conv_transpose_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    groups: usize,
    g: &Geom,
    need_dx: bool,
    has_bias: bool,
) -> (Option<Tensor>, Vec<f64>, Option<Vec<f64>>) {
    let (n, cin, ih, iw) = x.dims4();
    let (_, cout, oh, ow) = dy.dims4();
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let kk = cout_g * g.k2();
    let npix = ih * iw;
    let mut dw = vec![0.0; w.len()];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcols = vec![0.0; kk * npix];
    for b in 0..n {
        for gi in 0..groups {
            let yo = (b * cout + gi * cout_g) * oh * ow;
            im2col(&dy.data()[yo..yo + cout_g * oh * ow], cout_g, oh, ow, g, ih, iw, &mut dcols);
            let xo = (b * cin + gi * cin_g) * npix;
            let xs = &x.data()[xo..xo + cin_g * npix];
            let wo = gi * cin_g * kk;
            gemm(cin_g, npix, kk, xs, (npix, 1), &dcols, (1, npix), 1.0, &mut dw[wo..wo + cin_g * kk]);
            if let Some(dx) = dx.as_mut() {
                let wg = &w[wo..wo + cin_g * kk];
                gemm(cin_g, kk, npix, wg, (kk, 1), &dcols, (npix, 1), 0.0, &mut dx.data_mut()[xo..xo + cin_g * npix]);
            }
        }
    }
    (dx, dw, has_bias.then(|| channel_sums(dy)))
}

/// Max pool; returns the output and, per output element, the flat in-plane
/// index of the selected input.
pub fn max_pool_forward(x: &Tensor, g: &Geom, oh: usize, ow: usize) -> (Tensor, Vec<u32>) {
    let (n, c, ih, iw) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let xs = &x.data()[p * ih * iw..(p + 1) * ih * iw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ki in 0..g.kh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let idx = iy as usize * iw + ix as usize;
                        if xs[idx] > best {
                            best = xs[idx];
                            bi = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y.data_mut()[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(x_shape: &[usize], dy: &Tensor, arg: &[u32]) -> Tensor {
    let (_, _, oh, ow) = dy.dims4();
    let plane_in = x_shape[2] * x_shape[3];
    let mut dx = Tensor::zeros(x_shape);
    for (o, (&g, &a)) in dy.data().iter().zip(arg).enumerate() {
        let p = o / (oh * ow);
        dx.data_mut()[p * plane_in + a as usize] += g;
    }
    dx
}

fn window_count(g: &Geom, oy: usize, ox: usize, ih: usize, iw: usize) -> usize {
    let span = |o: usize, s: usize, p: usize, k: usize, lim: usize| {
        let lo = (o * s) as isize - p as isize;
        let hi = lo + k as isize;
        (hi.min(lim as isize) - lo.max(0)).max(0) as usize
    };
    span(oy, g.sh, g.ph, g.kh, ih) * span(ox, g.sw, g.pw, g.kw, iw)
}

/// Average pool over the in-bounds part of each window.
pub fn avg_pool_forward(x: &Tensor, g: &Geom, oh: usize, ow: usize) -> Tensor {
    let (n, c, ih, iw) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        let xs = &x.data()[p * ih * iw..(p + 1) * ih * iw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ki in 0..g.kh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < iw as isize {
                            s += xs[iy as usize * iw + ix as usize];
                        }
                    }
                }
                y.data_mut()[p * oh * ow + oy * ow + ox] = s / window_count(g, oy, ox, ih, iw) as f64;
            }
        }
    }
    y
}

pub fn avg_pool_backward(x_shape: &[usize], dy: &Tensor, g: &Geom) -> Tensor {
    let (n, c, ih, iw) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = dy.data()[p * oh * ow + oy * ow + ox] / window_count(g, oy, ox, ih, iw) as f64;
                for ki in 0..g.kh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < iw as isize {
                            dx.data_mut()[p * ih * iw + iy as usize * iw + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a batchnorm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance (for running statistics).
    pub batch_var: Vec<f64>,
}

/// Batchnorm with batch statistics when `running` is `None`, else with the
/// given `(mean, var)`.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Tensor, BnCache) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut unbiased = vec![0.0; c];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            for ci in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let o = (b * c + ci) * plane;
                    s += x.data()[o..o + plane].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut q = 0.0;
                for b in 0..n {
                    let o = (b * c + ci) * plane;
                    q += x.data()[o..o + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = q / m;
                unbiased[ci] = if m > 1.0 { q / (m - 1.0) } else { q / m };
            }
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.numel()];
    for b in 0..n {
        for ci in 0..c {
            let o = (b * c + ci) * plane;
            for i in o..o + plane {
                let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                y.data_mut()[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: unbiased,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the training-mode
/// gradient (statistics depend on x) over the fixed-statistics one.
pub fn batchnorm_backward(dy: &Tensor, gamma: &[f64], cache: &BnCache, batch_stats: bool) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ci in 0..c {
            let o = (b * c + ci) * plane;
            for i in o..o + plane {
                dgamma[ci] += dy.data()[i] * cache.xhat[i];
                dbeta[ci] += dy.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ci in 0..c {
            let o = (b * c + ci) * plane;
            let k = gamma[ci] * cache.inv_std[ci];
            for i in o..o + plane {
                dx.data_mut()[i] = if batch_stats {
                    k / m * (m * dy.data()[i] - dbeta[ci] - cache.xhat[i] * dgamma[ci])
                } else {
                    k * dy.data()[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Half-pixel bilinear sampling table: `(i0, i1, w1)` per output index.
fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, ih, iw) = x.dims4();
    let ty = bilinear_table(ih, oh);
    let tx = bilinear_table(iw, ow);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        let xs = &x.data()[p * ih * iw..(p + 1) * ih * iw];
        let ys = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = xs[y0 * iw + x0] * (1.0 - wx) + xs[y0 * iw + x1] * wx;
                let bot = xs[y1 * iw + x0] * (1.0 - wx) + xs[y1 * iw + x1] * wx;
                ys[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    y
}

pub fn bilinear_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, ih, iw) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = dy.dims4();
    let ty = bilinear_table(ih, oh);
    let tx = bilinear_table(iw, ow);
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        let gs = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let ds = &mut dx.data_mut()[p * ih * iw..(p + 1) * ih * iw];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = gs[oy * ow + ox];
                ds[y0 * iw + x0] += g * (1.0 - wy) * (1.0 - wx);
                ds[y0 * iw + x1] += g * (1.0 - wy) * wx;
                ds[y1 * iw + x0] += g * wy * (1.0 - wx);
                ds[y1 * iw + x1] += g * wy * wx;
            }
        }
    }
    dx
}

/// Reorders channels: output channel `j` is input channel `perm[j]`.
pub fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for (j, &src) in perm.iter().enumerate() {
            let so = (b * c + src) * plane;
            let d = (b * c + j) * plane;
            y.data_mut()[d..d + plane].copy_from_slice(&x.data()[so..so + plane]);
        }
    }
    y
}

/// Inverse of `perm`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}
