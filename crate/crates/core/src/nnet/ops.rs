//! Layer operations and their backward passes.

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Parameter gradients of a convolution-like layer, plus the gradient with
/// respect to its input when requested.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn check_conv(x: &Tensor4<impl Real>, w_len: usize, b_len: usize, cout: usize, k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("same-padding kernel must be odd, got {k}")));
    }
    let want = cout * x.channels() * k * k;
    if w_len != want || b_len != cout {
        return Err(Error::ShapeMismatch(format!(
            "conv {}->{cout} k{k}: {w_len} weights / {b_len} biases, want {want} / {cout}",
            x.channels()
        )));
    }
    Ok(())
}

/// Unrolls one `(cin, h, w)` sample into `(cin*k*k, h*w)` columns with zero
/// padding `k/2` on every side.
fn im2col<T: Real>(src: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let ox = kx as isize - p;
                // valid output columns for this horizontal shift
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + ox) as usize;
                    out[x0..x1].copy_from_slice(&src_row[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a sample.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let ox = kx as isize - p;
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + ox) as usize;
                    let dst_row = &mut plane[sy as usize * w + sx0..][..x1 - x0];
                    for (d, &s) in dst_row.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Same-padding, stride-1 cross-correlation. `weights` are laid out
/// `(cout, cin, k, k)`; `k` must be odd.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weights: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> Result<Tensor4<T>> {
    check_conv(x, weights.len(), bias.len(), cout, k)?;
    let [n, cin, h, w] = x.dims();
    let hw = h * w;
    let ckk = cin * k * k;
    let mut out = Tensor4::zeros([n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for b in 0..n {
        let dst = out.sample_mut(b);
        for (co, &bv) in bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(bv);
        }
        let cols: &[T] = if k == 1 {
            x.sample(b)
        } else {
            im2col(x.sample(b), cin, h, w, k, &mut col);
            &col
        };
        T::gemm(cout, ckk, hw, T::one(), weights, ckk as isize, 1, cols, hw as isize, 1, T::one(), dst, hw as isize, 1);
    }
    Ok(out)
}

/// Backward pass of [`conv2d_forward`] given the layer input `x` and the
/// output gradient `dy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    weights: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    check_conv(x, weights.len(), cout, cout, k)?;
    let [n, cin, h, w] = x.dims();
    if dy.dims() != [n, cout, h, w] {
        return Err(Error::ShapeMismatch(format!("conv grad dims {:?} vs output {:?}", dy.dims(), [n, cout, h, w])));
    }
    let hw = h * w;
    let ckk = cin * k * k;
    let mut dw = vec![T::zero(); cout * ckk];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.dims()));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcol = if need_dx && k != 1 { vec![T::zero(); ckk * hw] } else { Vec::new() };
    for b in 0..n {
        let g = dy.sample(b);
        for (co, d) in db.iter_mut().enumerate() {
            *d = *d + g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        let cols: &[T] = if k == 1 {
            x.sample(b)
        } else {
            im2col(x.sample(b), cin, h, w, k, &mut col);
            &col
        };
        // dW += dY (cout x hw) * cols^T (hw x ckk)
        T::gemm(cout, hw, ckk, T::one(), g, hw as isize, 1, cols, 1, hw as isize, T::one(), &mut dw, ckk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (ckk x cout) * dY (cout x hw)
            if k == 1 {
                T::gemm(ckk, cout, hw, T::one(), weights, 1, ckk as isize, g, hw as isize, 1, T::zero(), dx.sample_mut(b), hw as isize, 1);
            } else {
                T::gemm(ckk, cout, hw, T::one(), weights, 1, ckk as isize, g, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                col2im(&dcol, cin, h, w, k, dx.sample_mut(b));
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut out = x.clone();
    // NaN passes through so divergence stays visible
    out.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    out
}

/// Zeroes `grad` wherever the ReLU output `act` is not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Tensor4<T>, act: &Tensor4<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(act.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2. The returned indices (0..4, row-major
/// inside each block) record which input won; ties go to the first.
pub fn maxpool2<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u8>)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("max pooling needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut idx = vec![0u8; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cands = [s[base], s[base + 1], s[base + w], s[base + w + 1]];
                let mut best = 0;
                for j in 1..4 {
                    if cands[j] > cands[best] {
                        best = j;
                    }
                }
                let o = plane * oh * ow + y * ow + xx;
                dst[o] = cands[best];
                idx[o] = best as u8;
            }
        }
    }
    Ok((out, idx))
}

/// Routes each pooled gradient to the input position that won the max.
pub fn maxpool2_backward<T: Real>(dy: &Tensor4<T>, argmax: &[u8], input_dims: [usize; 4]) -> Tensor4<T> {
    let [n, c, h, w] = input_dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor4::zeros(input_dims);
    let g = dy.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = plane * oh * ow + y * ow + xx;
                let a = argmax[o] as usize;
                let i = plane * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                d[i] = d[i] + g[o];
            }
        }
    }
    dx
}

fn check_upconv(x: &Tensor4<impl Real>, w_len: usize, cout: usize) -> Result<()> {
    if w_len != x.channels() * cout * 4 {
        return Err(Error::ShapeMismatch(format!(
            "upconv {}->{cout}: {w_len} weights, want {}",
            x.channels(),
            x.channels() * cout * 4
        )));
    }
    Ok(())
}

/// Transposed convolution with a 2x2 kernel and stride 2. `weights` are
/// laid out `(cin, cout, 2, 2)`; each input pixel spreads into the 2x2
/// output block below and to the right of twice its position.
pub fn upconv2<T: Real>(x: &Tensor4<T>, weights: &[T], bias: &[T], cout: usize) -> Result<Tensor4<T>> {
    check_upconv(x, weights.len(), cout)?;
    if bias.len() != cout {
        return Err(Error::ShapeMismatch(format!("upconv bias {} vs {cout}", bias.len())));
    }
    let [n, cin, h, w] = x.dims();
    let hw = h * w;
    let c4 = cout * 4;
    let mut tmp = vec![T::zero(); c4 * hw];
    let mut out = Tensor4::zeros([n, cout, 2 * h, 2 * w]);
    for b in 0..n {
        // tmp (c4 x hw) = W^T (c4 x cin) * X (cin x hw)
        T::gemm(c4, cin, hw, T::one(), weights, 1, c4 as isize, x.sample(b), hw as isize, 1, T::zero(), &mut tmp, hw as isize, 1);
        let dst = out.sample_mut(b);
        for co in 0..cout {
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = &tmp[(co * 4 + dy * 2 + dx) * hw..][..hw];
                    for y in 0..h {
                        let orow = &mut dst[(co * 2 * h + 2 * y + dy) * 2 * w..][..2 * w];
                        for xx in 0..w {
                            orow[2 * xx + dx] = row[y * w + xx] + bias[co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`upconv2`].
pub fn upconv2_backward<T: Real>(
    x: &Tensor4<T>,
    weights: &[T],
    cout: usize,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    check_upconv(x, weights.len(), cout)?;
    let [n, cin, h, w] = x.dims();
    if dy.dims() != [n, cout, 2 * h, 2 * w] {
        return Err(Error::ShapeMismatch(format!("upconv grad dims {:?}", dy.dims())));
    }
    let hw = h * w;
    let c4 = cout * 4;
    let mut g = vec![T::zero(); c4 * hw];
    let mut dw = vec![T::zero(); cin * c4];
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| Tensor4::zeros(x.dims()));
    for b in 0..n {
        let src = dy.sample(b);
        for co in 0..cout {
            let plane = &src[co * 4 * hw..(co + 1) * 4 * hw];
            db[co] = db[co] + plane.iter().copied().sum::<T>();
            for ddy in 0..2 {
                for ddx in 0..2 {
                    let row = &mut g[(co * 4 + ddy * 2 + ddx) * hw..][..hw];
                    for y in 0..h {
                        let irow = &plane[(2 * y + ddy) * 2 * w..][..2 * w];
                        for xx in 0..w {
                            row[y * w + xx] = irow[2 * xx + ddx];
                        }
                    }
                }
            }
        }
        // dW (cin x c4) += X (cin x hw) * G^T (hw x c4)
        T::gemm(cin, hw, c4, T::one(), x.sample(b), hw as isize, 1, &g, 1, hw as isize, T::one(), &mut dw, c4 as isize, 1);
        if let Some(dx) = dx.as_mut() {
            // dX (cin x hw) = W (cin x c4) * G (c4 x hw)
            T::gemm(cin, c4, hw, T::one(), weights, c4 as isize, 1, &g, hw as isize, 1, T::zero(), dx.sample_mut(b), hw as isize, 1);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Stride-2 convolution with a 2x2 kernel laid out `(cout, cin, 2, 2)`: the
/// adjoint of [`upconv2`] with the same weights read as `(cin, cout, 2, 2)`.
/// Written as direct loops so it can serve as an independent reference.
pub fn conv2x2_stride2<T: Real>(y: &Tensor4<T>, weights: &[T], cout: usize) -> Result<Tensor4<T>> {
    let [n, cin, h, w] = y.dims();
    if h % 2 != 0 || w % 2 != 0 || weights.len() != cout * cin * 4 {
        return Err(Error::ShapeMismatch(format!("stride-2 conv on {:?} with {} weights", y.dims(), weights.len())));
    }
    let mut out = Tensor4::zeros([n, cout, h / 2, w / 2]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut s = T::zero();
                    for ci in 0..cin {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                s = s + weights[((co * cin + ci) * 2 + ky) * 2 + kx] * y.get(b, ci, 2 * oy + ky, 2 * ox + kx);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    Ok(out)
}

/// Stacks channels `[a; b]`.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch(format!("concat {:?} with {:?}", a.dims(), b.dims())));
    }
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor4<T>, ca: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, c, h, w] = t.dims();
    if ca > c {
        return Err(Error::ShapeMismatch(format!("split at {ca} of {c} channels")));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * (c - ca) * hw);
    for s in 0..n {
        let src = t.sample(s);
        a.extend_from_slice(&src[..ca * hw]);
        b.extend_from_slice(&src[ca * hw..]);
    }
    Ok((Tensor4::from_vec([n, ca, h, w], a)?, Tensor4::from_vec([n, c - ca, h, w], b)?))
}

/// Mean per-pixel cross-entropy of a channel softmax against integer labels
/// (`n*h*w` values in batch-major raster order), and its gradient
/// `(p - onehot) / pixel count`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[u8]) -> Result<(f64, Tensor4<T>)> {
    let [n, c, h, w] = logits.dims();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::ShapeMismatch(format!("{} labels for {n}x{h}x{w} logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    let count = (n * hw) as f64;
    let inv = T::from_f64(1.0 / count);
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0f64;
    let mut probs = vec![T::zero(); c];
    for s in 0..n {
        let z = logits.sample(s);
        let g = grad.sample_mut(s);
        for p in 0..hw {
            let mut m = z[p];
            for ch in 1..c {
                m = m.max(z[ch * hw + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                probs[ch] = (z[ch * hw + p] - m).exp();
                sum = sum + probs[ch];
            }
            let label = labels[s * hw + p] as usize;
            loss -= (z[label * hw + p] - m).as_f64() - sum.as_f64().ln();
            for ch in 0..c {
                let pr = probs[ch] / sum;
                let t = if ch == label { T::one() } else { T::zero() };
                g[ch * hw + p] = (pr - t) * inv;
            }
        }
    }
    Ok((loss / count, grad))
}
