//! Forward kernels and their adjoints.
//!
//! Spatial tensors are laid out `[H, W, C]`, convolution kernels `[s, s, C, F]`.
//! All "same" operators use stride 1 and an odd window centred on the output
//! cell; cells falling outside the map are ignored (pools) or read as zero
//! (convolution).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_odd_window(op: &str, size: usize) -> Result<usize> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::config(format!(
            "{op}: window size must be odd and positive, got {size}"
        )));
    }
    Ok(size / 2)
}

/// `[M,K] · [K,N] → [M,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (Ok([m, k]), Ok([k2, n])) = (a.dims2("matmul"), b.dims2("matmul")) else {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: [M,K]`, `b: [N,K]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (Ok([m, k]), Ok([n, k2])) = (a.dims2("matmul_nt"), b.dims2("matmul_nt")) else {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` for `a: [K,M]`, `b: [K,N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (Ok([k, m]), Ok([k2, n])) = (a.dims2("matmul_tn"), b.dims2("matmul_tn")) else {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let av = ad[t * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Stride-1 average pooling with output shape equal to input shape. Border
/// windows average only the cells that lie inside the map.
pub fn avg_pool2d_same(x: &Tensor, pool: usize) -> Result<Tensor> {
    let r = check_odd_window("avg_pool2d_same", pool)?;
    let [h, w, c] = x.dims3("avg_pool2d_same")?;
    let xd = x.data();
    let mut out = vec![0.0; h * w * c];
    for oy in 0..h {
        let (y0, y1) = (oy.saturating_sub(r), (oy + r).min(h - 1));
        for ox in 0..w {
            let (x0, x1) = (ox.saturating_sub(r), (ox + r).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let dst = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let src = &xd[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d /= count;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Adjoint of [`avg_pool2d_same`] with respect to its input.
pub fn avg_pool2d_same_backward(grad: &Tensor, pool: usize) -> Result<Tensor> {
    let r = check_odd_window("avg_pool2d_same", pool)?;
    let [h, w, c] = grad.dims3("avg_pool2d_same")?;
    let gd = grad.data();
    let mut out = vec![0.0; h * w * c];
    for oy in 0..h {
        let (y0, y1) = (oy.saturating_sub(r), (oy + r).min(h - 1));
        for ox in 0..w {
            let (x0, x1) = (ox.saturating_sub(r), (ox + r).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let g = &gd[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let dst = &mut out[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv / count;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Stride-1 max pooling over in-map cells. Returns the pooled map together
/// with the flat input index that won each output cell.
pub fn max_pool2d_same_indexed(x: &Tensor, pool: usize) -> Result<(Tensor, Vec<usize>)> {
    let r = check_odd_window("max_pool2d_same", pool)?;
    let [h, w, c] = x.dims3("max_pool2d_same")?;
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; h * w * c];
    let mut arg = vec![0usize; h * w * c];
    for oy in 0..h {
        let (y0, y1) = (oy.saturating_sub(r), (oy + r).min(h - 1));
        for ox in 0..w {
            let (x0, x1) = (ox.saturating_sub(r), (ox + r).min(w - 1));
            let base = (oy * w + ox) * c;
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let src = (iy * w + ix) * c;
                    for ch in 0..c {
                        if xd[src + ch] > out[base + ch] {
                            out[base + ch] = xd[src + ch];
                            arg[base + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![h, w, c], out), arg))
}

pub fn max_pool2d_same(x: &Tensor, pool: usize) -> Result<Tensor> {
    max_pool2d_same_indexed(x, pool).map(|(t, _)| t)
}

/// Scatters `grad` back to the winning input positions.
pub fn scatter_indexed(grad: &Tensor, winners: &[usize], input_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; input_shape.iter().product()];
    for (g, &i) in grad.data().iter().zip(winners) {
        out[i] += g;
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// 2×2 max pooling with stride 2 (output `ceil(H/2) × ceil(W/2)`); used as
/// the downsampling step of the desk-scale backbone.
pub fn max_pool2_indexed(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [h, w, c] = x.dims3("max_pool2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * c;
            for iy in 2 * oy..(2 * oy + 2).min(h) {
                for ix in 2 * ox..(2 * ox + 2).min(w) {
                    let src = (iy * w + ix) * c;
                    for ch in 0..c {
                        if xd[src + ch] > out[base + ch] {
                            out[base + ch] = xd[src + ch];
                            arg[base + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out), arg))
}

/// Zero-padded stride-1 cross-correlation (no kernel flip) preserving `H×W`.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("conv2d_same")?;
    let (s, f) = conv_dims(x, kernel, bias)?;
    let r = s / 2;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(h * w * f);
    for _ in 0..h * w {
        out.extend_from_slice(bias.data());
    }
    for oy in 0..h {
        for ox in 0..w {
            let dst = (oy * w + ox) * f;
            for ky in 0..s {
                let Some(iy) = (oy + ky).checked_sub(r).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..s {
                    let Some(ix) = (ox + kx).checked_sub(r).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = (iy * w + ix) * c;
                    let kbase = (ky * s + kx) * c * f;
                    for ch in 0..c {
                        let xv = xd[src + ch];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ch * f..kbase + (ch + 1) * f];
                        for (o, &kv) in out[dst..dst + f].iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, f], out))
}

/// Gradients of [`conv2d_same`] with respect to input, kernel and bias.
pub fn conv2d_same_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [h, w, c] = x.dims3("conv2d_same")?;
    let [s, _, _, f] = match kernel.shape()[..] {
        [a, b, c2, d] => [a, b, c2, d],
        _ => return Err(Error::shape("conv2d_same", x.shape(), kernel.shape())),
    };
    let r = s / 2;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let mut dx = vec![0.0; h * w * c];
    let mut dk = vec![0.0; s * s * c * f];
    let mut db = vec![0.0; f];
    for oy in 0..h {
        for ox in 0..w {
            let g = &gd[(oy * w + ox) * f..(oy * w + ox + 1) * f];
            for (d, gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..s {
                let Some(iy) = (oy + ky).checked_sub(r).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..s {
                    let Some(ix) = (ox + kx).checked_sub(r).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = (iy * w + ix) * c;
                    let kbase = (ky * s + kx) * c * f;
                    for ch in 0..c {
                        let krow = &kd[kbase + ch * f..kbase + (ch + 1) * f];
                        dx[src + ch] += krow.iter().zip(g).map(|(k, gv)| k * gv).sum::<f64>();
                        let xv = xd[src + ch];
                        for (dkv, gv) in dk[kbase + ch * f..kbase + (ch + 1) * f].iter_mut().zip(g) {
                            *dkv += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![h, w, c], dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![f], db),
    ))
}

fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [_, _, c] = x.dims3("conv2d_same")?;
    let [s, s2, kc, f] = match kernel.shape()[..] {
        [a, b, c2, d] => [a, b, c2, d],
        _ => return Err(Error::shape("conv2d_same", x.shape(), kernel.shape())),
    };
    if s != s2 {
        return Err(Error::config(format!("conv2d_same: non-square kernel {s}x{s2}")));
    }
    check_odd_window("conv2d_same", s)?;
    if kc != c {
        return Err(Error::shape("conv2d_same", x.shape(), kernel.shape()));
    }
    if bias.shape() != [f] {
        return Err(Error::shape("conv2d_same", kernel.shape(), bias.shape()));
    }
    Ok((s, f))
}

/// Softmax along the last axis with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Adjoint of softmax along the last axis given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(grad.data().chunks(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Row means of a matrix: `[M,N] → [M]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.dims2("mean_rows")?;
    let data = x
        .data()
        .chunks(n)
        .map(|row| row.iter().sum::<f64>() / n as f64)
        .collect();
    Ok(Tensor::from_parts(vec![m], data))
}

/// Mean over the spatial axes: `[H,W,C] → [C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("global_avg_pool")?;
    let mut out = vec![0.0; c];
    for px in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let hw = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= hw);
    Ok(Tensor::from_parts(vec![c], out))
}

/// `[H,W,C] → [C, H·W]`: one row per channel, spatial grid flattened row-major.
pub fn to_channel_matrix(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("to_channel_matrix")?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = xd[p * c + ch];
        }
    }
    Ok(Tensor::from_parts(vec![c, hw], out))
}

/// Inverse of [`to_channel_matrix`].
pub fn from_channel_matrix(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [c, hw] = m.dims2("from_channel_matrix")?;
    if hw != h * w {
        return Err(Error::shape("from_channel_matrix", m.shape(), &[h, w, c]));
    }
    let md = m.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[p * c + ch] = md[ch * hw + p];
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Columns `[start, start+len)` of a matrix.
pub fn slice_cols(m: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [rows, cols] = m.dims2("slice_cols")?;
    if len == 0 || start + len > cols {
        return Err(Error::shape("slice_cols", m.shape(), &[start, len]));
    }
    let mut out = Vec::with_capacity(rows * len);
    for row in m.data().chunks(cols) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![rows, len], out))
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
    let [rows, _] = first.dims2("concat_cols")?;
    let mut total = 0;
    for p in parts {
        let [r, c] = p.dims2("concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        total += c;
    }
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], out))
}

/// Deterministic head split: flatten `[H,W,C]` per channel, cut the spatial
/// axis into `n` contiguous blocks, head `h` gets block `h` as `[C, H·W/n]`.
pub fn split_heads(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let [h, w, _] = x.dims3("split_heads")?;
    if n == 0 || (h * w) % n != 0 {
        return Err(Error::config(format!(
            "split_heads: H*W = {} not divisible by n = {n}",
            h * w
        )));
    }
    let m = to_channel_matrix(x)?;
    let len = h * w / n;
    (0..n).map(|i| slice_cols(&m, i * len, len)).collect()
}

/// Exact inverse of [`split_heads`].
pub fn merge_heads(heads: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    let first = heads.first().ok_or(Error::Empty("merge_heads"))?;
    for t in heads {
        if t.shape() != first.shape() {
            return Err(Error::shape("merge_heads", first.shape(), t.shape()));
        }
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    from_channel_matrix(&concat_cols(&refs)?, h, w)
}
