//! The primitive op set. Every op registers a reverse-mode gradient.
//!
//! Shapes must conform exactly; the only broadcast is the bias term of
//! `linear`. All reductions run left to right.

use crate::error::{Error, Result};
use crate::tensor::{counter, Tensor};

fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Matrix product of `a` (m x k) and `b` (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
    counter::add_macs((m * k * n) as u64);
    Tensor::from_op("matmul", vec![m, n], out, &[a, b], move |g, parents| {
        let a = &parents[0];
        let b = &parents[1];
        let ad = a.data();
        let bd = b.data();
        // dA = g . B^T
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for kk in 0..k {
                let brow = &bd[kk * n..(kk + 1) * n];
                let mut acc = 0.0;
                for (gv, bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                da[i * k + kk] = acc;
            }
        }
        // dB = A^T . g
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = ad[i * k + kk];
                let drow = &mut db[kk * n..(kk + 1) * n];
                for (dv, gv) in drow.iter_mut().zip(grow) {
                    *dv += aik * gv;
                }
            }
        }
        drop(ad);
        drop(bd);
        a.accumulate_grad(&da);
        b.accumulate_grad(&db);
    })
}

/// Transpose of a 2-D tensor.
pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose2")?;
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    drop(ad);
    Tensor::from_op("transpose2", vec![n, m], out, &[a], move |g, parents| {
        let mut da = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                da[i * n + j] = g[j * m + i];
            }
        }
        parents[0].accumulate_grad(&da);
    })
}

/// Elementwise sum; shapes must match exactly.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape("add", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Tensor::from_op("add", a.shape().to_vec(), out, &[a, b], |g, parents| {
        parents[0].accumulate_grad(g);
        parents[1].accumulate_grad(g);
    })
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape("mul", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Tensor::from_op("mul", a.shape().to_vec(), out, &[a, b], |g, parents| {
        let a = &parents[0];
        let b = &parents[1];
        let da: Vec<f64> = g.iter().zip(b.data().iter()).map(|(gv, bv)| gv * bv).collect();
        let db: Vec<f64> = g.iter().zip(a.data().iter()).map(|(gv, av)| gv * av).collect();
        a.accumulate_grad(&da);
        b.accumulate_grad(&db);
    })
}

/// Multiply every element by a finite constant.
pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::contract("scale", format!("non-finite factor {c}")));
    }
    let out: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op("scale", a.shape().to_vec(), out, &[a], move |g, parents| {
        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
        parents[0].accumulate_grad(&da);
    })
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat", "no inputs"));
    }
    let ndim = parts[0].ndim();
    if axis >= ndim {
        return Err(Error::contract("concat", format!("axis {axis} out of range")));
    }
    let mut shape = parts[0].shape().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        if p.ndim() != ndim {
            return Err(Error::shape("concat", "rank mismatch"));
        }
        for (d, (&sa, &sb)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if d != axis && sa != sb {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along dim {d}", parts[0].shape(), p.shape()),
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    shape[axis] = axis_total;

    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let out_row = axis_total * inner;
    let mut out = vec![0.0; outer * out_row];
    let mut offset = 0usize;
    let mut blocks = Vec::with_capacity(parts.len());
    for p in parts {
        let block = p.shape()[axis] * inner;
        let pd = p.data();
        for o in 0..outer {
            out[o * out_row + offset..o * out_row + offset + block]
                .copy_from_slice(&pd[o * block..(o + 1) * block]);
        }
        blocks.push(block);
        offset += block;
    }

    let parent_refs: Vec<&Tensor> = parts.to_vec();
    Tensor::from_op("concat", shape, out, &parent_refs, move |g, parents| {
        let mut offset = 0usize;
        for (p, &block) in parents.iter().zip(&blocks) {
            let mut dp = vec![0.0; outer * block];
            for o in 0..outer {
                dp[o * block..(o + 1) * block]
                    .copy_from_slice(&g[o * out_row + offset..o * out_row + offset + block]);
            }
            p.accumulate_grad(&dp);
            offset += block;
        }
    })
}

/// Contiguous range along one axis.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(Error::contract("slice", format!("axis {axis} out of range")));
    }
    let extent = a.shape()[axis];
    if start + len > extent || len == 0 {
        return Err(Error::contract(
            "slice",
            format!("range {start}..{} exceeds extent {extent}", start + len),
        ));
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let in_row = extent * inner;
    let block = len * inner;
    let ad = a.data();
    let mut out = vec![0.0; outer * block];
    for o in 0..outer {
        out[o * block..(o + 1) * block]
            .copy_from_slice(&ad[o * in_row + start * inner..o * in_row + start * inner + block]);
    }
    drop(ad);
    Tensor::from_op("slice", shape, out, &[a], move |g, parents| {
        let mut da = vec![0.0; outer * in_row];
        for o in 0..outer {
            da[o * in_row + start * inner..o * in_row + start * inner + block]
                .copy_from_slice(&g[o * block..(o + 1) * block]);
        }
        parents[0].accumulate_grad(&da);
    })
}

/// Same data, new shape; element count must be preserved.
pub fn reshape(a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let want: usize = new_shape.iter().product();
    if want != a.len() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?} changes element count", a.shape(), new_shape),
        ));
    }
    Tensor::from_op("reshape", new_shape.to_vec(), a.to_vec(), &[a], |g, parents| {
        parents[0].accumulate_grad(g);
    })
}

/// Affine projection of row vectors: y = x W^T + b with x (n x d_in),
/// w (d_out x d_in), b (d_out). The bias broadcast over rows is the only
/// broadcasting in the op set.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in) = x.dims2("linear")?;
    let (d_out, d_in2) = w.dims2("linear")?;
    if d_in != d_in2 {
        return Err(Error::shape("linear", format!("input dim {d_in} vs weight {d_in2}")));
    }
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs output dim {d_out}", b.shape()),
            ));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let xrow = &xd[i * d_in..(i + 1) * d_in];
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for o in 0..d_out {
            let wrow = &wd[o * d_in..(o + 1) * d_in];
            let mut acc = 0.0;
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            orow[o] = acc;
        }
    }
    if let Some(b) = b {
        let bd = b.data();
        for i in 0..n {
            for o in 0..d_out {
                out[i * d_out + o] += bd[o];
            }
        }
    }
    drop(xd);
    drop(wd);
    counter::add_macs((n * d_in * d_out) as u64);

    let backward = move |g: &[f64], parents: &[Tensor]| {
        let x = &parents[0];
        let w = &parents[1];
        let xd = x.data();
        let wd = w.data();
        let mut dx = vec![0.0; n * d_in];
        let mut dw = vec![0.0; d_out * d_in];
        for i in 0..n {
            let grow = &g[i * d_out..(i + 1) * d_out];
            let xrow = &xd[i * d_in..(i + 1) * d_in];
            let dxrow = &mut dx[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let gv = grow[o];
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wd[o * d_in..(o + 1) * d_in];
                let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
                for j in 0..d_in {
                    dxrow[j] += gv * wrow[j];
                    dwrow[j] += gv * xrow[j];
                }
            }
        }
        drop(xd);
        drop(wd);
        x.accumulate_grad(&dx);
        w.accumulate_grad(&dw);
        if parents.len() == 3 {
            let mut db = vec![0.0; d_out];
            for i in 0..n {
                for o in 0..d_out {
                    db[o] += g[i * d_out + o];
                }
            }
            parents[2].accumulate_grad(&db);
        }
    };
    match b {
        Some(b) => Tensor::from_op("linear", vec![n, d_out], out, &[x, w, b], backward),
        None => Tensor::from_op("linear", vec![n, d_out], out, &[x, w], backward),
    }
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
    let saved = out.clone();
    Tensor::from_op("tanh", a.shape().to_vec(), out, &[a], move |g, parents| {
        let da: Vec<f64> = g.iter().zip(&saved).map(|(gv, y)| gv * (1.0 - y * y)).collect();
        parents[0].accumulate_grad(&da);
    })
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

/// Gaussian error linear unit, x * Phi(x).
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    let xd = a.to_vec();
    let out: Vec<f64> = xd.iter().map(|&x| gelu_value(x)).collect();
    Tensor::from_op("gelu", a.shape().to_vec(), out, &[a], move |g, parents| {
        let da: Vec<f64> = g.iter().zip(&xd).map(|(gv, &x)| gv * gelu_derivative(x)).collect();
        parents[0].accumulate_grad(&da);
    })
}

/// Normalize each slice along the last axis to mean 0 and unit variance
/// (biased variance, stabilized by `eps`). No learned affine terms.
pub fn layer_norm(a: &Tensor, eps: f64) -> Result<Tensor> {
    if a.ndim() == 0 {
        return Err(Error::contract("layer_norm", "needs at least one axis"));
    }
    let n = *a.shape().last().unwrap();
    let rows = a.len() / n;
    let ad = a.data();
    let mut out = vec![0.0; a.len()];
    let mut inv_sd = vec![0.0; rows];
    for r in 0..rows {
        let xrow = &ad[r * n..(r + 1) * n];
        let mean = xrow.iter().sum::<f64>() / n as f64;
        let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_sd[r] = inv;
        for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(xrow) {
            *o = (x - mean) * inv;
        }
    }
    drop(ad);
    let saved = out.clone();
    Tensor::from_op("layer_norm", a.shape().to_vec(), out, &[a], move |g, parents| {
        let mut da = vec![0.0; saved.len()];
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            let yrow = &saved[r * n..(r + 1) * n];
            let g_mean = grow.iter().sum::<f64>() / n as f64;
            let gy_mean = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum::<f64>() / n as f64;
            for ((d, gv), y) in da[r * n..(r + 1) * n].iter_mut().zip(grow).zip(yrow) {
                *d = inv_sd[r] * (gv - g_mean - y * gy_mean);
            }
        }
        parents[0].accumulate_grad(&da);
    })
}

/// Numerically stable softmax along the last axis (max subtraction).
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    if a.ndim() == 0 {
        return Err(Error::contract("softmax", "needs at least one axis"));
    }
    let n = *a.shape().last().unwrap();
    let rows = a.len() / n;
    let ad = a.data();
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        let xrow = &ad[r * n..(r + 1) * n];
        let max = xrow.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let orow = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for (o, x) in orow.iter_mut().zip(xrow) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    drop(ad);
    let saved = out.clone();
    Tensor::from_op("softmax", a.shape().to_vec(), out, &[a], move |g, parents| {
        let mut da = vec![0.0; saved.len()];
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            let yrow = &saved[r * n..(r + 1) * n];
            let dot = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum::<f64>();
            for ((d, gv), y) in da[r * n..(r + 1) * n].iter_mut().zip(grow).zip(yrow) {
                *d = y * (gv - dot);
            }
        }
        parents[0].accumulate_grad(&da);
    })
}

/// Mean along one axis; the axis is removed from the shape.
pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(Error::contract("mean_axis", format!("axis {axis} out of range")));
    }
    let extent = a.shape()[axis];
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    let ad = a.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let base = o * extent * inner + e * inner;
            for i in 0..inner {
                out[o * inner + i] += ad[base + i];
            }
        }
    }
    let scale = 1.0 / extent as f64;
    for v in out.iter_mut() {
        *v *= scale;
    }
    drop(ad);
    Tensor::from_op("mean_axis", shape, out, &[a], move |g, parents| {
        let mut da = vec![0.0; outer * extent * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = o * extent * inner + e * inner;
                for i in 0..inner {
                    da[base + i] = g[o * inner + i] * scale;
                }
            }
        }
        parents[0].accumulate_grad(&da);
    })
}

/// Sum of every element, as a scalar.
pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let s: f64 = a.data().iter().sum();
    let len = a.len();
    Tensor::from_op("sum_all", vec![], vec![s], &[a], move |g, parents| {
        parents[0].accumulate_grad(&vec![g[0]; len]);
    })
}

/// Mean of every element, as a scalar.
pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let len = a.len();
    scale(&sum_all(a)?, 1.0 / len as f64)
}

/// Mean cross-entropy of row logits against integer targets, computed via a
/// stable log-sum-exp.
pub fn cross_entropy_with_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (rows, classes) = logits.dims2("cross_entropy_with_logits")?;
    if targets.len() != rows {
        return Err(Error::contract(
            "cross_entropy_with_logits",
            format!("{rows} rows vs {} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::contract(
            "cross_entropy_with_logits",
            format!("target {t} out of {classes} classes"),
        ));
    }
    let ld = logits.data();
    let mut probs = vec![0.0; rows * classes];
    let mut loss = 0.0;
    for r in 0..rows {
        let zrow = &ld[r * classes..(r + 1) * classes];
        let max = zrow.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let prow = &mut probs[r * classes..(r + 1) * classes];
        let mut sum = 0.0;
        for (p, z) in prow.iter_mut().zip(zrow) {
            *p = (z - max).exp();
            sum += *p;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        loss += max + sum.ln() - zrow[targets[r]];
    }
    loss /= rows as f64;
    drop(ld);
    let targets = targets.to_vec();
    Tensor::from_op("cross_entropy_with_logits", vec![], vec![loss], &[logits], move |g, parents| {
        let scale = g[0] / rows as f64;
        let mut dz = vec![0.0; rows * classes];
        for r in 0..rows {
            for c in 0..classes {
                let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                dz[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
            }
        }
        parents[0].accumulate_grad(&dz);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, gradcheck_params, DEFAULT_STEP};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[5, 9], &mut rng);
        let y = softmax(&x).unwrap();
        for r in 0..5 {
            let s: f64 = y.data()[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let x = random_tensor(&[3, 7], &mut rng);
            let c = rng.random_range(-50.0..50.0);
            let shifted =
                Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + c).collect()).unwrap();
            let a = softmax(&x).unwrap();
            let b = softmax(&shifted).unwrap();
            for (av, bv) in a.data().iter().zip(b.data().iter()) {
                assert!((av - bv).abs() <= 1e-12, "trial {trial}: {av} vs {bv}");
            }
        }
    }

    #[test]
    fn gelu_derivative_at_zero_is_half() {
        assert_eq!(gelu_derivative(0.0), 0.5);
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        let y = sum_all(&gelu(&x).unwrap()).unwrap();
        y.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x = Tensor::from_vec(&[4, 16], data).unwrap();
        let y = layer_norm(&x, 1e-5).unwrap();
        for r in 0..4 {
            let row = &y.data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
        }
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_tensor(&[2, 3, 4], &mut rng);
        let b = random_tensor(&[2, 2, 4], &mut rng);
        let joined = concat(&[&a, &b], 1).unwrap();
        let a2 = slice(&joined, 1, 0, 3).unwrap();
        let b2 = slice(&joined, 1, 3, 2).unwrap();
        assert_eq!(a.to_vec(), a2.to_vec());
        assert_eq!(b.to_vec(), b2.to_vec());
    }

    #[test]
    fn matmul_against_by_hand() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let loss = cross_entropy_with_logits(&logits, &[2]).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>, Vec<usize>)> = vec![
            ("tanh", Box::new(|x| sum_all(&tanh(x)?)), vec![3, 4]),
            ("gelu", Box::new(|x| sum_all(&gelu(x)?)), vec![3, 4]),
            ("layer_norm", Box::new(|x| {
                let w = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
                sum_all(&mul(&layer_norm(x, 1e-5)?, &w)?)
            }), vec![3, 6]),
            ("mean_axis", Box::new(|x| sum_all(&mul(&mean_axis(x, 1)?, &mean_axis(x, 1)?)?)), vec![3, 4, 2]),
            ("slice", Box::new(|x| sum_all(&mul(&slice(x, 1, 1, 2)?, &slice(x, 1, 1, 2)?)?)), vec![2, 4, 3]),
            ("reshape", Box::new(|x| sum_all(&mul(&reshape(x, &[6, 2])?, &reshape(x, &[6, 2])?)?)), vec![3, 4]),
            ("transpose2", Box::new(|x| sum_all(&mul(&transpose2(x)?, &transpose2(x)?)?)), vec![3, 4]),
            ("scale", Box::new(|x| sum_all(&scale(x, -1.7)?)), vec![5]),
            ("softmax_weighted", Box::new(|x| {
                let w = Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
                sum_all(&mul(&softmax(x)?, &w)?)
            }), vec![2, 5]),
        ];
        for (name, f, shape) in &cases {
            let x = random_tensor(shape, &mut rng);
            let err = gradcheck(f, &x, DEFAULT_STEP).unwrap();
            assert!(err < 1e-6, "{name}: gradcheck error {err}");
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::param(&[4, 5], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let b = Tensor::param(&[5, 3], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = gradcheck_params(&|| sum_all(&matmul(&a, &b)?), &[&a, &b], DEFAULT_STEP).unwrap();
        assert!(err < 1e-6, "matmul gradcheck error {err}");

        let c = Tensor::param(&[4, 5], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = gradcheck_params(&|| sum_all(&mul(&a, &c)?), &[&a, &c], DEFAULT_STEP).unwrap();
        assert!(err < 1e-6, "mul gradcheck error {err}");

        let w = Tensor::param(&[3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bias = Tensor::param(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let err = gradcheck_params(
            &|| sum_all(&tanh(&linear(&a, &w, Some(&bias))?)?),
            &[&a, &w, &bias],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "linear gradcheck error {err}");

        let parts = [
            Tensor::param(&[2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
            Tensor::param(&[2, 2], (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        ];
        let err = gradcheck_params(
            &|| {
                let j = concat(&[&parts[0], &parts[1]], 1)?;
                sum_all(&mul(&j, &j)?)
            },
            &[&parts[0], &parts[1]],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "concat gradcheck error {err}");

        let logits = Tensor::param(&[3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = gradcheck_params(
            &|| cross_entropy_with_logits(&logits, &[1, 3, 0]),
            &[&logits],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "cross_entropy gradcheck error {err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
        assert!(matmul(&b, &a).is_err());
        assert!(slice(&a, 1, 2, 2).is_err());
        assert!(concat(&[&a, &b], 1).is_err());
    }
}
