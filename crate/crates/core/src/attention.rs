//! Multi-head attention and the residual attention/FFN block shared by the
//! deformable and stride attention modules.
//!
//! Queries come from one token set, keys and values from another; scores are
//! scaled by 1/sqrt(d_h) per head. There is no output projection and no bias
//! on the q/k/v projections. Every executed query-key scalar product is
//! recorded in the op counter, one per pair per head.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{counter, ops, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Softmax attention weights captured from one MSA call, head-major:
/// `weights[h * n_q * n_k + q * n_k + k]`.
#[derive(Debug, Clone, Serialize)]
pub struct AttnMap {
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub weights: Vec<f64>,
}

/// Multi-head cross attention over row-token matrices (n x d).
pub fn msa(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    w: &AttnWeights,
    heads: usize,
    mut record: Option<&mut AttnMap>,
) -> Result<Tensor> {
    let (n_q, d) = q_tokens.dims2("msa")?;
    let (n_k, d_kv) = kv_tokens.dims2("msa")?;
    if d != d_kv {
        return Err(Error::shape("msa", format!("channel width {d} vs {d_kv}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::contract(
            "msa",
            format!("channel width {d} not divisible by {heads} heads"),
        ));
    }
    let d_h = d / heads;
    let scaling = 1.0 / (d_h as f64).sqrt();

    let q = ops::matmul(q_tokens, &w.wq)?;
    let k = ops::matmul(kv_tokens, &w.wk)?;
    let v = ops::matmul(kv_tokens, &w.wv)?;

    counter::add_dot_products((heads * n_q * n_k) as u64);
    if let Some(rec) = record.as_deref_mut() {
        rec.heads = heads;
        rec.n_q = n_q;
        rec.n_k = n_k;
        rec.weights.clear();
    }

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ops::slice(&q, 1, h * d_h, d_h)?;
        let kh = ops::slice(&k, 1, h * d_h, d_h)?;
        let vh = ops::slice(&v, 1, h * d_h, d_h)?;
        let scores = ops::scale(&ops::matmul(&qh, &ops::transpose2(&kh)?)?, scaling)?;
        let attn = ops::softmax(&scores)?;
        if let Some(rec) = record.as_deref_mut() {
            rec.weights.extend_from_slice(&attn.data());
        }
        head_outputs.push(ops::matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    ops::concat(&refs, 1)
}

pub fn ffn(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    let hidden = ops::gelu(&ops::linear(x, &w.w1, Some(&w.b1))?)?;
    ops::linear(&hidden, &w.w2, Some(&w.b2))
}

/// One residual attention block: x + MSA(x W_q, kv W_k, kv W_v), then
/// x + FFN(LN(x)).
pub fn attention_block(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    attn: &AttnWeights,
    ffn_w: &FfnWeights,
    heads: usize,
    record: Option<&mut AttnMap>,
) -> Result<Tensor> {
    let x = ops::add(q_tokens, &msa(q_tokens, kv_tokens, attn, heads, record)?)?;
    let y = ffn(&ops::layer_norm(&x, LN_EPS)?, ffn_w)?;
    ops::add(&x, &y)
}

/// Arithmetic mean of same-shaped tensors.
pub fn average(parts: &[Tensor]) -> Result<Tensor> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = ops::add(&acc, p)?;
    }
    ops::scale(&acc, 1.0 / parts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::counter;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_weights(d: usize, rng: &mut ChaCha8Rng) -> AttnWeights {
        AttnWeights {
            wq: rand_tensor(&[d, d], rng),
            wk: rand_tensor(&[d, d], rng),
            wv: rand_tensor(&[d, d], rng),
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = rand_tensor(&[6, 8], &mut rng);
        let kv = rand_tensor(&[5, 8], &mut rng);
        let w = rand_weights(8, &mut rng);
        let mut map = AttnMap { heads: 0, n_q: 0, n_k: 0, weights: Vec::new() };
        msa(&q, &kv, &w, 2, Some(&mut map)).unwrap();
        assert_eq!(map.weights.len(), 2 * 6 * 5);
        for h in 0..2 {
            for r in 0..6 {
                let base = h * 30 + r * 5;
                let s: f64 = map.weights[base..base + 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_product_count_is_queries_times_keys_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let q = rand_tensor(&[7, 8], &mut rng);
        let kv = rand_tensor(&[11, 8], &mut rng);
        let w = rand_weights(8, &mut rng);

        counter::reset();
        msa(&q, &kv, &w, 1, None).unwrap();
        assert_eq!(counter::snapshot().dot_products, 7 * 11);

        counter::reset();
        msa(&q, &kv, &w, 4, None).unwrap();
        assert_eq!(counter::snapshot().dot_products, 4 * 7 * 11);
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = rand_tensor(&[3, 6], &mut rng);
        let w = rand_weights(6, &mut rng);
        assert!(msa(&q, &q, &w, 4, None).is_err());
    }
}
