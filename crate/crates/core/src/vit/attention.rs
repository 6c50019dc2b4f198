//! Attention-score extraction (query-key products after softmax).

use super::{patchify, Bound, ParamTable, VitConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Graph, Real, Tensor};

/// Per-layer, per-head score matrices (rows: queries, cols: keys).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<F = f32> {
    pub layers: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> AttentionRecord<F> {
    /// Largest `|Σ_row − 1|` over every row of every head.
    pub fn max_row_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|t| (0..t.rows()).map(move |r| t.row(r).iter().map(|v| v.as_f64()).sum::<f64>()))
            .fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }
}

/// Standalone multi-head self-attention over `tokens` using the
/// `{prefix}.qkv.weight` / `{prefix}.proj.*` tensors of `params`.
pub fn mhsa_forward<F: Real>(
    tokens: &Tensor<F>,
    params: &ParamTable<F>,
    prefix: &str,
    heads: usize,
) -> Result<(Tensor<F>, AttentionRecord<F>)> {
    let mut g = Graph::new();
    let b = Bound::bind_table(&mut g, params);
    let x = g.constant(tokens.clone());
    let mut rec = Vec::new();
    let out = b.attention(&mut g, x, prefix, heads, Some(&mut rec))?;
    let record = AttentionRecord {
        layers: vec![rec.iter().map(|&v| g.value(v).clone()).collect()],
    };
    Ok((g.value(out).clone(), record))
}

/// Full-grid encoder pass returning the attention record of every layer.
pub fn encoder_attention<F: Real>(
    image: &ImageTensor,
    config: &VitConfig,
    params: &ParamTable<F>,
) -> Result<AttentionRecord<F>> {
    let patches = patchify::<F>(image, config.patch_size)?;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, config, params);
    let x = b.embed(&mut g, &patches)?;
    let mut rec = Vec::new();
    b.encode(&mut g, x, Some(&mut rec))?;
    Ok(AttentionRecord {
        layers: rec
            .into_iter()
            .map(|layer| layer.into_iter().map(|v| g.value(v).clone()).collect())
            .collect(),
    })
}

/// Last-layer, head-averaged attention row of patch `ref_patch`, laid out on
/// the `grid×grid` patch grid (row-major). Cells sum to one.
pub fn extract_attention_map(
    image: &ImageTensor,
    ref_patch: usize,
    config: &VitConfig,
    params: &ParamTable<f32>,
) -> Result<Vec<f32>> {
    let n = config.num_patches();
    if ref_patch >= n {
        return Err(Error::invalid(format!("reference patch {ref_patch} outside {n}-token grid")));
    }
    let record = encoder_attention::<f64>(image, config, &params.cast())?;
    let last = record
        .layers
        .last()
        .ok_or_else(|| Error::invalid("encoder has no attention layers"))?;
    let mut map = vec![0.0f64; n];
    for head in last {
        for (m, &v) in map.iter_mut().zip(head.row(ref_patch)) {
            *m += v;
        }
    }
    let heads = last.len() as f64;
    Ok(map.into_iter().map(|v| (v / heads) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, Rng};

    fn attn_params(dim: usize, seed: u64, scale: f64) -> ParamTable<f64> {
        let mut rng = Rng::new(seed);
        let mut t = ParamTable::new();
        t.insert(
            "attn.qkv.weight",
            Tensor::from_fn(vec![dim, 3 * dim], |_| rng.normal() * scale),
        );
        t.insert("attn.proj.weight", Tensor::from_fn(vec![dim, dim], |_| rng.normal() * scale));
        t.insert("attn.proj.bias", Tensor::from_fn(vec![dim], |_| rng.normal() * scale));
        t
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = attn_params(8, 1, 0.5);
        let x = Tensor::from_fn(vec![1, 8], |i| i as f64 * 0.1);
        let (out, rec) = mhsa_forward(&x, &p, "attn", 2).unwrap();
        for head in &rec.layers[0] {
            assert_eq!(head.data(), &[1.0]);
        }
        // Value path: (x · W_v) · W_proj + b.
        let qkv = p.get("attn.qkv.weight").unwrap();
        let wv = Tensor::from_fn(vec![8, 8], |i| qkv.data()[(i / 8) * 24 + 16 + i % 8]);
        let v = matmul(&x, &wv).unwrap();
        let mut want = matmul(&v, p.get("attn.proj.weight").unwrap()).unwrap();
        for (w, b) in want.data_mut().iter_mut().zip(p.get("attn.proj.bias").unwrap().data()) {
            *w += b;
        }
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn rows_are_normalized() {
        let p = attn_params(16, 2, 1.0);
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(vec![10, 16], |_| rng.normal());
        let (_, rec) = mhsa_forward(&x, &p, "attn", 4).unwrap();
        assert_eq!(rec.layers[0].len(), 4);
        assert!(rec.max_row_error() < 1e-6);
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let p = attn_params(8, 4, 0.4);
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(vec![6, 8], |_| rng.normal());
        let perm = rng.permutation(6);
        let xp = Tensor::from_fn(vec![6, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let (y, _) = mhsa_forward(&x, &p, "attn", 2).unwrap();
        let (yp, _) = mhsa_forward(&xp, &p, "attn", 2).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.data()[r * 8 + c] - y.data()[src * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let p = attn_params(8, 1, 0.5);
        let x = Tensor::zeros(vec![2, 8]);
        assert!(mhsa_forward(&x, &p, "attn", 3).is_err());
    }

    #[test]
    fn fresh_model_map_is_near_uniform() {
        let c = VitConfig::nano();
        let params = c.init_pretrain(&Rng::new(8)).unwrap();
        let mut rng = Rng::new(1);
        let img = ImageTensor::new(32, 32, (0..3072).map(|_| rng.uniform() as f32).collect()).unwrap();
        let n = c.num_patches();
        for r in [0, 5, 15] {
            let map = extract_attention_map(&img, r, &c, &params).unwrap();
            assert_eq!(map.len(), n);
            let sum: f64 = map.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let max = map.iter().copied().fold(0.0f32, f32::max);
            assert!(max < 2.0 / n as f32, "max {max}");
        }
        assert!(extract_attention_map(&img, n, &c, &params).is_err());
        let rec = encoder_attention::<f32>(&img, &c, &params).unwrap();
        assert_eq!(rec.layers.len(), c.encoder_depth);
        assert!(rec.max_row_error() < 1e-6);
    }
}
