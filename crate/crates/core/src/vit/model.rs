use std::collections::HashMap;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use super::{patch_layout, sincos_pos_embed, ParamTable, TokenSequence, VitConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const HEAD_PREFIX: &str = "head.";
pub const LN_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

/// Task head attached for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    /// Mean-pooled tokens followed by a linear map to `classes` logits.
    Classification { classes: usize },
    /// Per-token linear map to `classes` logits on the patch grid.
    Segmentation { classes: usize },
}

impl HeadSpec {
    pub fn classes(&self) -> usize {
        match *self {
            HeadSpec::Classification { classes } | HeadSpec::Segmentation { classes } => classes,
        }
    }
}

enum Init {
    Normal,
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)) for `[in, out]` weights.
    Xavier,
    Zeros,
    Ones,
}

fn block_shapes(prefix: &str, dim: usize, hidden: usize) -> Vec<(String, Vec<usize>, Init)> {
    let p = |s: &str| format!("{prefix}{s}");
    vec![
        (p("norm1.weight"), vec![dim], Init::Ones),
        (p("norm1.bias"), vec![dim], Init::Zeros),
        (p("attn.qkv.weight"), vec![dim, 3 * dim], Init::Xavier),
        (p("attn.proj.weight"), vec![dim, dim], Init::Xavier),
        (p("attn.proj.bias"), vec![dim], Init::Zeros),
        (p("norm2.weight"), vec![dim], Init::Ones),
        (p("norm2.bias"), vec![dim], Init::Zeros),
        (p("mlp.fc1.weight"), vec![dim, hidden], Init::Xavier),
        (p("mlp.fc1.bias"), vec![hidden], Init::Zeros),
        (p("mlp.fc2.weight"), vec![hidden, dim], Init::Xavier),
        (p("mlp.fc2.bias"), vec![dim], Init::Zeros),
    ]
}

impl VitConfig {
    fn encoder_shapes(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.encoder_dim;
        let mut v = vec![
            ("encoder.patch_embed.weight".into(), vec![self.patch_dim(), d], Init::Xavier),
            ("encoder.patch_embed.bias".into(), vec![d], Init::Zeros),
            ("encoder.norm.weight".into(), vec![d], Init::Ones),
            ("encoder.norm.bias".into(), vec![d], Init::Zeros),
        ];
        for i in 0..self.encoder_depth {
            v.extend(block_shapes(&format!("encoder.blocks.{i}."), d, d * self.mlp_ratio));
        }
        v
    }

    fn decoder_shapes(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.decoder_dim;
        let mut v = vec![
            ("decoder.embed.weight".into(), vec![self.encoder_dim, d], Init::Xavier),
            ("decoder.embed.bias".into(), vec![d], Init::Zeros),
            ("decoder.mask_token".into(), vec![1, d], Init::Normal),
            ("decoder.norm.weight".into(), vec![d], Init::Ones),
            ("decoder.norm.bias".into(), vec![d], Init::Zeros),
            ("decoder.pred.weight".into(), vec![d, self.patch_dim()], Init::Xavier),
            ("decoder.pred.bias".into(), vec![self.patch_dim()], Init::Zeros),
        ];
        for i in 0..self.decoder_depth {
            v.extend(block_shapes(&format!("decoder.blocks.{i}."), d, d * self.mlp_ratio));
        }
        v
    }

    fn head_shapes(&self, head: HeadSpec) -> Vec<(String, Vec<usize>, Init)> {
        let k = head.classes();
        vec![
            ("head.weight".into(), vec![self.encoder_dim, k], Init::Normal),
            ("head.bias".into(), vec![k], Init::Zeros),
        ]
    }

    /// Expected shape of every encoder and decoder parameter.
    pub fn pretrain_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.encoder_shapes()
            .into_iter()
            .chain(self.decoder_shapes())
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// Expected shape of every encoder and head parameter.
    pub fn finetune_shapes(&self, head: HeadSpec) -> Vec<(String, Vec<usize>)> {
        self.encoder_shapes()
            .into_iter()
            .chain(self.head_shapes(head))
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// Fresh encoder + decoder parameters. Each tensor draws from its own
    /// named sub-stream of `rng`, so adding or removing tensors never shifts
    /// the values of the others.
    pub fn init_pretrain(&self, rng: &Rng) -> Result<ParamTable<f32>> {
        self.validate()?;
        let mut table = ParamTable::new();
        fill(&mut table, self.encoder_shapes(), rng);
        fill(&mut table, self.decoder_shapes(), rng);
        Ok(table)
    }

    /// Fresh encoder + head parameters (training from scratch).
    pub fn init_finetune(&self, head: HeadSpec, rng: &Rng) -> Result<ParamTable<f32>> {
        self.validate()?;
        let mut table = ParamTable::new();
        fill(&mut table, self.encoder_shapes(), rng);
        self.init_head(head, rng, &mut table)?;
        Ok(table)
    }

    pub fn init_head(&self, head: HeadSpec, rng: &Rng, table: &mut ParamTable<f32>) -> Result<()> {
        if head.classes() < 2 {
            return Err(Error::invalid("a task head needs at least two classes"));
        }
        fill(table, self.head_shapes(head), rng);
        Ok(())
    }
}

fn fill(table: &mut ParamTable<f32>, shapes: Vec<(String, Vec<usize>, Init)>, rng: &Rng) {
    let init = rng.substream("init");
    for (name, shape, how) in shapes {
        let t = match how {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal => {
                let mut r = init.substream(&name);
                Tensor::from_fn(shape, |_| r.trunc_normal(INIT_STD) as f32)
            }
            Init::Xavier => {
                let mut r = init.substream(&name);
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| r.uniform_range(-bound, bound) as f32)
            }
        };
        table.insert(name, t);
    }
}

/// A parameter table bound as leaves of one graph.
pub struct Bound<'a, F: Real> {
    config: Option<&'a VitConfig>,
    vars: HashMap<&'a str, Var>,
    _elem: PhantomData<fn() -> F>,
}

impl<'a, F: Real> Bound<'a, F> {
    pub fn bind(g: &mut Graph<'a, F>, config: &'a VitConfig, table: &'a ParamTable<F>) -> Self {
        let mut b = Self::bind_table(g, table);
        b.config = Some(config);
        b
    }

    /// Binds parameters without a model config; only the layer-level
    /// helpers ([`attention`](Self::attention)) are usable.
    pub fn bind_table(g: &mut Graph<'a, F>, table: &'a ParamTable<F>) -> Self {
        let vars = table.iter().map(|(name, t)| (name, g.param(t))).collect();
        Self {
            config: None,
            vars,
            _elem: PhantomData,
        }
    }

    pub fn config(&self) -> Result<&'a VitConfig> {
        self.config
            .ok_or_else(|| Error::invalid("parameters were bound without a model config"))
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }

    fn linear(&self, g: &mut Graph<'a, F>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<'a, F>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        g.layer_norm(x, w, b, F::lit(LN_EPS))
    }

    /// Multi-head scaled dot-product self-attention under `prefix`
    /// (`...attn`). Pushes the per-head score matrices onto `record`.
    pub fn attention(
        &self,
        g: &mut Graph<'a, F>,
        x: Var,
        prefix: &str,
        heads: usize,
        record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let dim = g.value(x).cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("token dim {dim} not divisible by {heads} heads"),
            ));
        }
        let dh = dim / heads;
        let qkv_w = self.var(&format!("{prefix}.qkv.weight"))?;
        let qkv = g.matmul(x, qkv_w)?;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut scores = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, dim + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * dim + h * dh, dh)?;
            let s = g.matmul_bt(q, k)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            scores.push(a);
            outs.push(g.matmul(a, v)?);
        }
        if let Some(rec) = record {
            rec.extend(scores);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, cat, &format!("{prefix}.proj"))
    }

    /// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    fn block(
        &self,
        g: &mut Graph<'a, F>,
        x: Var,
        prefix: &str,
        heads: usize,
        record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let h = self.norm(g, x, &format!("{prefix}.norm1"))?;
        let a = self.attention(g, h, &format!("{prefix}.attn"), heads, record)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &format!("{prefix}.norm2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        g.add(x, h)
    }

    /// Projects raw patch tokens to the encoder width and adds the fixed
    /// position embedding of each token's original grid cell.
    pub fn embed(&self, g: &mut Graph<'a, F>, patches: &TokenSequence<F>) -> Result<Var> {
        let c = self.config()?;
        if patches.dim() != c.patch_dim() {
            return Err(Error::shape(
                "embed",
                format!("patch dim {} vs model {}", patches.dim(), c.patch_dim()),
            ));
        }
        let n = c.num_patches();
        if let Some(&bad) = patches.positions.iter().find(|&&p| p >= n) {
            return Err(Error::shape("embed", format!("position {bad} outside {n}-token grid")));
        }
        let pos = sincos_pos_embed::<F>(n, c.encoder_dim)?;
        let mut rows = Vec::with_capacity(patches.len() * c.encoder_dim);
        for &p in &patches.positions {
            rows.extend_from_slice(pos.row(p));
        }
        let x = g.constant(patches.tokens.clone());
        let x = self.linear(g, x, "encoder.patch_embed")?;
        let pe = g.constant(Tensor::new(vec![patches.len(), c.encoder_dim], rows)?);
        g.add(x, pe)
    }

    /// Encoder blocks and final norm. `record` receives one entry per layer
    /// holding that layer's per-head score matrices.
    pub fn encode(
        &self,
        g: &mut Graph<'a, F>,
        x: Var,
        mut record: Option<&mut Vec<Vec<Var>>>,
    ) -> Result<Var> {
        if g.value(x).rows() == 0 {
            return Err(Error::invalid("encoder input has no visible tokens"));
        }
        let c = self.config()?;
        let mut x = x;
        for i in 0..c.encoder_depth {
            let mut layer = Vec::new();
            let rec = record.as_ref().map(|_| &mut layer);
            x = self.block(g, x, &format!("encoder.blocks.{i}"), c.encoder_heads, rec)?;
            if let Some(r) = record.as_deref_mut() {
                r.push(layer);
            }
        }
        self.norm(g, x, "encoder.norm")
    }

    /// Decoder: widen `latent` (one row per visible token, ascending grid
    /// order) to the decoder width, insert the shared mask token at every
    /// other grid cell, add positions, run the blocks, predict `p²·3` pixels
    /// per token and re-assemble an `H×W×3` image.
    pub fn decode(&self, g: &mut Graph<'a, F>, latent: Var, visible: &[usize]) -> Result<Var> {
        let c = self.config()?;
        let n = c.num_patches();
        if g.value(latent).rows() != visible.len() {
            return Err(Error::shape(
                "decoder",
                format!("{} latent rows for {} visible indices", g.value(latent).rows(), visible.len()),
            ));
        }
        let x = self.linear(g, latent, "decoder.embed")?;
        let mask_token = self.var("decoder.mask_token")?;
        let x = g.scatter_rows(x, mask_token, visible, n)?;
        let pe = g.constant(sincos_pos_embed::<F>(n, c.decoder_dim)?);
        let mut x = g.add(x, pe)?;
        for i in 0..c.decoder_depth {
            x = self.block(g, x, &format!("decoder.blocks.{i}"), c.decoder_heads, None)?;
        }
        let x = self.norm(g, x, "decoder.norm")?;
        let pred = self.linear(g, x, "decoder.pred")?;
        // Image offset -> token offset is the inverse of the patch layout.
        let layout = patch_layout(c.image_size, c.patch_size)?;
        let mut inverse = vec![0; layout.len()];
        for (t, &i) in layout.iter().enumerate() {
            inverse[i] = t;
        }
        g.gather(pred, &inverse, vec![c.image_size, c.image_size, 3])
    }

    /// Mean-pooled classification logits `[1, K]` from full-grid encoder output.
    pub fn classify(&self, g: &mut Graph<'a, F>, encoded: Var) -> Result<Var> {
        let pooled = g.mean_rows(encoded)?;
        self.linear(g, pooled, "head")
    }

    /// Per-token logits `[N, K]`.
    pub fn segment(&self, g: &mut Graph<'a, F>, encoded: Var) -> Result<Var> {
        self.linear(g, encoded, "head")
    }
}
