//! Miniature BERT encoder: token + position embeddings, a stack of post-LN
//! self-attention/feed-forward layers, and a pooled sentence embedding.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TokenBatch;
use crate::dropout::{build_strategy, DropoutCtx, DropoutPolicy, DropoutStrategy, SiteVars};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `tanh(W·h_CLS + b)`, as in BERT's pooler.
    #[default]
    ClsTanh,
    /// Mask-weighted mean of the final token states.
    Mean,
}

/// Feature layout fed to the paraphrase classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaFeatures {
    /// `[a; b; |a − b|; a ⊙ b]`
    #[default]
    Full,
    /// `[a; b]`
    Concat,
}

impl ParaFeatures {
    pub fn width(self, d: usize) -> usize {
        match self {
            ParaFeatures::Full => 4 * d,
            ParaFeatures::Concat => 2 * d,
        }
    }
}

fn default_ln_eps() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Runs that build their own vocabulary overwrite this.
    #[serde(default)]
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: DropoutPolicy,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub para_features: ParaFeatures,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale default: d = 32, 4 layers, 4 heads, FFN 128, 64 positions.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 64,
            dropout: DropoutPolicy::standard(0.1),
            pooling: Pooling::ClsTanh,
            para_features: ParaFeatures::Full,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder.hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("encoder.max_seq_len must be at least 2".into()));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("encoder.layer_norm_eps must be positive".into()));
        }
        self.dropout.validate()
    }

    /// Names of the dropout sites, in forward order.
    pub fn dropout_sites(&self) -> Vec<String> {
        let mut sites = vec!["emb".to_string()];
        for l in 0..self.num_layers {
            sites.push(format!("layer{l}.attn"));
            sites.push(format!("layer{l}.ffn"));
        }
        sites
    }
}

/// Draws every encoder, dropout-site and task-head parameter.
///
/// Weight matrices and embeddings ~ N(0, 0.02²); biases 0; layer-norm
/// gammas 1 and betas 0.
pub fn init_params(config: &EncoderConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let mut store = ParamStore::new();
    let normal = |shape: &[usize], rng: &mut Rng| {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.normal(0.0, INIT_STD)).collect(),
        )
        .expect("shape")
    };

    store.insert("emb.token", normal(&[config.vocab_size, d], rng));
    store.insert("emb.position", normal(&[config.max_seq_len, d], rng));
    store.insert("emb.ln.gamma", Tensor::ones(&[d]));
    store.insert("emb.ln.beta", Tensor::zeros(&[d]));
    for l in 0..config.num_layers {
        for proj in ["q", "k", "v", "o"] {
            store.insert(format!("layer{l}.attn.{proj}.weight"), normal(&[d, d], rng));
            store.insert(format!("layer{l}.attn.{proj}.bias"), Tensor::zeros(&[d]));
        }
        store.insert(format!("layer{l}.attn.ln.gamma"), Tensor::ones(&[d]));
        store.insert(format!("layer{l}.attn.ln.beta"), Tensor::zeros(&[d]));
        store.insert(format!("layer{l}.ffn.in.weight"), normal(&[d, f], rng));
        store.insert(format!("layer{l}.ffn.in.bias"), Tensor::zeros(&[f]));
        store.insert(format!("layer{l}.ffn.out.weight"), normal(&[f, d], rng));
        store.insert(format!("layer{l}.ffn.out.bias"), Tensor::zeros(&[d]));
        store.insert(format!("layer{l}.ffn.ln.gamma"), Tensor::ones(&[d]));
        store.insert(format!("layer{l}.ffn.ln.beta"), Tensor::zeros(&[d]));
    }
    store.insert("pooler.weight", normal(&[d, d], rng));
    store.insert("pooler.bias", Tensor::zeros(&[d]));

    let strategy = build_strategy(&config.dropout.clone().with_run_length(1))?;
    for site in config.dropout_sites() {
        for (suffix, init) in strategy.site_params() {
            store.insert(format!("dropout.{site}.{suffix}"), Tensor::scalar(init));
        }
    }

    crate::objectives::init_head_params(&mut store, config, rng);
    Ok(store)
}

/// Output of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `LN(x + dropout(W_O · attention(x)))`, `[B, T, d]`.
    pub output: Var,
    /// Attention probabilities, `[B·H, T, T]`.
    pub weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeOutput {
    pub sequence: Var,
    pub pooled: Var,
}

/// Forward-pass driver for a validated [`EncoderConfig`].
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    dropout: Box<dyn DropoutStrategy>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let dropout = build_strategy(&config.dropout)?;
        Ok(Encoder { config, dropout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn site(&self, p: &Bound, name: &str) -> SiteVars {
        SiteVars {
            alpha: p.try_var(&format!("dropout.{name}.alpha")),
            beta: p.try_var(&format!("dropout.{name}.beta")),
        }
    }

    fn drop(&self, g: &mut Graph, p: &Bound, x: Var, site: &str, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        self.dropout.apply(g, x, self.site(p, site), ctx)
    }

    fn linear(g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = p.var(&format!("{prefix}.weight"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    fn norm(&self, g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gamma = p.var(&format!("{prefix}.gamma"))?;
        let beta = p.var(&format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    /// Token + position embeddings, layer-normed, then dropout.
    pub fn embed(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        let (b, t) = (batch.batch_size, batch.seq_len);
        if t > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let tok = g.embedding(p.var("emb.token")?, &batch.ids, &[b, t])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.embedding(p.var("emb.position")?, &positions, &[b, t])?;
        let sum = g.add(tok, pos)?;
        let normed = self.norm(g, p, sum, "emb.ln")?;
        self.drop(g, p, normed, "emb", ctx)
    }

    /// Scaled dot-product self-attention over `H` heads, output projection,
    /// dropout, residual add and layer norm. Masked keys get a −∞ score.
    pub fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: usize,
        hidden: Var,
        mask: &[f64],
        ctx: &mut DropoutCtx<'_>,
    ) -> Result<AttentionOutput> {
        let s = g.shape(hidden).to_vec();
        if s.len() != 3 || s[2] != self.config.hidden_dim || mask.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: s,
                right: vec![mask.len()],
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let heads = self.config.num_heads;
        let dh = d / heads;
        let pre = format!("layer{layer}.attn");

        let q = Self::linear(g, p, hidden, &format!("{pre}.q"))?;
        let k = Self::linear(g, p, hidden, &format!("{pre}.k"))?;
        let v = Self::linear(g, p, hidden, &format!("{pre}.v"))?;
        let qh = g.split_heads(q, heads)?;
        let kh = g.split_heads(k, heads)?;
        let vh = g.split_heads(v, heads)?;
        let kt = g.transpose_last(kh)?;
        let raw = g.bmm(qh, kt)?;
        let scores = g.scale(raw, 1.0 / (dh as f64).sqrt());

        let mut bias = Vec::with_capacity(b * heads * t * t);
        for bi in 0..b {
            let row_mask = &mask[bi * t..(bi + 1) * t];
            for _ in 0..heads * t {
                bias.extend(row_mask.iter().map(|&m| if m > 0.0 { 0.0 } else { f64::NEG_INFINITY }));
            }
        }
        let masked = g.add_const(scores, &Tensor::new(vec![b * heads, t, t], bias)?)?;
        let weights = g.softmax(masked);
        let ctx_heads = g.bmm(weights, vh)?;
        let merged = g.merge_heads(ctx_heads, heads)?;
        let projected = Self::linear(g, p, merged, &format!("{pre}.o"))?;
        let dropped = self.drop(g, p, projected, &pre, ctx)?;
        let residual = g.add(hidden, dropped)?;
        let output = self.norm(g, p, residual, &format!("{pre}.ln"))?;
        Ok(AttentionOutput { output, weights })
    }

    /// Position-wise GELU feed-forward, dropout, residual add and layer norm.
    pub fn feed_forward(&self, g: &mut Graph, p: &Bound, layer: usize, hidden: Var, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        let pre = format!("layer{layer}.ffn");
        let inner = Self::linear(g, p, hidden, &format!("{pre}.in"))?;
        let act = g.gelu(inner);
        let out = Self::linear(g, p, act, &format!("{pre}.out"))?;
        let dropped = self.drop(g, p, out, &pre, ctx)?;
        let residual = g.add(hidden, dropped)?;
        self.norm(g, p, residual, &format!("{pre}.ln"))
    }

    pub fn pool(&self, g: &mut Graph, p: &Bound, sequence: Var, mask: &[f64]) -> Result<Var> {
        match self.config.pooling {
            Pooling::ClsTanh => {
                let cls = g.select_token(sequence, 0)?;
                let h = Self::linear(g, p, cls, "pooler")?;
                Ok(g.tanh(h))
            }
            Pooling::Mean => g.masked_mean(sequence, mask),
        }
    }

    /// Full forward pass. `ctx.step` drives curriculum schedules.
    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch, ctx: &mut DropoutCtx<'_>) -> Result<EncodeOutput> {
        let mut h = self.embed(g, p, batch, ctx)?;
        for layer in 0..self.config.num_layers {
            h = self.attention(g, p, layer, h, &batch.mask, ctx)?.output;
            h = self.feed_forward(g, p, layer, h, ctx)?;
        }
        let pooled = self.pool(g, p, h, &batch.mask)?;
        Ok(EncodeOutput { sequence: h, pooled })
    }

    /// Eval-mode pooled embeddings as plain rows, outside any training graph.
    pub fn embed_sentences(&self, params: &ParamStore, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let mut rng = Rng::new(0);
        let mut ctx = DropoutCtx::new(crate::dropout::Mode::Eval, 0, &mut rng);
        let out = self.encode(&mut g, &bound, batch, &mut ctx)?;
        Ok(g.value(out.pooled).rows().map(<[f64]>::to_vec).collect())
    }
}
