//! Task heads, supervised losses and the contrastive (SimCSE) objectives.

mod similarity;

pub use similarity::{SimilarityHead, SimilarityHeadKind, SimilarityRegistry};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NUM_SENTIMENT_CLASSES: usize = 5;
pub const DEFAULT_TAU: f64 = 0.05;

/// Parameter-name prefix shared by all task heads.
pub const HEAD_PREFIX: &str = "head.";

pub fn init_head_params(store: &mut ParamStore, config: &EncoderConfig, rng: &mut Rng) {
    let d = config.hidden_dim;
    let mut normal = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, INIT_STD)).collect())
            .expect("shape")
    };
    store.insert("head.sst.weight", normal(&[d, NUM_SENTIMENT_CLASSES]));
    store.insert("head.sst.bias", Tensor::zeros(&[NUM_SENTIMENT_CLASSES]));
    store.insert("head.para.weight", normal(&[config.para_features.width(d), 1]));
    store.insert("head.para.bias", Tensor::zeros(&[1]));
    store.insert("head.sts.linear.weight", normal(&[2 * d, 1]));
    store.insert("head.sts.linear.bias", Tensor::zeros(&[1]));
    store.insert("head.sts.cross_attn", normal(&[d, d]));
}

/// The three downstream tasks, one head each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sst,
    Paraphrase,
    Sts,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sst, Task::Paraphrase, Task::Sts];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sst => "sst",
            Task::Paraphrase => "paraphrase",
            Task::Sts => "sts",
        }
    }

    /// Parameter-name prefix of this task's head.
    pub fn head_prefix(self) -> &'static str {
        match self {
            Task::Sst => "head.sst.",
            Task::Paraphrase => "head.para.",
            Task::Sts => "head.sts.",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected sst, paraphrase or sts)")))
    }
}

fn affine(g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// `[B, d]` → `[B, 5]` sentiment logits (no softmax).
pub fn sst_logits(g: &mut Graph, pooled: Var, p: &Bound) -> Result<Var> {
    affine(g, p, pooled, "head.sst")
}

/// Paraphrase features for a pair of pooled embeddings.
pub fn paraphrase_features(
    g: &mut Graph,
    a: Var,
    b: Var,
    layout: crate::encoder::ParaFeatures,
) -> Result<Var> {
    match layout {
        crate::encoder::ParaFeatures::Concat => g.concat_last(&[a, b]),
        crate::encoder::ParaFeatures::Full => {
            let diff = g.sub(a, b)?;
            let absdiff = g.abs(diff);
            let prod = g.mul(a, b)?;
            g.concat_last(&[a, b, absdiff, prod])
        }
    }
}

/// One logit per pair, `[B]`.
pub fn paraphrase_logit(
    g: &mut Graph,
    a: Var,
    b: Var,
    p: &Bound,
    layout: crate::encoder::ParaFeatures,
) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "paraphrase_logit",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    let feats = paraphrase_features(g, a, b, layout)?;
    let logit = affine(g, p, feats, "head.para")?;
    let rows = g.shape(a)[0];
    g.reshape(logit, vec![rows])
}

/// STS score for each pair under the chosen head.
pub fn sts_score(g: &mut Graph, a: Var, b: Var, kind: SimilarityHeadKind, p: &Bound) -> Result<Var> {
    SimilarityRegistry::default().build(kind)?.score(g, a, b, p)
}

/// Mean binary cross-entropy on logits, in the stable log-sum-exp form.
pub fn bce_loss(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    g.bce_with_logits(logits, targets)
}

pub fn mse_loss(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    if g.value(pred).numel() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            left: g.shape(pred).to_vec(),
            right: vec![target.len()],
        });
    }
    let t = g.constant(Tensor::new(g.shape(pred).to_vec(), target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Row-wise cosine similarity of two `[B, d]` tensors, `[B]`.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "cosine_rows",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    let na = g.l2_normalize(a)?;
    let nb = g.l2_normalize(b)?;
    let prod = g.mul(na, nb)?;
    Ok(g.sum_last(prod))
}

/// `a · b / (‖a‖ ‖b‖)` on plain slices.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `[N, N]` cosine similarities `cos(h_i, k_j)`.
fn cosine_matrix(g: &mut Graph, h: Var, k: Var) -> Result<Var> {
    let nh = g.l2_normalize(h)?;
    let nk = g.l2_normalize(k)?;
    let nkt = g.transpose_last(nk)?;
    g.matmul(nh, nkt)
}

fn check_pair(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// In-batch contrastive loss: mean over `i` of
/// `−log( e^{cos(h_i, h⁺_i)/τ} / Σ_j e^{cos(h_i, h⁺_j)/τ} )`.
pub fn unsup_simcse_loss(g: &mut Graph, h: Var, h_plus: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_pair(g, "unsup_simcse_loss", h, h_plus)?;
    let n = g.shape(h)[0];
    if n < 2 {
        return Err(Error::invalid(
            "unsupervised contrastive loss needs at least 2 examples for in-batch negatives",
        ));
    }
    let sim = cosine_matrix(g, h, h_plus)?;
    let logits = g.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets)
}

/// Contrastive loss with hard negatives: the denominator for anchor `i`
/// sums `e^{cos(h_i, h⁺_j)/τ} + e^{cos(h_i, h⁻_j)/τ}` over every `j` in the batch.
pub fn sup_simcse_loss(g: &mut Graph, h: Var, h_plus: Var, h_minus: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_pair(g, "sup_simcse_loss", h, h_plus)?;
    check_pair(g, "sup_simcse_loss", h, h_minus)?;
    let n = g.shape(h)[0];
    let pos = cosine_matrix(g, h, h_plus)?;
    let neg = cosine_matrix(g, h, h_minus)?;
    let both = g.concat_last(&[pos, neg])?;
    let logits = g.scale(both, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests;
