use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::cosine_rows;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

/// Upper end of the STS score range.
pub const MAX_SCORE: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityHeadKind {
    SumLinear,
    CosScale,
    #[default]
    CosSigmoid,
    CosSigmoidScaled,
    CrossAttention,
}

impl SimilarityHeadKind {
    pub const ALL: [SimilarityHeadKind; 5] = [
        SimilarityHeadKind::SumLinear,
        SimilarityHeadKind::CosScale,
        SimilarityHeadKind::CosSigmoid,
        SimilarityHeadKind::CosSigmoidScaled,
        SimilarityHeadKind::CrossAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityHeadKind::SumLinear => "sum_linear",
            SimilarityHeadKind::CosScale => "cos_scale",
            SimilarityHeadKind::CosSigmoid => "cos_sigmoid",
            SimilarityHeadKind::CosSigmoidScaled => "cos_sigmoid_scaled",
            SimilarityHeadKind::CrossAttention => "cross_attention",
        }
    }

    /// Whether the head has weights of its own.
    pub fn learnable(self) -> bool {
        matches!(self, SimilarityHeadKind::SumLinear | SimilarityHeadKind::CrossAttention)
    }
}

impl fmt::Display for SimilarityHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityHeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sts head {s:?}")))
    }
}

/// Maps a pair of pooled embeddings `[B, d]` to one score per pair, `[B]`.
pub trait SimilarityHead: fmt::Debug + Send + Sync {
    fn kind(&self) -> SimilarityHeadKind;
    fn score(&self, g: &mut Graph, a: Var, b: Var, p: &Bound) -> Result<Var>;
}

#[derive(Debug)]
struct SumLinear;

impl SimilarityHead for SumLinear {
    fn kind(&self) -> SimilarityHeadKind {
        SimilarityHeadKind::SumLinear
    }

    fn score(&self, g: &mut Graph, a: Var, b: Var, p: &Bound) -> Result<Var> {
        let rows = g.shape(a)[0];
        let joined = g.concat_last(&[a, b])?;
        let w = p.var("head.sts.linear.weight")?;
        let bias = p.var("head.sts.linear.bias")?;
        let h = g.matmul(joined, w)?;
        let out = g.add_bias(h, bias)?;
        g.reshape(out, vec![rows])
    }
}

#[derive(Debug)]
struct CosScale;

impl SimilarityHead for CosScale {
    fn kind(&self) -> SimilarityHeadKind {
        SimilarityHeadKind::CosScale
    }

    fn score(&self, g: &mut Graph, a: Var, b: Var, _: &Bound) -> Result<Var> {
        let cos = cosine_rows(g, a, b)?;
        let half = MAX_SCORE / 2.0;
        let scaled = g.scale(cos, half);
        let shift = Tensor::full(g.shape(scaled), half);
        g.add_const(scaled, &shift)
    }
}

#[derive(Debug)]
struct CosSigmoid {
    sharpness: f64,
}

impl SimilarityHead for CosSigmoid {
    fn kind(&self) -> SimilarityHeadKind {
        if self.sharpness == 1.0 {
            SimilarityHeadKind::CosSigmoid
        } else {
            SimilarityHeadKind::CosSigmoidScaled
        }
    }

    fn score(&self, g: &mut Graph, a: Var, b: Var, _: &Bound) -> Result<Var> {
        let cos = cosine_rows(g, a, b)?;
        let z = g.scale(cos, self.sharpness);
        let s = g.sigmoid(z);
        Ok(g.scale(s, MAX_SCORE))
    }
}

/// `5·σ(aᵀ W b / √d)`: `a` attends over `b` through a bilinear form.
#[derive(Debug)]
struct CrossAttention;

impl SimilarityHead for CrossAttention {
    fn kind(&self) -> SimilarityHeadKind {
        SimilarityHeadKind::CrossAttention
    }

    fn score(&self, g: &mut Graph, a: Var, b: Var, p: &Bound) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                left: g.shape(a).to_vec(),
                right: g.shape(b).to_vec(),
            });
        }
        let d = g.shape(a)[1] as f64;
        let w = p.var("head.sts.cross_attn")?;
        let aw = g.matmul(a, w)?;
        let prod = g.mul(aw, b)?;
        let raw = g.sum_last(prod);
        let z = g.scale(raw, 1.0 / d.sqrt());
        let s = g.sigmoid(z);
        Ok(g.scale(s, MAX_SCORE))
    }
}

pub type SimilarityFactory = fn() -> Box<dyn SimilarityHead>;

/// Name → constructor table for STS heads.
pub struct SimilarityRegistry {
    factories: IndexMap<&'static str, SimilarityFactory>,
}

impl Default for SimilarityRegistry {
    fn default() -> Self {
        let mut reg = SimilarityRegistry {
            factories: IndexMap::new(),
        };
        reg.register("sum_linear", || Box::new(SumLinear));
        reg.register("cos_scale", || Box::new(CosScale));
        reg.register("cos_sigmoid", || Box::new(CosSigmoid { sharpness: 1.0 }));
        reg.register("cos_sigmoid_scaled", || Box::new(CosSigmoid { sharpness: 5.0 }));
        reg.register("cross_attention", || Box::new(CrossAttention));
        reg
    }
}

impl SimilarityRegistry {
    pub fn register(&mut self, name: &'static str, factory: SimilarityFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build_named(&self, name: &str) -> Result<Box<dyn SimilarityHead>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::Config(format!("no sts head registered as {name:?}")))
    }

    pub fn build(&self, kind: SimilarityHeadKind) -> Result<Box<dyn SimilarityHead>> {
        self.build_named(kind.name())
    }
}
