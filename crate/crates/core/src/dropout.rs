//! Dropout regimes: standard (inverted) dropout, curriculum dropout with a
//! saturating schedule, and adaptive "standout" dropout whose keep
//! probabilities come from a sigmoid belief function of each unit's
//! activation.
//!
//! The encoder calls one [`DropoutStrategy`] at every dropout site. Strategies
//! are looked up by name in a [`DropoutRegistry`], so the regime is picked at
//! runtime from `dropout.kind`.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid_scalar, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    Standard,
    Curriculum,
    Adaptive,
}

impl DropoutKind {
    pub fn name(self) -> &'static str {
        match self {
            DropoutKind::Standard => "standard",
            DropoutKind::Curriculum => "curriculum",
            DropoutKind::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for DropoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_CURRICULUM_GAMMA: f64 = 5.0;
pub const DEFAULT_ADAPTIVE_ALPHA: f64 = 1.0;

/// Dropout configuration as it appears under the `dropout.*` config keys.
///
/// Kind-specific fields are optional and must be absent for kinds that do
/// not use them. Missing values fall back to: `gamma = 5`, `alpha = 1`,
/// `beta = logit(1 − p)` (so adaptive keep probabilities start near `1 − p`)
/// and `total_steps` = the length of the training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutPolicy {
    pub kind: DropoutKind,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
}

impl DropoutPolicy {
    pub fn standard(p: f64) -> Self {
        DropoutPolicy {
            kind: DropoutKind::Standard,
            p,
            gamma: None,
            alpha: None,
            beta: None,
            total_steps: None,
        }
    }

    pub fn curriculum(p_target: f64, gamma: f64, total_steps: usize) -> Self {
        DropoutPolicy {
            kind: DropoutKind::Curriculum,
            p: p_target,
            gamma: Some(gamma),
            total_steps: Some(total_steps),
            ..Self::standard(p_target)
        }
    }

    pub fn adaptive(p: f64, alpha: f64, beta: f64) -> Self {
        DropoutPolicy {
            kind: DropoutKind::Adaptive,
            p,
            alpha: Some(alpha),
            beta: Some(beta),
            ..Self::standard(p)
        }
    }

    pub fn none() -> Self {
        Self::standard(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Config(format!("dropout.p must lie in [0, 1), got {}", self.p)));
        }
        let stray = |field: &str, present: bool| -> Result<()> {
            if present {
                Err(Error::Config(format!(
                    "dropout.{field} is not used by dropout.kind = {}",
                    self.kind
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            DropoutKind::Standard => {
                stray("gamma", self.gamma.is_some())?;
                stray("alpha", self.alpha.is_some())?;
                stray("beta", self.beta.is_some())?;
                stray("total_steps", self.total_steps.is_some())?;
            }
            DropoutKind::Curriculum => {
                stray("alpha", self.alpha.is_some())?;
                stray("beta", self.beta.is_some())?;
                if self.gamma_or_default() <= 0.0 {
                    return Err(Error::Config("dropout.gamma must be positive".into()));
                }
                if self.total_steps == Some(0) {
                    return Err(Error::Config("dropout.total_steps must be positive".into()));
                }
            }
            DropoutKind::Adaptive => {
                stray("gamma", self.gamma.is_some())?;
                stray("total_steps", self.total_steps.is_some())?;
                if self.p == 0.0 && self.beta.is_none() {
                    return Err(Error::Config(
                        "adaptive dropout with p = 0 needs an explicit dropout.beta".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn gamma_or_default(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_CURRICULUM_GAMMA)
    }

    pub fn alpha_or_default(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ADAPTIVE_ALPHA)
    }

    pub fn beta_or_default(&self) -> f64 {
        self.beta.unwrap_or_else(|| ((1.0 - self.p) / self.p).ln())
    }

    /// Fills `total_steps` for curriculum policies that left it open.
    pub fn with_run_length(mut self, steps: usize) -> Self {
        if self.kind == DropoutKind::Curriculum && self.total_steps.is_none() {
            self.total_steps = Some(steps.max(1));
        }
        self
    }
}

/// One sampled mask and the keep probabilities it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub mask: Vec<u8>,
    pub keep_prob_per_unit: Vec<f64>,
    pub step: usize,
}

impl MaskRecord {
    pub fn drop_fraction(&self) -> f64 {
        let dropped = self.mask.iter().filter(|&&m| m == 0).count();
        dropped as f64 / self.mask.len() as f64
    }
}

fn sample_mask(keep: &[f64], rng: &mut Rng, step: usize) -> MaskRecord {
    let mask = keep.iter().map(|&k| u8::from(rng.bernoulli(k))).collect();
    MaskRecord {
        mask,
        keep_prob_per_unit: keep.to_vec(),
        step,
    }
}

/// Inverted dropout. Identity in eval mode or when `p == 0`.
pub fn standard_dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
    step: usize,
) -> Result<(Var, Option<MaskRecord>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x, None));
    }
    let keep = 1.0 - p;
    let record = sample_mask(&vec![keep; g.value(x).numel()], rng, step);
    let scale: Vec<f64> = record
        .mask
        .iter()
        .map(|&m| if m == 1 { 1.0 / keep } else { 0.0 })
        .collect();
    let scale = Tensor::new(g.shape(x).to_vec(), scale)?;
    Ok((g.mul_const(x, &scale)?, Some(record)))
}

/// `p(step) = p_target · (1 − exp(−gamma · step / total_steps))`.
pub fn curriculum_rate(step: usize, p_target: f64, gamma: f64, total_steps: usize) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    p_target * (1.0 - (-gamma * frac).exp())
}

/// Standard dropout at the scheduled rate for `step`.
pub fn curriculum_dropout(
    g: &mut Graph,
    x: Var,
    step: usize,
    policy: &DropoutPolicy,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Var, Option<MaskRecord>)> {
    let total = policy
        .total_steps
        .ok_or_else(|| Error::Config("curriculum dropout needs total_steps".into()))?;
    let p = curriculum_rate(step, policy.p, policy.gamma_or_default(), total);
    standard_dropout(g, x, p, mode, rng, step)
}

/// Standout dropout: unit `j` is kept with probability
/// `π_j = sigmoid(alpha · a_j + beta)`.
///
/// Eval mode returns `x ⊙ π`. Train mode returns `x ⊙ m` with
/// `m_j ~ Bernoulli(π_j)` and no `1/π` rescaling. The train-mode gate is
/// built as `m + π − detach(π)`, whose value is exactly `m` while the
/// gradient reaches `alpha`, `beta` and `a` through `π`.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_dropout(
    g: &mut Graph,
    x: Var,
    activations: Var,
    alpha: Var,
    beta: Var,
    mode: Mode,
    rng: &mut Rng,
    step: usize,
) -> Result<(Var, Option<MaskRecord>)> {
    if g.shape(x) != g.shape(activations) {
        return Err(Error::ShapeMismatch {
            op: "adaptive_dropout",
            left: g.shape(x).to_vec(),
            right: g.shape(activations).to_vec(),
        });
    }
    let scaled = g.mul_scalar(activations, alpha)?;
    let shifted = g.add_scalar(scaled, beta)?;
    let pi = g.sigmoid(shifted);
    match mode {
        Mode::Eval => Ok((g.mul(x, pi)?, None)),
        Mode::Train => {
            let record = sample_mask(g.value(pi).data(), rng, step);
            let mask = Tensor::new(
                g.shape(x).to_vec(),
                record.mask.iter().map(|&m| f64::from(m)).collect(),
            )?;
            let frozen = g.detach(pi);
            let zero = g.sub(pi, frozen)?;
            let gate = g.add_const(zero, &mask)?;
            Ok((g.mul(x, gate)?, Some(record)))
        }
    }
}

/// Keep probabilities of [`adaptive_dropout`] computed without a graph.
pub fn standout_keep_probs(activations: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    activations
        .iter()
        .map(|&a| sigmoid_scalar(alpha * a + beta))
        .collect()
}

/// Learnable scalars owned by one dropout site, if the strategy has any.
#[derive(Clone, Copy, Debug, Default)]
pub struct SiteVars {
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
}

/// Per-call state shared by every dropout site in one forward pass.
pub struct DropoutCtx<'a> {
    pub mode: Mode,
    pub step: usize,
    pub rng: &'a mut Rng,
    /// When set, every sampled mask is appended here.
    pub records: Option<&'a mut Vec<MaskRecord>>,
}

impl<'a> DropoutCtx<'a> {
    pub fn new(mode: Mode, step: usize, rng: &'a mut Rng) -> Self {
        DropoutCtx {
            mode,
            step,
            rng,
            records: None,
        }
    }

    fn keep(&mut self, record: Option<MaskRecord>) {
        if let (Some(records), Some(r)) = (self.records.as_deref_mut(), record) {
            records.push(r);
        }
    }
}

pub trait DropoutStrategy: fmt::Debug + Send + Sync {
    fn kind(&self) -> DropoutKind;

    /// Initial values of the learnable scalars each site owns, by suffix.
    fn site_params(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    fn apply(&self, g: &mut Graph, x: Var, site: SiteVars, ctx: &mut DropoutCtx<'_>) -> Result<Var>;
}

#[derive(Debug)]
struct Standard {
    p: f64,
}

impl DropoutStrategy for Standard {
    fn kind(&self) -> DropoutKind {
        DropoutKind::Standard
    }

    fn apply(&self, g: &mut Graph, x: Var, _: SiteVars, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        let (y, rec) = standard_dropout(g, x, self.p, ctx.mode, ctx.rng, ctx.step)?;
        ctx.keep(rec);
        Ok(y)
    }
}

#[derive(Debug)]
struct Curriculum {
    policy: DropoutPolicy,
}

impl DropoutStrategy for Curriculum {
    fn kind(&self) -> DropoutKind {
        DropoutKind::Curriculum
    }

    fn apply(&self, g: &mut Graph, x: Var, _: SiteVars, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        let (y, rec) = curriculum_dropout(g, x, ctx.step, &self.policy, ctx.mode, ctx.rng)?;
        ctx.keep(rec);
        Ok(y)
    }
}

#[derive(Debug)]
struct Adaptive {
    alpha: f64,
    beta: f64,
}

impl DropoutStrategy for Adaptive {
    fn kind(&self) -> DropoutKind {
        DropoutKind::Adaptive
    }

    fn site_params(&self) -> Vec<(&'static str, f64)> {
        vec![("alpha", self.alpha), ("beta", self.beta)]
    }

    fn apply(&self, g: &mut Graph, x: Var, site: SiteVars, ctx: &mut DropoutCtx<'_>) -> Result<Var> {
        let (Some(alpha), Some(beta)) = (site.alpha, site.beta) else {
            return Err(Error::invalid("adaptive dropout site is missing alpha/beta"));
        };
        let (y, rec) = adaptive_dropout(g, x, x, alpha, beta, ctx.mode, ctx.rng, ctx.step)?;
        ctx.keep(rec);
        Ok(y)
    }
}

pub type DropoutFactory = fn(&DropoutPolicy) -> Result<Box<dyn DropoutStrategy>>;

/// Name → constructor table for dropout strategies.
pub struct DropoutRegistry {
    factories: IndexMap<&'static str, DropoutFactory>,
}

impl Default for DropoutRegistry {
    fn default() -> Self {
        let mut reg = DropoutRegistry {
            factories: IndexMap::new(),
        };
        reg.register("standard", |p| Ok(Box::new(Standard { p: p.p })));
        reg.register("curriculum", |p| {
            if p.total_steps.is_none() {
                return Err(Error::Config(
                    "curriculum dropout needs total_steps before it can run".into(),
                ));
            }
            Ok(Box::new(Curriculum { policy: p.clone() }))
        });
        reg.register("adaptive", |p| {
            Ok(Box::new(Adaptive {
                alpha: p.alpha_or_default(),
                beta: p.beta_or_default(),
            }))
        });
        reg
    }
}

impl DropoutRegistry {
    pub fn register(&mut self, name: &'static str, factory: DropoutFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, policy: &DropoutPolicy) -> Result<Box<dyn DropoutStrategy>> {
        policy.validate()?;
        let name = policy.kind.name();
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("no dropout strategy registered as {name:?}")))?;
        factory(policy)
    }
}

/// Builds a strategy from the default registry.
pub fn build_strategy(policy: &DropoutPolicy) -> Result<Box<dyn DropoutStrategy>> {
    DropoutRegistry::default().build(policy)
}
