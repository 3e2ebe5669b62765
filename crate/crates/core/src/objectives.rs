//! The preference-loss family and the tabular stationarity oracle.
//!
//! Margins are implicit-reward differences `u = f_w - f_l`; every loss is
//! `-ln sigmoid(beta * u)`. The guided variants add a stop-gradient visual
//! guidance term per side:
//!
//! - plain: `f = log pi(y|v,x) + (gamma-1) * [log pi(y|v,x) - log pi(y|x)]
//!   - log pi_ref(y|v,x)`, with the bracketed term detached;
//! - normalized: the policy's per-step distribution is
//!   `log_softmax(h(v,x) + (gamma-1) * (h_hat(v,x) - h_hat(0,x)))` with both
//!   hatted logit vectors detached.
//!
//! The unconditioned quantities come from the live policy (dynamic) or a
//! frozen SFT copy (static), and the unconditioned distribution is always
//! the zero-image evaluation of the same network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::policy::{
    build_selectors, seq_logprob_nodes, step_logits_seq, validate_query, validate_response,
    ConcatSelectors, FrozenPolicy, ModelConfig, PolicyNodes, PolicyParams, RenderedImage, TokenId,
    TokenSeq,
};
use crate::tensor::Tensor;

/// How the guidance correction enters the policy distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Plain,
    Normalized,
}

/// Where the vision-unconditioned distribution is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncondSource {
    /// Recompute from the live policy every step.
    PolicyDynamic,
    /// Use the frozen SFT checkpoint.
    SftStatic,
}

/// Guidance hyperparameters. `gamma = 1 - alpha/beta` is maintained as an
/// invariant; gamma < 1 strengthens the visual guidance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub variant: Variant,
    pub uncond_source: UncondSource,
}

impl GuidanceConfig {
    pub fn from_gamma(
        beta: f64,
        gamma: f64,
        variant: Variant,
        uncond_source: UncondSource,
    ) -> Result<Self> {
        let cfg = GuidanceConfig {
            beta,
            alpha: beta * (1.0 - gamma),
            gamma,
            variant,
            uncond_source,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_alpha(
        beta: f64,
        alpha: f64,
        variant: Variant,
        uncond_source: UncondSource,
    ) -> Result<Self> {
        let cfg = GuidanceConfig {
            beta,
            alpha,
            gamma: 1.0 - alpha / beta,
            variant,
            uncond_source,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if (self.gamma - (1.0 - self.alpha / self.beta)).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "gamma {} does not satisfy gamma = 1 - alpha/beta (alpha {}, beta {})",
                self.gamma, self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One element of the mixed preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PreferenceRecord {
    /// Same image and query; preferred vs hallucinatory response.
    ResponseContrast {
        image: RenderedImage,
        query: TokenSeq,
        response_w: TokenSeq,
        response_l: TokenSeq,
    },
    /// Same query and response; image consistent vs inconsistent with it.
    ImageContrast {
        image_w: RenderedImage,
        image_l: RenderedImage,
        query: TokenSeq,
        response: TokenSeq,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    ResponseContrast,
    ImageContrast,
}

impl PreferenceRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            PreferenceRecord::ResponseContrast { .. } => RecordKind::ResponseContrast,
            PreferenceRecord::ImageContrast { .. } => RecordKind::ImageContrast,
        }
    }

    pub fn query(&self) -> &[TokenId] {
        match self {
            PreferenceRecord::ResponseContrast { query, .. } => query,
            PreferenceRecord::ImageContrast { query, .. } => query,
        }
    }

    /// The preferred branch as a plain (image, query, response) triple.
    pub fn winning_triple(&self) -> (&RenderedImage, &[TokenId], &[TokenId]) {
        match self {
            PreferenceRecord::ResponseContrast {
                image,
                query,
                response_w,
                ..
            } => (image, query, response_w),
            PreferenceRecord::ImageContrast {
                image_w,
                query,
                response,
                ..
            } => (image_w, query, response),
        }
    }

    /// Winner and loser exchanged.
    pub fn swapped(&self) -> PreferenceRecord {
        match self.clone() {
            PreferenceRecord::ResponseContrast {
                image,
                query,
                response_w,
                response_l,
            } => PreferenceRecord::ResponseContrast {
                image,
                query,
                response_w: response_l,
                response_l: response_w,
            },
            PreferenceRecord::ImageContrast {
                image_w,
                image_l,
                query,
                response,
            } => PreferenceRecord::ImageContrast {
                image_w: image_l,
                image_l: image_w,
                query,
                response,
            },
        }
    }

    /// Token/shape validation against a model config. Degenerate records
    /// (equal sides) are accepted here; the loss yields u = 0, ln 2.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            PreferenceRecord::ResponseContrast {
                image,
                query,
                response_w,
                response_l,
            } => {
                check_image_dim(config, image)?;
                validate_query(config, query)?;
                validate_response(config, response_w)?;
                validate_response(config, response_l)?;
            }
            PreferenceRecord::ImageContrast {
                image_w,
                image_l,
                query,
                response,
            } => {
                check_image_dim(config, image_w)?;
                check_image_dim(config, image_l)?;
                validate_query(config, query)?;
                validate_response(config, response)?;
            }
        }
        Ok(())
    }

    /// Full dataset invariants: winner and loser must differ.
    pub fn validate_strict(&self, config: &ModelConfig) -> Result<()> {
        self.validate(config)?;
        match self {
            PreferenceRecord::ResponseContrast {
                response_w,
                response_l,
                ..
            } if response_w == response_l => Err(Error::Input(
                "response-contrast record with equal responses".into(),
            )),
            PreferenceRecord::ImageContrast {
                image_w, image_l, ..
            } if image_w == image_l => Err(Error::Input(
                "image-contrast record with equal images".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn check_image_dim(config: &ModelConfig, image: &RenderedImage) -> Result<()> {
    if image.dim() != config.d_v {
        return Err(Error::Input(format!(
            "image feature dim {} does not match d_v {}",
            image.dim(),
            config.d_v
        )));
    }
    Ok(())
}

/// Per-term log-probabilities recorded for every loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub policy_w_cond: f64,
    pub policy_l_cond: f64,
    pub ref_w_cond: f64,
    pub ref_l_cond: f64,
    /// Unconditioned terms from the guidance source; absent for plain DPO.
    pub uncond_w: Option<f64>,
    pub uncond_l: Option<f64>,
    /// Detached log guidance per side; absent for DPO and the normalized
    /// variant (whose guidance is a per-step logit correction).
    pub logphi_w: Option<f64>,
    pub logphi_l: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutput {
    /// `-ln sigmoid(beta * margin)`, strictly positive.
    pub loss: f64,
    /// The implicit-reward margin u.
    pub margin: f64,
    pub f_w: f64,
    pub f_l: f64,
    pub diagnostics: LossDiagnostics,
}

/// Gradients aligned with [`PolicyParams::TENSOR_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        ParamGrads(
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, factor)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.scale(factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|t| t.values().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|t| t.all_finite())
    }
}

/// The trainable objective selected for a preference run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefObjective {
    Dpo { beta: f64 },
    Vdpo(GuidanceConfig),
}

impl PrefObjective {
    pub fn beta(&self) -> f64 {
        match self {
            PrefObjective::Dpo { beta } => *beta,
            PrefObjective::Vdpo(cfg) => cfg.beta,
        }
    }
}

// ── Loss graph construction ──────────────────────────────────────────

struct SideInput<'a> {
    image: &'a RenderedImage,
    response: &'a [TokenId],
}

fn record_sides(record: &PreferenceRecord) -> (SideInput<'_>, SideInput<'_>) {
    match record {
        PreferenceRecord::ResponseContrast {
            image,
            response_w,
            response_l,
            ..
        } => (
            SideInput {
                image,
                response: response_w,
            },
            SideInput {
                image,
                response: response_l,
            },
        ),
        PreferenceRecord::ImageContrast {
            image_w,
            image_l,
            response,
            ..
        } => (
            SideInput {
                image: image_w,
                response,
            },
            SideInput {
                image: image_l,
                response,
            },
        ),
    }
}

struct SideNodes {
    f: NodeId,
    policy_cond: NodeId,
    ref_cond: NodeId,
    uncond: Option<NodeId>,
    logphi: Option<NodeId>,
}

struct BuiltLoss {
    graph: Graph,
    loss: NodeId,
    margin: NodeId,
    policy_nodes: PolicyNodes,
    w: SideNodes,
    l: SideNodes,
}

/// Per-step frozen correction rows for the normalized surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSet {
    pub w: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
}

struct LossContext<'a> {
    policy: &'a PolicyParams,
    reference: &'a PolicyParams,
    sft: Option<&'a PolicyParams>,
    record: &'a PreferenceRecord,
    guidance: Option<GuidanceConfig>,
    beta: f64,
    /// Guidance overrides for surrogate evaluation: plain log-phi values or
    /// normalized per-step correction rows, frozen by the caller.
    fixed_plain_phi: Option<(f64, f64)>,
    fixed_corrections: Option<&'a CorrectionSet>,
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Winner,
    Loser,
}

fn build_loss(ctx: &LossContext<'_>) -> Result<BuiltLoss> {
    let config = &ctx.policy.config;
    if !shape_compatible(config, &ctx.reference.config) {
        return Err(Error::Config(
            "policy and reference model configs are incompatible".into(),
        ));
    }
    if let Some(g) = &ctx.guidance {
        g.validate()?;
        if g.uncond_source == UncondSource::SftStatic && ctx.sft.is_none() {
            return Err(Error::Config(
                "uncond-source sft-static requires a frozen SFT model".into(),
            ));
        }
    }
    if let Some(sft) = ctx.sft {
        if !shape_compatible(config, &sft.config) {
            return Err(Error::Config(
                "policy and SFT model configs are incompatible".into(),
            ));
        }
    }
    ctx.record.validate(config)?;

    let mut g = Graph::new();
    let policy_nodes = PolicyNodes::trainable(&mut g, ctx.policy);
    let ref_nodes = PolicyNodes::frozen(&mut g, ctx.reference);
    let sft_nodes = ctx.sft.map(|p| PolicyNodes::frozen(&mut g, p));
    let selectors = build_selectors(&mut g, config);

    let (w_in, l_in) = record_sides(ctx.record);
    let query = ctx.record.query();

    let w = build_side_nodes(
        &mut g,
        ctx,
        config,
        &policy_nodes,
        &ref_nodes,
        sft_nodes.as_ref(),
        &selectors,
        query,
        &w_in,
        Side::Winner,
    )?;
    let l = build_side_nodes(
        &mut g,
        ctx,
        config,
        &policy_nodes,
        &ref_nodes,
        sft_nodes.as_ref(),
        &selectors,
        query,
        &l_in,
        Side::Loser,
    )?;

    let margin = g.sub(w.f, l.f)?;
    let scaled = g.scalar_mul(margin, ctx.beta);
    let sig = g.sigmoid(scaled);
    let logsig = g.log(sig);
    let loss = g.scalar_mul(logsig, -1.0);

    Ok(BuiltLoss {
        graph: g,
        loss,
        margin,
        policy_nodes,
        w,
        l,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_side_nodes(
    g: &mut Graph,
    ctx: &LossContext<'_>,
    config: &ModelConfig,
    policy_nodes: &PolicyNodes,
    ref_nodes: &PolicyNodes,
    sft_nodes: Option<&PolicyNodes>,
    selectors: &ConcatSelectors,
    query: &[TokenId],
    side: &SideInput<'_>,
    which: Side,
) -> Result<SideNodes> {
    let zero_image = RenderedImage::zero(config.d_v);
    let ref_seq = seq_logprob_nodes(
        g,
        ref_nodes,
        config,
        selectors,
        side.image,
        query,
        side.response,
    )?;

    let normalized = matches!(
        ctx.guidance,
        Some(GuidanceConfig {
            variant: Variant::Normalized,
            ..
        })
    ) || ctx.fixed_corrections.is_some();

    if normalized {
        // Policy term: per-step corrected distributions. The hatted logits
        // come from the policy itself (detached) or the frozen SFT copy.
        let gamma = ctx.guidance.map(|c| c.gamma).unwrap_or(1.0);
        let hat_nodes = match ctx.guidance.map(|c| c.uncond_source) {
            Some(UncondSource::SftStatic) => *sft_nodes.expect("checked in build_loss"),
            _ => *policy_nodes,
        };

        let h_policy = step_logits_seq(
            g,
            policy_nodes,
            config,
            selectors,
            side.image,
            query,
            side.response,
        )?;

        let fixed_rows = ctx.fixed_corrections.map(|c| match which {
            Side::Winner => &c.w,
            Side::Loser => &c.l,
        });

        // The hat branches are not built when corrections come frozen from
        // the caller.
        let (hat_cond, hat_zero, uncond_seq) = match fixed_rows {
            Some(_) => (None, None, None),
            None => {
                let cond = step_logits_seq(
                    g,
                    &hat_nodes,
                    config,
                    selectors,
                    side.image,
                    query,
                    side.response,
                )?;
                let zero = step_logits_seq(
                    g,
                    &hat_nodes,
                    config,
                    selectors,
                    &zero_image,
                    query,
                    side.response,
                )?;
                let uncond = seq_logprob_picks(g, &zero, side.response, config.vocab_size)?;
                (Some(cond), Some(zero), Some(uncond))
            }
        };

        let mut picks = Vec::with_capacity(side.response.len());
        for (i, &tok) in side.response.iter().enumerate() {
            let corrected = match fixed_rows {
                Some(rows) => {
                    let row = g.constant(Tensor::row(rows[i].clone()));
                    g.add(h_policy[i], row)?
                }
                None => {
                    let cond = hat_cond.as_ref().expect("built above")[i];
                    let zero = hat_zero.as_ref().expect("built above")[i];
                    let diff = g.sub(cond, zero)?;
                    let detached = g.detach(diff);
                    let correction = g.scalar_mul(detached, gamma - 1.0);
                    g.add(h_policy[i], correction)?
                }
            };
            let lsm = g.log_softmax(corrected)?;
            picks.push(crate::policy::pick_node(g, lsm, tok, config.vocab_size)?);
        }
        let mut policy_term = picks[0];
        for p in &picks[1..] {
            policy_term = g.add(policy_term, *p)?;
        }
        // Plain (uncorrected) conditioned log-prob, for diagnostics only.
        let plain_cond = seq_logprob_picks(g, &h_policy, side.response, config.vocab_size)?;

        let f = g.sub(policy_term, ref_seq.total)?;
        Ok(SideNodes {
            f,
            policy_cond: plain_cond,
            ref_cond: ref_seq.total,
            uncond: uncond_seq,
            logphi: None,
        })
    } else {
        let policy_seq = seq_logprob_nodes(
            g,
            policy_nodes,
            config,
            selectors,
            side.image,
            query,
            side.response,
        )?;

        let guided = match (ctx.guidance, ctx.fixed_plain_phi) {
            (_, Some((phi_w, phi_l))) => {
                let phi = match which {
                    Side::Winner => phi_w,
                    Side::Loser => phi_l,
                };
                let phi_node = g.constant(Tensor::scalar(phi));
                let with_phi = g.add(policy_seq.total, phi_node)?;
                Some((with_phi, None, Some(phi_node)))
            }
            (Some(cfg), None) => {
                let uncond_nodes = match cfg.uncond_source {
                    UncondSource::PolicyDynamic => *policy_nodes,
                    UncondSource::SftStatic => *sft_nodes.expect("checked in build_loss"),
                };
                let uncond_seq = seq_logprob_nodes(
                    g,
                    &uncond_nodes,
                    config,
                    selectors,
                    &zero_image,
                    query,
                    side.response,
                )?;
                let gap = g.sub(policy_seq.total, uncond_seq.total)?;
                let scaled = g.scalar_mul(gap, cfg.gamma - 1.0);
                let logphi = g.detach(scaled);
                let with_phi = g.add(policy_seq.total, logphi)?;
                Some((with_phi, Some(uncond_seq.total), Some(logphi)))
            }
            (None, None) => None,
        };

        let (numerator, uncond, logphi) = match guided {
            Some((n, u, p)) => (n, u, p),
            None => (policy_seq.total, None, None),
        };
        let f = g.sub(numerator, ref_seq.total)?;
        Ok(SideNodes {
            f,
            policy_cond: policy_seq.total,
            ref_cond: ref_seq.total,
            uncond,
            logphi,
        })
    }
}

/// Sum of per-token log-softmax picks over existing logits nodes.
fn seq_logprob_picks(
    g: &mut Graph,
    logits: &[NodeId],
    response: &[TokenId],
    vocab: usize,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (h, &tok) in logits.iter().zip(response) {
        let lsm = g.log_softmax(*h)?;
        let pick = crate::policy::pick_node(g, lsm, tok, vocab)?;
        total = Some(match total {
            Some(t) => g.add(t, pick)?,
            None => pick,
        });
    }
    total.ok_or_else(|| Error::Input("empty response".into()))
}

fn shape_compatible(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.vocab_size == b.vocab_size
        && a.d_v == b.d_v
        && a.d_e == b.d_e
        && a.d_h == b.d_h
        && a.max_query_len == b.max_query_len
        && a.max_response_len == b.max_response_len
}

fn finish_value(built: &mut BuiltLoss) -> Result<LossOutput> {
    let loss = built.graph.forward(built.loss)?.scalar_value()?;
    let g = &built.graph;
    let value = |id: NodeId| -> Result<f64> { g.value(id)?.scalar_value() };
    let opt_value = |id: Option<NodeId>| -> Result<Option<f64>> {
        id.map(|n| g.value(n)?.scalar_value()).transpose()
    };
    Ok(LossOutput {
        loss,
        margin: value(built.margin)?,
        f_w: value(built.w.f)?,
        f_l: value(built.l.f)?,
        diagnostics: LossDiagnostics {
            policy_w_cond: value(built.w.policy_cond)?,
            policy_l_cond: value(built.l.policy_cond)?,
            ref_w_cond: value(built.w.ref_cond)?,
            ref_l_cond: value(built.l.ref_cond)?,
            uncond_w: opt_value(built.w.uncond)?,
            uncond_l: opt_value(built.l.uncond)?,
            logphi_w: opt_value(built.w.logphi)?,
            logphi_l: opt_value(built.l.logphi)?,
        },
    })
}

fn finish_with_grads(built: &mut BuiltLoss) -> Result<(LossOutput, ParamGrads)> {
    let output = finish_value(built)?;
    built.graph.backward(built.loss)?;
    let grads = built
        .policy_nodes
        .as_array()
        .iter()
        .map(|id| built.graph.adjoint(*id))
        .collect::<Result<Vec<Tensor>>>()?;
    let grads = ParamGrads(grads);
    if !grads.all_finite() {
        return Err(Error::Input("non-finite gradient".into()));
    }
    Ok((output, grads))
}

// ── Public loss operations ───────────────────────────────────────────

/// Vanilla DPO implicit-reward margin for either record kind.
pub fn dpo_margin(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
) -> Result<f64> {
    Ok(dpo_loss(policy, reference, record, 1.0)?.margin)
}

/// Vanilla DPO loss `-ln sigmoid(beta * u)`.
pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    beta: f64,
) -> Result<LossOutput> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: None,
        record,
        guidance: None,
        beta,
        fixed_plain_phi: None,
        fixed_corrections: None,
    })?;
    finish_value(&mut built)
}

pub fn dpo_loss_and_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    beta: f64,
) -> Result<(LossOutput, ParamGrads)> {
    pref_loss_and_grad(&PrefObjective::Dpo { beta }, policy, reference, None, record)
}

/// Detached log guidance `(gamma - 1) * [log pi(y|v,x) - log pi(y|x)]` with
/// the unconditioned term from the live policy.
pub fn guidance_logphi(
    policy: &PolicyParams,
    image: &RenderedImage,
    query: &[TokenId],
    response: &[TokenId],
    gamma: f64,
) -> Result<f64> {
    if !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be finite, got {gamma}")));
    }
    let cond = crate::policy::seq_logprob(policy, image, query, response)?;
    let uncond = crate::policy::uncond_seq_logprob(policy, query, response)?;
    Ok((gamma - 1.0) * (cond.total - uncond.total))
}

/// Guided margin (plain variant).
pub fn vdpo_margin(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    config: &GuidanceConfig,
) -> Result<f64> {
    if config.variant != Variant::Plain {
        return Err(Error::Config(
            "vdpo_margin is defined for the plain variant".into(),
        ));
    }
    Ok(vdpo_loss(policy, reference, None, record, config)?.margin)
}

/// Guided loss, plain variant. `sft` is required when the config selects the
/// static unconditioned source.
pub fn vdpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
    config: &GuidanceConfig,
) -> Result<LossOutput> {
    if config.variant != Variant::Plain {
        return Err(Error::Config("vdpo_loss expects the plain variant".into()));
    }
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: sft.map(|f| f.params()),
        record,
        guidance: Some(*config),
        beta: config.beta,
        fixed_plain_phi: None,
        fixed_corrections: None,
    })?;
    finish_value(&mut built)
}

/// Guided loss, normalized variant: the per-step policy distribution is
/// re-normalized after the logit-space guidance correction.
pub fn normalized_vdpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
    config: &GuidanceConfig,
) -> Result<LossOutput> {
    if config.variant != Variant::Normalized {
        return Err(Error::Config(
            "normalized_vdpo_loss expects the normalized variant".into(),
        ));
    }
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: sft.map(|f| f.params()),
        record,
        guidance: Some(*config),
        beta: config.beta,
        fixed_plain_phi: None,
        fixed_corrections: None,
    })?;
    finish_value(&mut built)
}

/// Loss and parameter gradients under the selected objective.
pub fn pref_loss_and_grad(
    objective: &PrefObjective,
    policy: &PolicyParams,
    reference: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
) -> Result<(LossOutput, ParamGrads)> {
    let ctx = match objective {
        PrefObjective::Dpo { beta } => {
            if !(*beta > 0.0) {
                return Err(Error::Config(format!("beta must be positive, got {beta}")));
            }
            LossContext {
                policy,
                reference,
                sft: None,
                record,
                guidance: None,
                beta: *beta,
                fixed_plain_phi: None,
                fixed_corrections: None,
            }
        }
        PrefObjective::Vdpo(cfg) => LossContext {
            policy,
            reference,
            sft: sft.map(|f| f.params()),
            record,
            guidance: Some(*cfg),
            beta: cfg.beta,
            fixed_plain_phi: None,
            fixed_corrections: None,
        },
    };
    let mut built = build_loss(&ctx)?;
    finish_with_grads(&mut built)
}

/// Loss under the selected objective, without gradients.
pub fn pref_loss(
    objective: &PrefObjective,
    policy: &PolicyParams,
    reference: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
) -> Result<LossOutput> {
    match objective {
        PrefObjective::Dpo { beta } => dpo_loss(policy, reference, record, *beta),
        PrefObjective::Vdpo(cfg) => match cfg.variant {
            Variant::Plain => vdpo_loss(policy, reference, sft, record, cfg),
            Variant::Normalized => normalized_vdpo_loss(policy, reference, sft, record, cfg),
        },
    }
}

// ── Surrogates for finite-difference verification ────────────────────

/// The plain guidance terms `(logphi_w, logphi_l)` evaluated at the given
/// parameters, for freezing into a surrogate.
pub fn frozen_plain_phi(
    policy: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
    config: &GuidanceConfig,
) -> Result<(f64, f64)> {
    let uncond_params = match config.uncond_source {
        UncondSource::PolicyDynamic => policy,
        UncondSource::SftStatic => {
            sft.ok_or_else(|| Error::Config("static source requires SFT".into()))?
                .params()
        }
    };
    let (w_in, l_in) = record_sides(record);
    let query = record.query();
    let phi = |side: &SideInput<'_>| -> Result<f64> {
        let cond = crate::policy::seq_logprob(policy, side.image, query, side.response)?;
        let uncond = crate::policy::uncond_seq_logprob(uncond_params, query, side.response)?;
        Ok((config.gamma - 1.0) * (cond.total - uncond.total))
    };
    Ok((phi(&w_in)?, phi(&l_in)?))
}

/// Plain-variant loss with the guidance replaced by fixed numeric constants.
/// Its analytic gradient must coincide with the stop-gradient loss.
pub fn vdpo_loss_with_fixed_phi(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    beta: f64,
    phi: (f64, f64),
) -> Result<LossOutput> {
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: None,
        record,
        guidance: None,
        beta,
        fixed_plain_phi: Some(phi),
        fixed_corrections: None,
    })?;
    finish_value(&mut built)
}

pub fn vdpo_loss_with_fixed_phi_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    beta: f64,
    phi: (f64, f64),
) -> Result<(LossOutput, ParamGrads)> {
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: None,
        record,
        guidance: None,
        beta,
        fixed_plain_phi: Some(phi),
        fixed_corrections: None,
    })?;
    finish_with_grads(&mut built)
}

/// Per-step correction rows `(gamma-1) * (h_hat(v,x) - h_hat(0,x))` for both
/// sides, evaluated at the given parameters.
pub fn frozen_normalized_corrections(
    policy: &PolicyParams,
    sft: Option<&FrozenPolicy>,
    record: &PreferenceRecord,
    config: &GuidanceConfig,
) -> Result<CorrectionSet> {
    let hat_params = match config.uncond_source {
        UncondSource::PolicyDynamic => policy,
        UncondSource::SftStatic => {
            sft.ok_or_else(|| Error::Config("static source requires SFT".into()))?
                .params()
        }
    };
    let (w_in, l_in) = record_sides(record);
    let query = record.query();
    let rows = |side: &SideInput<'_>| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(side.response.len());
        for i in 0..side.response.len() {
            let prefix = &side.response[..i];
            let cond = crate::policy::step_logits(hat_params, side.image, query, prefix, i)?;
            let zero = crate::policy::step_logits(
                hat_params,
                &RenderedImage::zero(hat_params.config.d_v),
                query,
                prefix,
                i,
            )?;
            out.push(
                cond.iter()
                    .zip(&zero)
                    .map(|(c, z)| (config.gamma - 1.0) * (c - z))
                    .collect(),
            );
        }
        Ok(out)
    };
    Ok(CorrectionSet {
        w: rows(&w_in)?,
        l: rows(&l_in)?,
    })
}

/// Normalized-variant loss with frozen correction rows.
pub fn normalized_loss_with_fixed_corrections(
    policy: &PolicyParams,
    reference: &PolicyParams,
    record: &PreferenceRecord,
    beta: f64,
    corrections: &CorrectionSet,
) -> Result<LossOutput> {
    let mut built = build_loss(&LossContext {
        policy,
        reference,
        sft: None,
        record,
        guidance: None,
        beta,
        fixed_plain_phi: None,
        fixed_corrections: Some(corrections),
    })?;
    finish_value(&mut built)
}

// ── Standalone guided-step op ────────────────────────────────────────

/// `log_softmax(h_vx + (gamma-1) * (h_hat_vx - h_hat_0x))` over one logit
/// vector. In graph form the hatted vectors are detached, so gradient flows
/// only through `h_vx`; this value-level form documents the arithmetic.
pub fn normalized_guided_step(
    h_vx: &[f64],
    h_hat_vx: &[f64],
    h_hat_0x: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    if h_vx.len() != h_hat_vx.len() || h_vx.len() != h_hat_0x.len() {
        return Err(Error::Input(format!(
            "logit vector lengths differ: {} / {} / {}",
            h_vx.len(),
            h_hat_vx.len(),
            h_hat_0x.len()
        )));
    }
    if h_vx.is_empty() {
        return Err(Error::Input("empty logit vectors".into()));
    }
    let corrected: Vec<f64> = h_vx
        .iter()
        .zip(h_hat_vx.iter().zip(h_hat_0x))
        .map(|(h, (hat, zero))| h + (gamma - 1.0) * (hat - zero))
        .collect();
    let max = corrected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = corrected.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(corrected.iter().map(|v| v - lse).collect())
}

// ── Proposition-1 monitor ────────────────────────────────────────────

/// Max and mean of `pi(y|x) / pi(y|v,x)` over the winning branches of a
/// dataset: a boundedness monitor, never an assertion of a specific bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Stats {
    pub max: f64,
    pub mean: f64,
}

pub fn proposition1_ratio(
    policy: &PolicyParams,
    records: &[PreferenceRecord],
) -> Result<Prop1Stats> {
    if records.is_empty() {
        return Err(Error::Input(
            "proposition1_ratio needs a non-empty dataset".into(),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for record in records {
        let (image, query, response) = record.winning_triple();
        let cond = crate::policy::seq_logprob(policy, image, query, response)?;
        let uncond = crate::policy::uncond_seq_logprob(policy, query, response)?;
        let ratio = (uncond.total - cond.total).exp();
        max = max.max(ratio);
        sum += ratio;
    }
    Ok(Prop1Stats {
        max,
        mean: sum / records.len() as f64,
    })
}

// ── Tabular objective and stationarity oracle ────────────────────────

/// A finite-outcome world for the vision-enhanced objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularWorld {
    pub reference: Vec<f64>,
    pub uncond: Vec<f64>,
    pub reward: Vec<f64>,
    pub beta: f64,
    pub alpha: f64,
}

fn check_prob_vector(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| *v <= 0.0) {
        return Err(Error::Input(format!(
            "{name} must be strictly positive (zero entries make the log undefined)"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} must sum to 1, got {total}")));
    }
    Ok(())
}

/// `J(p) = sum_y p(y) * [r(y) - beta*ln(p/ref) + alpha*ln(p/uncond)]`.
pub fn objective_j(
    policy: &[f64],
    uncond: &[f64],
    reference: &[f64],
    reward: &[f64],
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    if policy.len() != uncond.len()
        || policy.len() != reference.len()
        || policy.len() != reward.len()
    {
        return Err(Error::Input("tabular vectors must share a length".into()));
    }
    if policy.len() < 2 {
        return Err(Error::Input("tabular world needs at least 2 outcomes".into()));
    }
    if !(beta > 0.0) || alpha < 0.0 {
        return Err(Error::Config(format!(
            "need beta > 0 and alpha >= 0, got beta {beta}, alpha {alpha}"
        )));
    }
    check_prob_vector("policy", policy)?;
    check_prob_vector("uncond", uncond)?;
    check_prob_vector("reference", reference)?;
    let mut j = 0.0;
    for i in 0..policy.len() {
        j += policy[i]
            * (reward[i] - beta * (policy[i] / reference[i]).ln()
                + alpha * (policy[i] / uncond[i]).ln());
    }
    Ok(j)
}

/// Closed-form maximizer for alpha = 0: `p*` proportional to `ref * exp(r/beta)`.
pub fn closed_form_alpha0(reference: &[f64], reward: &[f64], beta: f64) -> Vec<f64> {
    let unnorm: Vec<f64> = reference
        .iter()
        .zip(reward)
        .map(|(r, rw)| r * (rw / beta).exp())
        .collect();
    let z: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|v| v / z).collect()
}

/// Numerically maximize the tabular objective over the simplex.
///
/// Two outcomes: coarse grid plus golden-section refinement on J alone.
/// Three outcomes: simplex grid plus mirror-ascent refinement. Requires
/// `alpha < beta` (gamma > 0), where the objective is strictly concave.
pub fn maximize_objective(world: &TabularWorld) -> Result<Vec<f64>> {
    let k = world.reference.len();
    check_prob_vector("reference", &world.reference)?;
    check_prob_vector("uncond", &world.uncond)?;
    if world.alpha >= world.beta {
        return Err(Error::Config(format!(
            "stationarity oracle requires alpha < beta (gamma > 0), got alpha {}, beta {}",
            world.alpha, world.beta
        )));
    }
    let j = |p: &[f64]| {
        objective_j(
            p,
            &world.uncond,
            &world.reference,
            &world.reward,
            world.beta,
            world.alpha,
        )
    };
    match k {
        2 => {
            let eval = |q: f64| j(&[q, 1.0 - q]);
            let lo = 1e-12;
            let hi = 1.0 - 1e-12;
            let n = 2000usize;
            let mut best_i = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for i in 0..=n {
                let q = lo + (hi - lo) * i as f64 / n as f64;
                let v = eval(q)?;
                if v > best_v {
                    best_v = v;
                    best_i = i;
                }
            }
            let mut a = lo + (hi - lo) * best_i.saturating_sub(1) as f64 / n as f64;
            let mut b = lo + (hi - lo) * (best_i + 1).min(n) as f64 / n as f64;
            let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
            let mut c = b - inv_phi * (b - a);
            let mut d = a + inv_phi * (b - a);
            let mut fc = eval(c)?;
            let mut fd = eval(d)?;
            for _ in 0..200 {
                if fc > fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - inv_phi * (b - a);
                    fc = eval(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + inv_phi * (b - a);
                    fd = eval(d)?;
                }
            }
            let q = 0.5 * (a + b);
            Ok(vec![q, 1.0 - q])
        }
        3 => {
            let n = 60;
            let mut best = vec![1.0 / 3.0; 3];
            let mut best_v = f64::NEG_INFINITY;
            for i in 1..n {
                for jj in 1..(n - i) {
                    let p = [
                        i as f64 / n as f64,
                        jj as f64 / n as f64,
                        (n - i - jj) as f64 / n as f64,
                    ];
                    let v = j(&p)?;
                    if v > best_v {
                        best_v = v;
                        best = p.to_vec();
                    }
                }
            }
            // Mirror ascent: p <- normalize(p * exp(eta * dJ/dp)).
            let mut p = best;
            let eta = 0.25;
            for _ in 0..20_000 {
                let mut logits: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| {
                        let grad = world.reward[i]
                            - world.beta * ((pi / world.reference[i]).ln() + 1.0)
                            + world.alpha * ((pi / world.uncond[i]).ln() + 1.0);
                        pi.ln() + eta * grad
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for l in &mut logits {
                    *l = (*l - max).exp();
                }
                let z: f64 = logits.iter().sum();
                p = logits.into_iter().map(|v| v / z).collect();
            }
            Ok(p)
        }
        other => Err(Error::Config(format!(
            "stationarity oracle supports 2 or 3 outcomes, got {other}"
        ))),
    }
}

/// Max-norm residual of the normalized fixed point: the maximizer must make
/// `(1/W) * p^gamma / uncond^(gamma-1)` coincide with `ref * exp(r/beta) / Z`.
pub fn fixed_point_residual(policy: &[f64], world: &TabularWorld) -> Result<f64> {
    check_prob_vector("policy", policy)?;
    let gamma = 1.0 - world.alpha / world.beta;
    let k = policy.len();
    let mut lhs = Vec::with_capacity(k);
    let mut w = 0.0;
    for i in 0..k {
        // p * (p/uncond)^(gamma-1), composed in log space.
        let term = (policy[i].ln() + (gamma - 1.0) * (policy[i] / world.uncond[i]).ln()).exp();
        lhs.push(term);
        w += term;
    }
    let mut rhs = Vec::with_capacity(k);
    let mut z = 0.0;
    for i in 0..k {
        let term = world.reference[i] * (world.reward[i] / world.beta).exp();
        rhs.push(term);
        z += term;
    }
    let mut residual = 0.0f64;
    for i in 0..k {
        residual = residual.max((lhs[i] / w - rhs[i] / z).abs());
    }
    Ok(residual)
}
