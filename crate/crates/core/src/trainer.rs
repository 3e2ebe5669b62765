//! Deterministic training: SFT pretraining and preference optimization.
//!
//! The optimizer is adaptive-moment descent with bias correction
//! (momentum decay 0.9, variance decay 0.999, epsilon 1e-8). Everything is
//! a pure function of (config, data, seed): epoch permutations are derived
//! statelessly from (seed, epoch), per-record gradients are reduced in a
//! fixed order, and interrupt/resume reproduces the uninterrupted loss
//! trace bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{params_from_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objectives::{
    pref_loss_and_grad, GuidanceConfig, ParamGrads, PrefObjective, PreferenceRecord, UncondSource,
    Variant,
};
use crate::policy::{
    build_selectors, freeze, seq_logprob_nodes, FrozenPolicy, ModelConfig, PolicyNodes,
    PolicyParams, RenderedImage, TokenSeq,
};
use crate::tensor::Tensor;

// ── Optimizer ────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adaptive-moment state: first/second moment per parameter tensor plus the
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &PolicyParams) -> Adam {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update with bias correction. `lr` comes from the run config so a
    /// checkpoint does not pin the schedule.
    pub fn apply(&mut self, params: &mut PolicyParams, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let gv = grad.values();
            let mv = m.values_mut();
            let vv = v.values_mut();
            let pv = tensor.values_mut();
            for i in 0..gv.len() {
                mv[i] = ADAM_BETA1 * mv[i] + (1.0 - ADAM_BETA1) * gv[i];
                vv[i] = ADAM_BETA2 * vv[i] + (1.0 - ADAM_BETA2) * gv[i] * gv[i];
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                pv[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

// ── Configs and logs ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Dpo,
    Vdpo,
}

/// Preference-training configuration. Desk-scale defaults: lr 5e-3,
/// batch 32, 4 epochs, beta 0.1, gamma 0.75.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub beta: f64,
    pub gamma: f64,
    pub variant: Variant,
    pub uncond_source: UncondSource,
    /// Optional max-norm gradient clip; no clipping by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 32,
            epochs: 4,
            seed: 0,
            objective: ObjectiveKind::Vdpo,
            beta: 0.1,
            gamma: 0.75,
            variant: Variant::Plain,
            uncond_source: UncondSource::PolicyDynamic,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.gamma > 1.0 {
            return Err(Error::Config(format!(
                "gamma must be at most 1, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn pref_objective(&self) -> Result<PrefObjective> {
        self.validate()?;
        Ok(match self.objective {
            ObjectiveKind::Dpo => PrefObjective::Dpo { beta: self.beta },
            ObjectiveKind::Vdpo => PrefObjective::Vdpo(GuidanceConfig::from_gamma(
                self.beta,
                self.gamma,
                self.variant,
                self.uncond_source,
            )?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub margin: f64,
    pub grad_norm: f64,
    pub prop1_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,margin,gradnorm,prop1max\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, e.loss, e.margin, e.grad_norm, e.prop1_max
            ));
        }
        out
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            steps: self.entries.len() as u64,
            first_loss: self.entries.first().map(|e| e.loss),
            last_loss: self.entries.last().map(|e| e.loss),
            max_prop1: self
                .entries
                .iter()
                .map(|e| e.prop1_max)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub max_prop1: f64,
}

// ── SFT ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: 5e-3,
            batch_size: 32,
            epochs: 4,
            seed: 0,
            clip_norm: None,
        }
    }
}

pub type SftTriple = (RenderedImage, TokenSeq, TokenSeq);

/// Negative sequence log-likelihood and its parameter gradient for one
/// accurate triple.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    triple: &SftTriple,
) -> Result<(f64, ParamGrads)> {
    let (image, query, response) = triple;
    let mut g = Graph::new();
    let nodes = PolicyNodes::trainable(&mut g, params);
    let selectors = build_selectors(&mut g, &params.config);
    let seq = seq_logprob_nodes(
        &mut g,
        &nodes,
        &params.config,
        &selectors,
        image,
        query,
        response,
    )?;
    let loss = g.scalar_mul(seq.total, -1.0);
    let value = g.forward(loss)?.scalar_value()?;
    g.backward(loss)?;
    let grads = ParamGrads(
        nodes
            .as_array()
            .iter()
            .map(|id| g.adjoint(*id))
            .collect::<Result<Vec<Tensor>>>()?,
    );
    if !value.is_finite() || !grads.all_finite() {
        return Err(Error::Input("non-finite SFT loss or gradient".into()));
    }
    Ok((value, grads))
}

pub struct SftResult {
    pub params: PolicyParams,
    pub frozen: FrozenPolicy,
    pub log: TrainLog,
}

/// Minimize mean negative log-likelihood over accurate triples. Log entries
/// carry margin 0 and prop1 1 (neither is defined for SFT).
pub fn sft_fit(
    config: &SftConfig,
    model: &ModelConfig,
    triples: &[SftTriple],
) -> Result<SftResult> {
    if triples.is_empty() {
        return Err(Error::Input("sft_fit needs non-empty data".into()));
    }
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::Config("invalid SFT config".into()));
    }
    let mut params = crate::policy::init_params(model)?;
    let mut adam = Adam::new(&params);
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = permutation(config.seed, epoch as u64, triples.len());
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, ParamGrads)>> = batch
                .par_iter()
                .map(|&i| sft_loss_and_grad(&params, &triples[i]))
                .collect();
            let mut mean_loss = 0.0;
            let mut grads = ParamGrads::zeros_like(&params);
            for r in results {
                let (loss, g) = r?;
                mean_loss += loss;
                grads.add_scaled(&g, 1.0)?;
            }
            let scale = 1.0 / batch.len() as f64;
            mean_loss *= scale;
            grads.scale(scale);
            clip(&mut grads, config.clip_norm);
            let grad_norm = grads.l2_norm();
            adam.apply(&mut params, &grads, config.learning_rate);
            step += 1;
            log.entries.push(TrainLogEntry {
                step,
                loss: mean_loss,
                margin: 0.0,
                grad_norm,
                prop1_max: 1.0,
            });
        }
    }
    let frozen = freeze(&params);
    Ok(SftResult {
        params,
        frozen,
        log,
    })
}

// ── Preference training ──────────────────────────────────────────────

/// Everything a run needs to continue: live params, the frozen reference
/// and SFT copies, and optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: FrozenPolicy,
    pub sft: FrozenPolicy,
    pub adam: Adam,
}

impl TrainState {
    /// Start a run: the initial policy is frozen as both the reference
    /// model and the static SFT copy.
    pub fn init(init: &PolicyParams) -> TrainState {
        TrainState {
            params: init.clone(),
            reference: freeze(init),
            sft: freeze(init),
            adam: Adam::new(init),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

pub fn steps_per_epoch(n_records: usize, batch_size: usize) -> u64 {
    (n_records as u64 + batch_size as u64 - 1) / batch_size as u64
}

fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::world::mix_seed(&[seed, 0xE90C4, epoch]));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn clip(grads: &mut ParamGrads, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.l2_norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

/// Advance the run until `target_steps` optimizer steps have been taken in
/// total, appending one log entry per step. Steps already taken (resume)
/// are skipped by replaying the stateless epoch/batch schedule.
pub fn pref_run(
    config: &TrainConfig,
    records: &[PreferenceRecord],
    state: &mut TrainState,
    target_steps: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let objective = config.pref_objective()?;
    if records.is_empty() {
        return Err(Error::Input("pref_run needs non-empty records".into()));
    }
    for r in records {
        r.validate(&state.params.config)?;
    }
    let spe = steps_per_epoch(records.len(), config.batch_size);
    let total = spe * config.epochs as u64;
    let target = target_steps.min(total);
    while state.step() < target {
        let step = state.step();
        let epoch = step / spe;
        let batch_index = (step % spe) as usize;
        let order = permutation(config.seed, epoch, records.len());
        let batch: Vec<usize> = order
            .chunks(config.batch_size)
            .nth(batch_index)
            .expect("batch index in range")
            .to_vec();

        let results: Vec<Result<(f64, f64, f64, ParamGrads)>> = batch
            .par_iter()
            .map(|&i| {
                let record = &records[i];
                let (out, grads) = pref_loss_and_grad(
                    &objective,
                    &state.params,
                    state.reference.params(),
                    Some(&state.sft),
                    record,
                )?;
                // Proposition-1 monitor on the winning branch.
                let (image, query, response) = record.winning_triple();
                let cond = crate::policy::seq_logprob(&state.params, image, query, response)?;
                let uncond = crate::policy::uncond_seq_logprob(&state.params, query, response)?;
                let ratio = (uncond.total - cond.total).exp();
                Ok((out.loss, out.margin, ratio, grads))
            })
            .collect();

        let mut mean_loss = 0.0;
        let mut mean_margin = 0.0;
        let mut prop1_max = f64::NEG_INFINITY;
        let mut grads = ParamGrads::zeros_like(&state.params);
        for r in results {
            let (loss, margin, ratio, g) = r?;
            mean_loss += loss;
            mean_margin += margin;
            prop1_max = prop1_max.max(ratio);
            grads.add_scaled(&g, 1.0)?;
        }
        let scale = 1.0 / batch.len() as f64;
        mean_loss *= scale;
        mean_margin *= scale;
        grads.scale(scale);
        if !grads.all_finite() || !mean_loss.is_finite() {
            return Err(Error::Input(format!(
                "non-finite batch gradient at step {}",
                step + 1
            )));
        }
        clip(&mut grads, config.clip_norm);
        let grad_norm = grads.l2_norm();
        state
            .adam
            .apply(&mut state.params, &grads, config.learning_rate);
        log.entries.push(TrainLogEntry {
            step: state.step(),
            loss: mean_loss,
            margin: mean_margin,
            grad_norm,
            prop1_max,
        });
    }
    Ok(())
}

pub struct PrefResult {
    pub params: PolicyParams,
    pub log: TrainLog,
    pub reference_digest: String,
}

/// Full preference run from an initial policy: freeze it as the reference,
/// run every epoch, and verify the reference never moved.
pub fn pref_fit(
    config: &TrainConfig,
    records: &[PreferenceRecord],
    init: &PolicyParams,
) -> Result<PrefResult> {
    let mut state = TrainState::init(init);
    let ref_digest_before = state.reference.digest().to_string();
    let spe = steps_per_epoch(records.len(), config.batch_size);
    let mut log = TrainLog::default();
    pref_run(
        config,
        records,
        &mut state,
        spe * config.epochs as u64,
        &mut log,
    )?;
    let ref_digest_after = state.reference.params().digest();
    if ref_digest_after != ref_digest_before {
        return Err(Error::Config("reference model moved during training".into()));
    }
    if config.uncond_source == UncondSource::SftStatic
        && state.sft.params().digest() != state.sft.digest()
    {
        return Err(Error::Config("static SFT copy moved during training".into()));
    }
    Ok(PrefResult {
        params: state.params,
        log,
        reference_digest: ref_digest_after,
    })
}

// ── Checkpoint integration ───────────────────────────────────────────

const POLICY_PREFIX: &str = "policy";
const REF_PREFIX: &str = "ref";
const SFT_PREFIX: &str = "sft";

fn push_params(ckpt: &mut Checkpoint, prefix: &str, params: &PolicyParams) {
    for (name, t) in PolicyParams::TENSOR_NAMES.iter().zip(params.tensors()) {
        ckpt.tensors.push((format!("{prefix}.{name}"), t.clone()));
    }
}

/// Serialize the full training state (policy, reference, SFT, optimizer
/// moments, step counter) into one checkpoint file.
pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint {
        config: state.params.config.clone(),
        tensors: Vec::new(),
        metas: vec![("opt.step".into(), state.adam.step)],
    };
    push_params(&mut ckpt, POLICY_PREFIX, &state.params);
    push_params(&mut ckpt, REF_PREFIX, state.reference.params());
    push_params(&mut ckpt, SFT_PREFIX, state.sft.params());
    for (name, t) in PolicyParams::TENSOR_NAMES.iter().zip(&state.adam.m) {
        ckpt.tensors.push((format!("opt.m.{name}"), t.clone()));
    }
    for (name, t) in PolicyParams::TENSOR_NAMES.iter().zip(&state.adam.v) {
        ckpt.tensors.push((format!("opt.v.{name}"), t.clone()));
    }
    ckpt.save(path)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path)?;
    let params = params_from_checkpoint(&ckpt, POLICY_PREFIX)?;
    let reference = freeze(&params_from_checkpoint(&ckpt, REF_PREFIX)?);
    let sft = freeze(&params_from_checkpoint(&ckpt, SFT_PREFIX)?);
    let mut m = Vec::with_capacity(8);
    let mut v = Vec::with_capacity(8);
    for name in PolicyParams::TENSOR_NAMES {
        m.push(
            ckpt.tensor(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.m.{name}")))?
                .clone(),
        );
        v.push(
            ckpt.tensor(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.v.{name}")))?
                .clone(),
        );
    }
    let step = ckpt
        .meta("opt.step")
        .ok_or_else(|| Error::Checkpoint("missing opt.step".into()))?;
    Ok(TrainState {
        params,
        reference,
        sft,
        adam: Adam { m, v, step },
    })
}
