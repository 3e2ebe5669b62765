//! Toy vision-conditioned autoregressive policy.
//!
//! One hidden layer over `concat[image projection ; mean query embedding ;
//! previous-token embedding ; positional row]`, the smallest conditional
//! model in which the image-versus-text conditioning tradeoff is expressible
//! and exactly differentiable. The vision-unconditioned distribution is the
//! same network fed the literal zero image through the same projection,
//! bias included.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{sha256_hex, Tensor};

pub const PAD_TOKEN: usize = 0;
pub const BOS_TOKEN: usize = 1;
pub const EOS_TOKEN: usize = 2;
pub const YES_TOKEN: usize = 3;
pub const NO_TOKEN: usize = 4;
/// Token ids below this are reserved (PAD/BOS/EOS/yes/no).
pub const RESERVED_TOKENS: usize = 5;
/// Width of the trainable positional table rows.
pub const POS_DIM: usize = 8;

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

/// Static shape of the policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Image feature dimension.
    pub d_v: usize,
    /// Token embedding dimension.
    pub d_e: usize,
    /// Hidden-layer width.
    pub d_h: usize,
    pub max_query_len: usize,
    pub max_response_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 8 to cover reserved ids, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("max_query_len", self.max_query_len),
            ("max_response_len", self.max_response_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated hidden-layer input.
    pub fn hidden_input_dim(&self) -> usize {
        3 * self.d_e + POS_DIM
    }
}

/// A deterministic image rendering: unit-norm feature vector, or all zeros
/// (the zero image standing in for "no visual conditioning").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RenderedImage {
    features: Vec<f64>,
}

impl RenderedImage {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image features must be finite".into()));
        }
        let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        let is_zero = features.iter().all(|v| *v == 0.0);
        if !is_zero && (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "image feature norm must be 1 +/- 1e-9 or exactly 0, got {norm}"
            )));
        }
        Ok(RenderedImage { features })
    }

    /// The all-zero image of the given feature dimension.
    pub fn zero(d_v: usize) -> Self {
        RenderedImage {
            features: vec![0.0; d_v],
        }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn is_zero(&self) -> bool {
        self.features.iter().all(|v| *v == 0.0)
    }

    pub fn cosine(&self, other: &RenderedImage) -> f64 {
        self.features
            .iter()
            .zip(&other.features)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Full parameter set of the policy. Order of [`PolicyParams::TENSOR_NAMES`]
/// is the canonical order used by digests, checkpoints, and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    /// Token embedding matrix, `[V, d_e]`.
    pub embed: Tensor,
    /// Image projection `[d_v, d_e]` and bias `[1, d_e]`.
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// Hidden layer `[3*d_e + POS_DIM, d_h]` and bias `[1, d_h]`.
    pub w_h: Tensor,
    pub b_h: Tensor,
    /// Output layer `[d_h, V]` and bias `[1, V]`.
    pub w_o: Tensor,
    pub b_o: Tensor,
    /// Trainable positional table, `[max_response_len, POS_DIM]`.
    pub pos: Tensor,
}

impl PolicyParams {
    pub const TENSOR_NAMES: [&'static str; 8] =
        ["embed", "w_v", "b_v", "w_h", "b_h", "w_o", "b_o", "pos"];

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.embed,
            &self.w_v,
            &self.b_v,
            &self.w_h,
            &self.b_h,
            &self.w_o,
            &self.b_o,
            &self.pos,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.embed,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.pos,
        ]
    }

    /// Expected tensor shapes in canonical order for a config.
    pub fn tensor_shapes(config: &ModelConfig) -> [Vec<usize>; 8] {
        [
            vec![config.vocab_size, config.d_e],
            vec![config.d_v, config.d_e],
            vec![1, config.d_e],
            vec![config.hidden_input_dim(), config.d_h],
            vec![1, config.d_h],
            vec![config.d_h, config.vocab_size],
            vec![1, config.vocab_size],
            vec![config.max_response_len, POS_DIM],
        ]
    }

    pub fn from_tensors(config: ModelConfig, mut tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != 8 {
            return Err(Error::Config(format!(
                "expected 8 parameter tensors, got {}",
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(Self::tensor_shapes(&config)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter tensor has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Config("parameter tensor is not finite".into()));
            }
        }
        let pos = tensors.pop().expect("len checked");
        let b_o = tensors.pop().expect("len checked");
        let w_o = tensors.pop().expect("len checked");
        let b_h = tensors.pop().expect("len checked");
        let w_h = tensors.pop().expect("len checked");
        let b_v = tensors.pop().expect("len checked");
        let w_v = tensors.pop().expect("len checked");
        let embed = tensors.pop().expect("len checked");
        Ok(PolicyParams {
            config,
            embed,
            w_v,
            b_v,
            w_h,
            b_h,
            w_o,
            b_o,
            pos,
        })
    }

    /// Hex SHA-256 over the config and every tensor in canonical order.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in Self::TENSOR_NAMES.iter().zip(self.tensors()) {
            bytes.extend(name.as_bytes());
            bytes.extend(t.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Deterministic seeded initialization: every entry uniform in [-0.08, 0.08].
pub fn init_params(config: &ModelConfig) -> Result<PolicyParams> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = PolicyParams::tensor_shapes(config)
        .into_iter()
        .map(|shape| {
            let numel: usize = shape.iter().product();
            let values = (0..numel).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape, values).expect("consistent")
        })
        .collect();
    PolicyParams::from_tensors(config.clone(), tensors)
}

/// A deep copy whose digest is recorded at creation; later training steps on
/// the live policy cannot touch it.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    params: PolicyParams,
    digest: String,
}

impl FrozenPolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

pub fn freeze(params: &PolicyParams) -> FrozenPolicy {
    let params = params.clone();
    let digest = params.digest();
    FrozenPolicy { params, digest }
}

// ── Graph construction ───────────────────────────────────────────────

/// Node handles for one policy's parameters inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNodes {
    pub embed: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_h: NodeId,
    pub b_h: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub pos: NodeId,
}

impl PolicyNodes {
    /// Bind parameters as differentiable inputs.
    pub fn trainable(g: &mut Graph, p: &PolicyParams) -> Self {
        Self::build(g, p, true)
    }

    /// Bind parameters as constants (reference/frozen models).
    pub fn frozen(g: &mut Graph, p: &PolicyParams) -> Self {
        Self::build(g, p, false)
    }

    fn build(g: &mut Graph, p: &PolicyParams, trainable: bool) -> Self {
        let mut make = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PolicyNodes {
            embed: make(&p.embed),
            w_v: make(&p.w_v),
            b_v: make(&p.b_v),
            w_h: make(&p.w_h),
            b_h: make(&p.b_h),
            w_o: make(&p.w_o),
            b_o: make(&p.b_o),
            pos: make(&p.pos),
        }
    }

    /// Canonical order, matching [`PolicyParams::TENSOR_NAMES`].
    pub fn as_array(&self) -> [NodeId; 8] {
        [
            self.embed, self.w_v, self.b_v, self.w_h, self.b_h, self.w_o, self.b_o, self.pos,
        ]
    }
}

/// One-hot block-selector constants that realize concatenation of row
/// vectors through the primitive op set: `concat(a, b, c, d)` is built as
/// `a@S0 + b@S1 + c@S2 + d@S3`.
#[derive(Debug, Clone, Copy)]
pub struct ConcatSelectors {
    img: NodeId,
    query: NodeId,
    prev: NodeId,
    pos: NodeId,
}

pub fn build_selectors(g: &mut Graph, config: &ModelConfig) -> ConcatSelectors {
    let total = config.hidden_input_dim();
    let widths = [config.d_e, config.d_e, config.d_e, POS_DIM];
    let mut offset = 0;
    let mut ids = [NodeId(0); 4];
    for (slot, width) in widths.iter().enumerate() {
        let mut m = Tensor::zeros(&[*width, total]);
        for r in 0..*width {
            m.values_mut()[r * total + offset + r] = 1.0;
        }
        ids[slot] = g.constant(m);
        offset += width;
    }
    ConcatSelectors {
        img: ids[0],
        query: ids[1],
        prev: ids[2],
        pos: ids[3],
    }
}

/// Per-sequence nodes that are shared across positions.
#[derive(Debug, Clone, Copy)]
pub struct SeqPrelude {
    img_proj: NodeId,
    query_mean: NodeId,
}

pub fn validate_query(config: &ModelConfig, query: &[TokenId]) -> Result<()> {
    if query.is_empty() {
        return Err(Error::Input("query must be non-empty".into()));
    }
    if query.len() > config.max_query_len {
        return Err(Error::Input(format!(
            "query length {} exceeds max_query_len {}",
            query.len(),
            config.max_query_len
        )));
    }
    if let Some(bad) = query.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "query token {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn validate_response(config: &ModelConfig, response: &[TokenId]) -> Result<()> {
    if response.is_empty() {
        return Err(Error::Input("response must be non-empty".into()));
    }
    if response.len() > config.max_response_len {
        return Err(Error::Input(format!(
            "response length {} exceeds max_response_len {}",
            response.len(),
            config.max_response_len
        )));
    }
    if *response.last().expect("non-empty") != EOS_TOKEN {
        return Err(Error::Input("response must end with EOS".into()));
    }
    if let Some(bad) = response.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "response token {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    if response.iter().any(|&t| t == PAD_TOKEN) {
        return Err(Error::Input("response must not contain PAD".into()));
    }
    if response[..response.len() - 1].iter().any(|&t| t == EOS_TOKEN) {
        return Err(Error::Input("response must not contain interior EOS".into()));
    }
    Ok(())
}

fn validate_image(config: &ModelConfig, image: &RenderedImage) -> Result<()> {
    if image.dim() != config.d_v {
        return Err(Error::Input(format!(
            "image feature dim {} does not match d_v {}",
            image.dim(),
            config.d_v
        )));
    }
    Ok(())
}

/// Image projection and mean-pooled query embedding for one sequence.
pub fn seq_prelude(
    g: &mut Graph,
    nodes: &PolicyNodes,
    config: &ModelConfig,
    selectors: &ConcatSelectors,
    image: &RenderedImage,
    query: &[TokenId],
) -> Result<SeqPrelude> {
    validate_image(config, image)?;
    validate_query(config, query)?;
    let _ = selectors;
    let img = g.constant(Tensor::row(image.features().to_vec()));
    let proj = g.matmul(img, nodes.w_v)?;
    let img_proj = g.add(proj, nodes.b_v)?;

    let gathered = g.gather(nodes.embed, query)?;
    let weight = 1.0 / query.len() as f64;
    let pool = g.constant(Tensor::row(vec![weight; query.len()]));
    let query_mean = g.matmul(pool, gathered)?;
    Ok(SeqPrelude {
        img_proj,
        query_mean,
    })
}

/// Pre-softmax logits `[1, V]` for one response position.
pub fn step_logits_node(
    g: &mut Graph,
    nodes: &PolicyNodes,
    config: &ModelConfig,
    selectors: &ConcatSelectors,
    prelude: &SeqPrelude,
    prev_token: TokenId,
    position: usize,
) -> Result<NodeId> {
    if position >= config.max_response_len {
        return Err(Error::Input(format!(
            "position {position} out of range (max_response_len {})",
            config.max_response_len
        )));
    }
    let prev = g.gather(nodes.embed, &[prev_token])?;
    let pos_row = g.gather(nodes.pos, &[position])?;

    let a = g.matmul(prelude.img_proj, selectors.img)?;
    let b = g.matmul(prelude.query_mean, selectors.query)?;
    let c = g.matmul(prev, selectors.prev)?;
    let d = g.matmul(pos_row, selectors.pos)?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let concat = g.add(abc, d)?;

    let pre = g.matmul(concat, nodes.w_h)?;
    let pre_b = g.add(pre, nodes.b_h)?;
    let hidden = g.relu(pre_b);
    let out = g.matmul(hidden, nodes.w_o)?;
    g.add(out, nodes.b_o)
}

/// Teacher-forced logits nodes for every position of `response`.
pub fn step_logits_seq(
    g: &mut Graph,
    nodes: &PolicyNodes,
    config: &ModelConfig,
    selectors: &ConcatSelectors,
    image: &RenderedImage,
    query: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<NodeId>> {
    validate_response(config, response)?;
    let prelude = seq_prelude(g, nodes, config, selectors, image, query)?;
    let mut out = Vec::with_capacity(response.len());
    for (i, _) in response.iter().enumerate() {
        let prev = if i == 0 { BOS_TOKEN } else { response[i - 1] };
        out.push(step_logits_node(
            g, nodes, config, selectors, &prelude, prev, i,
        )?);
    }
    Ok(out)
}

/// Select `log_probs[1,V] @ onehot[V,1]`, yielding a `[1,1]` scalar node.
pub fn pick_node(g: &mut Graph, row: NodeId, index: usize, width: usize) -> Result<NodeId> {
    let mut onehot = Tensor::zeros(&[width, 1]);
    onehot.values_mut()[index] = 1.0;
    let sel = g.constant(onehot);
    g.matmul(row, sel)
}

/// Sequence log-probability nodes: total plus one pick per position.
pub struct SeqNodes {
    pub total: NodeId,
    pub per_token: Vec<NodeId>,
    pub step_logits: Vec<NodeId>,
}

pub fn seq_logprob_nodes(
    g: &mut Graph,
    nodes: &PolicyNodes,
    config: &ModelConfig,
    selectors: &ConcatSelectors,
    image: &RenderedImage,
    query: &[TokenId],
    response: &[TokenId],
) -> Result<SeqNodes> {
    let logits = step_logits_seq(g, nodes, config, selectors, image, query, response)?;
    let mut per_token = Vec::with_capacity(response.len());
    for (h, &tok) in logits.iter().zip(response) {
        let lsm = g.log_softmax(*h)?;
        per_token.push(pick_node(g, lsm, tok, config.vocab_size)?);
    }
    let mut total = per_token[0];
    for pick in &per_token[1..] {
        total = g.add(total, *pick)?;
    }
    Ok(SeqNodes {
        total,
        per_token,
        step_logits: logits,
    })
}

// ── Value-level operations ───────────────────────────────────────────

/// Per-step logits for `(image, query, response prefix, position)`.
pub fn step_logits(
    params: &PolicyParams,
    image: &RenderedImage,
    query: &[TokenId],
    prefix: &[TokenId],
    position: usize,
) -> Result<Vec<f64>> {
    if let Some(bad) = prefix.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::Input(format!(
            "prefix token {bad} out of range for vocab {}",
            params.config.vocab_size
        )));
    }
    let mut g = Graph::new();
    let nodes = PolicyNodes::frozen(&mut g, params);
    let selectors = build_selectors(&mut g, &params.config);
    let prelude = seq_prelude(&mut g, &nodes, &params.config, &selectors, image, query)?;
    let prev = prefix.last().copied().unwrap_or(BOS_TOKEN);
    let h = step_logits_node(
        &mut g,
        &nodes,
        &params.config,
        &selectors,
        &prelude,
        prev,
        position,
    )?;
    Ok(g.forward(h)?.values().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Summed teacher-forced log-probability of `response` given `(image, query)`.
pub fn seq_logprob(
    params: &PolicyParams,
    image: &RenderedImage,
    query: &[TokenId],
    response: &[TokenId],
) -> Result<SeqLogProb> {
    let mut g = Graph::new();
    let nodes = PolicyNodes::frozen(&mut g, params);
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
    let total = g.forward(seq.total)?.scalar_value()?;
    let per_token = seq
        .per_token
        .iter()
        .map(|id| g.value(*id).and_then(|t| t.scalar_value()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SeqLogProb { total, per_token })
}

/// The vision-unconditioned distribution: identical to [`seq_logprob`] with
/// the zero image.
pub fn uncond_seq_logprob(
    params: &PolicyParams,
    query: &[TokenId],
    response: &[TokenId],
) -> Result<SeqLogProb> {
    seq_logprob(
        params,
        &RenderedImage::zero(params.config.d_v),
        query,
        response,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Argmax with ties broken toward the lower token id.
    Greedy,
    Sample { seed: u64, temperature: f64 },
}

/// Autoregressive generation until EOS or `max_response_len`.
pub fn decode(
    params: &PolicyParams,
    image: &RenderedImage,
    query: &[TokenId],
    mode: DecodeMode,
) -> Result<TokenSeq> {
    use rand::{Rng, SeedableRng};
    let mut rng = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sample { seed, temperature } => {
            if temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
            Some((rand_chacha::ChaCha8Rng::seed_from_u64(seed), temperature))
        }
    };
    let mut out: TokenSeq = Vec::new();
    for position in 0..params.config.max_response_len {
        let logits = step_logits(params, image, query, &out, position)?;
        let next = match &mut rng {
            None => argmax_low_tie(&logits),
            Some((rng, temperature)) => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits
                    .iter()
                    .map(|l| ((l - max) / *temperature).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut chosen = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        chosen = i;
                        break;
                    }
                    u -= w;
                }
                chosen
            }
        };
        out.push(next);
        if next == EOS_TOKEN {
            break;
        }
    }
    Ok(out)
}

fn argmax_low_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
