//! Synthetic preference-pair pipeline.
//!
//! Image-contrast candidates are generated in groups: each candidate is a
//! scene plus one proposed slot replacement, the group's intended captions
//! and edited renders form a similarity matrix, and a candidate survives
//! only if caption and image are each other's strict best match. Surviving
//! pairs must then clear the winner/loser similarity ratio gate. Accepted
//! records carry full provenance and serialize to JSONL with 17 significant
//! digits per real, so files are byte-reproducible and round-trip exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalItem;
use crate::objectives::PreferenceRecord;
use crate::policy::{ModelConfig, RenderedImage, TokenSeq};
use crate::world::{
    caption, edit_scene, gen_scene, mix_seed, render, similarity, validate_replacement, Catalog,
    GridPos, Placed, RenderConfig, Replacement, Scene, Vocabulary,
};

// ── Proposers ────────────────────────────────────────────────────────

/// Source of replacement proposals for a scene.
pub trait ReplacementProposer {
    fn propose(&self, scene: &Scene, catalog: &Catalog) -> Result<Vec<Replacement>>;
}

/// Deterministic default: every catalog substitute for every occupied slot,
/// row-major slot order, table order within a slot.
pub struct RuleBasedProposer;

impl ReplacementProposer for RuleBasedProposer {
    fn propose(&self, scene: &Scene, catalog: &Catalog) -> Result<Vec<Replacement>> {
        let mut out = Vec::new();
        for (pos, placed) in scene.occupied() {
            for (new, tag) in catalog.substitutes_of(placed.category) {
                out.push(Replacement {
                    position: pos,
                    old: placed.category,
                    new,
                    tag: tag.to_string(),
                });
            }
        }
        Ok(out)
    }
}

/// Plain-text request block handed to an external proposer. Mirrors the
/// element-replacement prompt fields: the scene caption and its object list.
pub fn proposal_request(scene: &Scene, catalog: &Catalog, vocab: &Vocabulary) -> String {
    let caption_words = vocab.decode_words(&caption(scene, vocab));
    let objects: Vec<&str> = {
        let mut seen = Vec::new();
        for (_, placed) in scene.occupied() {
            let name = catalog.category_name(placed.category);
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    };
    format!(
        "System: You are a good assistant to help me do academic research.\n\
         User: I have an image with the caption: \"{}\". Substitute each of the \
         following objects with something unexpected to create a sense of \
         discordance: {} in the format: [what] -> [what]. Provide a brief \
         sentence explaining each substitution.\n\
         Assistant:",
        caption_words,
        objects.join(", ")
    )
}

/// Parse `[what] -> [what]` lines, each with an optional `: rationale` tail.
/// Every mapping is validated against the catalog.
pub fn parse_proposal_response(
    text: &str,
    catalog: &Catalog,
) -> Result<Vec<(usize, usize, String)>> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((left, right)) = line.split_once("->") else {
            return Err(Error::Proposal {
                line: raw.to_string(),
                reason: "expected the form `[what] -> [what]`".into(),
            });
        };
        let old_name = left.trim();
        let (new_name, rationale) = match right.split_once(':') {
            Some((n, r)) => (n.trim(), r.trim().to_string()),
            None => (right.trim(), String::from("proposed")),
        };
        let old = catalog.category_index(old_name).ok_or_else(|| Error::Proposal {
            line: raw.to_string(),
            reason: format!("unknown category {old_name:?}"),
        })?;
        let new = catalog.category_index(new_name).ok_or_else(|| Error::Proposal {
            line: raw.to_string(),
            reason: format!("unknown category {new_name:?}"),
        })?;
        if !catalog.has_replacement(old, new) {
            return Err(Error::Proposal {
                line: raw.to_string(),
                reason: format!("{old_name} -> {new_name} is not in the replacement table"),
            });
        }
        out.push((old, new, rationale));
    }
    Ok(out)
}

/// Proposer backed by an external text service; `transport` maps a request
/// block to the raw response text.
pub struct AdapterProposer<F>
where
    F: Fn(&str) -> Result<String>,
{
    pub vocab: Vocabulary,
    pub transport: F,
}

impl<F> ReplacementProposer for AdapterProposer<F>
where
    F: Fn(&str) -> Result<String>,
{
    fn propose(&self, scene: &Scene, catalog: &Catalog) -> Result<Vec<Replacement>> {
        let request = proposal_request(scene, catalog, &self.vocab);
        let response = (self.transport)(&request)?;
        let mappings = parse_proposal_response(&response, catalog)?;
        let mut out = Vec::new();
        for (old, new, tag) in mappings {
            for (pos, placed) in scene.occupied() {
                if placed.category == old {
                    out.push(Replacement {
                        position: pos,
                        old,
                        new,
                        tag: tag.clone(),
                    });
                }
            }
        }
        Ok(out)
    }
}

// ── Filter and gate ──────────────────────────────────────────────────

fn strict_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, v) in values.enumerate() {
        match best {
            None => best = Some((i, v)),
            Some((_, bv)) => {
                if v > bv {
                    best = Some((i, v));
                    tied = false;
                } else if v == bv {
                    tied = true;
                }
            }
        }
    }
    match best {
        Some((i, _)) if !tied => Some(i),
        _ => None,
    }
}

/// Mutual strict-argmax acceptance over a square score matrix
/// `scores[i][j] = similarity(caption_i, image_j)`: candidate k survives iff
/// its caption is the best match for its image across rows and its image is
/// the best match for its caption across columns. Ties reject.
pub fn mutual_argmax_filter(scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = scores.len();
    for (i, row) in scores.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Input(format!(
                "score matrix is not square: row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| v.is_nan()) {
            return Err(Error::Input(format!("NaN score in row {i}: {bad}")));
        }
    }
    let mut accepted = Vec::new();
    for k in 0..n {
        let col_best = strict_argmax((0..n).map(|i| scores[i][k]));
        let row_best = strict_argmax(scores[k].iter().copied());
        if col_best == Some(k) && row_best == Some(k) {
            accepted.push(k);
        }
    }
    Ok(accepted)
}

/// `true` iff `sim_w / sim_l >= threshold`. Non-positive scores are a caller
/// bug: cosine can go non-positive, and such candidates must be rejected
/// before gating.
pub fn ratio_gate(sim_w: f64, sim_l: f64, threshold: f64) -> Result<bool> {
    if !(sim_w > 0.0) || !(sim_l > 0.0) {
        return Err(Error::Input(format!(
            "ratio gate requires positive scores, got ({sim_w}, {sim_l})"
        )));
    }
    Ok(sim_w / sim_l >= threshold)
}

// ── Record builders ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageContrastTask {
    /// "is there a {replaced category}" with answer yes: true for the
    /// source scene, false after the edit removed it.
    IsThereOld,
    /// "describe" with the source caption as the answer.
    Describe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseContrastTask {
    /// "is there a {absent category}": accurate no vs hallucinated yes.
    IsThereAbsent,
    /// Caption task: loser caption has one clause's category replaced by
    /// the distractor.
    CorruptedCaption,
}

/// Build an image-contrast record from a scene and a validated replacement.
/// Filtering and gating are the pipeline's responsibility and must already
/// have passed.
pub fn build_image_contrast(
    scene: &Scene,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    replacement: &Replacement,
    task: ImageContrastTask,
) -> Result<PreferenceRecord> {
    validate_replacement(scene, catalog, replacement)?;
    let edited = edit_scene(scene, catalog, replacement)?;
    let (query, response) = match task {
        ImageContrastTask::IsThereOld => {
            if edited.contains_category(replacement.old) {
                return Err(Error::Input(format!(
                    "is-there template inapplicable: {} still present after the edit",
                    catalog.category_name(replacement.old)
                )));
            }
            (vocab.is_there_query(replacement.old), vocab.yes_response())
        }
        ImageContrastTask::Describe => (vocab.describe_query(), caption(scene, vocab)),
    };
    Ok(PreferenceRecord::ImageContrast {
        image_w: render(scene, rc),
        image_l: render(&edited, rc),
        query,
        response,
    })
}

/// Build a response-contrast record: accurate winner, distractor-injected
/// loser. The distractor must be absent from the scene; `slot` names the
/// corrupted clause for the caption task.
pub fn build_response_contrast(
    scene: &Scene,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    distractor: usize,
    slot: GridPos,
    task: ResponseContrastTask,
) -> Result<PreferenceRecord> {
    if scene.contains_category(distractor) {
        return Err(Error::Input(format!(
            "distractor {} is present in the scene",
            catalog.category_name(distractor)
        )));
    }
    if scene.get(slot).is_none() {
        return Err(Error::Input(format!("slot {slot:?} is empty")));
    }
    let image = render(scene, rc);
    let (query, response_w, response_l) = match task {
        ResponseContrastTask::IsThereAbsent => (
            vocab.is_there_query(distractor),
            vocab.no_response(),
            vocab.yes_response(),
        ),
        ResponseContrastTask::CorruptedCaption => {
            let claim = claim_scene(scene, distractor, slot)?;
            (
                vocab.describe_query(),
                caption(scene, vocab),
                caption(&claim, vocab),
            )
        }
    };
    Ok(PreferenceRecord::ResponseContrast {
        image,
        query,
        response_w,
        response_l,
    })
}

/// The loser's claimed world: the scene with `slot`'s category replaced by
/// the distractor.
fn claim_scene(scene: &Scene, distractor: usize, slot: GridPos) -> Result<Scene> {
    let placed = scene
        .get(slot)
        .ok_or_else(|| Error::Input(format!("slot {slot:?} is empty")))?;
    let mut claim = scene.clone();
    claim.place(
        slot,
        Placed {
            category: distractor,
            attribute: placed.attribute,
        },
    )?;
    Ok(claim)
}

// ── Dataset records and persistence ──────────────────────────────────

/// Replacement provenance with names resolved for catalog independence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementInfo {
    pub position: GridPos,
    pub old: String,
    pub new: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub scene_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<ReplacementInfo>,
    pub sim_w: f64,
    pub sim_l: f64,
}

/// One JSONL row: the preference tuple plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub record: PreferenceRecord,
    pub provenance: Provenance,
}

pub use crate::jsonl::{read_jsonl, to_jsonl_line, write_jsonl};

// ── Generation pipeline ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    /// Emitted record count.
    pub count: usize,
    /// Fraction of emitted records that are response-contrast.
    pub kind_ratio: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub occupancy_min: usize,
    pub occupancy_max: usize,
    pub d_v: usize,
    pub render_seed: u64,
    /// Mutual-argmax candidate group size.
    pub group_size: usize,
    /// Winner/loser similarity ratio threshold.
    pub gate_threshold: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            count: 5000,
            kind_ratio: 0.5,
            grid_width: 4,
            grid_height: 4,
            occupancy_min: 2,
            occupancy_max: 3,
            d_v: 16,
            render_seed: 7777,
            group_size: 6,
            gate_threshold: 1.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kind_ratio) {
            return Err(Error::Config(format!(
                "kind_ratio must be in [0, 1], got {}",
                self.kind_ratio
            )));
        }
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        let cells = self.grid_width * self.grid_height;
        if self.occupancy_min == 0
            || self.occupancy_min > self.occupancy_max
            || self.occupancy_max > cells
        {
            return Err(Error::Config(format!(
                "occupancy range {}..={} invalid for {cells} cells",
                self.occupancy_min, self.occupancy_max
            )));
        }
        if self.d_v == 0 {
            return Err(Error::Config("d_v must be positive".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if !(self.gate_threshold > 0.0) {
            return Err(Error::Config(format!(
                "gate threshold must be positive, got {}",
                self.gate_threshold
            )));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            d_v: self.d_v,
            seed: self.render_seed,
        }
    }
}

/// Acceptance statistics printed by the data-generation command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub candidates: usize,
    pub filter_checked: usize,
    pub filter_passed: usize,
    pub gate_checked: usize,
    pub gate_passed: usize,
    pub rejected_nonpositive: usize,
    pub rejected_template: usize,
    pub emitted_response: usize,
    pub emitted_image: usize,
}

impl GenStats {
    pub fn filter_pass_rate(&self) -> f64 {
        if self.filter_checked == 0 {
            1.0
        } else {
            self.filter_passed as f64 / self.filter_checked as f64
        }
    }

    pub fn gate_pass_rate(&self) -> f64 {
        if self.gate_checked == 0 {
            1.0
        } else {
            self.gate_passed as f64 / self.gate_checked as f64
        }
    }
}

const KIND_RESPONSE: u64 = 1;
const KIND_IMAGE: u64 = 2;
const MAX_WAVES: usize = 100_000;

struct ImageCandidate {
    seed: u64,
    scene: Scene,
    replacement: Replacement,
    task: ImageContrastTask,
    intended_caption: TokenSeq,
    edited_image: RenderedImage,
}

/// Run the full pipeline: a pure function of (config, catalog). Emitted
/// records are sorted by record seed, so two runs write identical bytes.
pub fn generate_dataset(config: &GenConfig, catalog: &Catalog) -> Result<(Vec<DatasetRecord>, GenStats)> {
    config.validate()?;
    catalog.validate()?;
    let vocab = Vocabulary::build(catalog, config.grid_width, config.grid_height);
    let rc = config.render_config();
    let n_response = (config.count as f64 * config.kind_ratio).round() as usize;
    let n_image = config.count - n_response.min(config.count);
    let n_response = config.count - n_image;

    let mut stats = GenStats::default();
    let mut records = Vec::with_capacity(config.count);

    generate_response_records(config, catalog, &vocab, &rc, n_response, &mut stats, &mut records)?;
    generate_image_records(config, catalog, &vocab, &rc, n_image, &mut stats, &mut records)?;

    for rec in &records {
        let model_probe = ModelConfig {
            vocab_size: vocab.len().max(8),
            d_v: config.d_v,
            d_e: 1,
            d_h: 1,
            max_query_len: 8,
            max_response_len: 4 * config.occupancy_max + 1,
            seed: 0,
        };
        rec.record.validate_strict(&model_probe)?;
    }

    records.sort_by_key(|r| r.provenance.seed);
    Ok((records, stats))
}

fn generate_response_records(
    config: &GenConfig,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    quota: usize,
    stats: &mut GenStats,
    records: &mut Vec<DatasetRecord>,
) -> Result<()> {
    let mut counter = 0u64;
    let mut emitted = 0usize;
    let mut waves = 0usize;
    while emitted < quota {
        waves += 1;
        if waves > MAX_WAVES {
            return Err(Error::Config(
                "response-contrast generation exceeded the wave budget".into(),
            ));
        }
        let batch: Vec<u64> = (0..config.group_size as u64).map(|i| counter + i).collect();
        counter += config.group_size as u64;
        let built: Vec<Result<Option<(DatasetRecord, bool, bool)>>> = batch
            .par_iter()
            .map(|&c| build_response_candidate(config, catalog, vocab, rc, c))
            .collect();
        for item in built {
            stats.candidates += 1;
            match item? {
                None => {}
                Some((record, gated, passed)) => {
                    if gated {
                        stats.gate_checked += 1;
                        if passed {
                            stats.gate_passed += 1;
                        }
                    }
                    if passed && emitted < quota {
                        records.push(record);
                        emitted += 1;
                        stats.emitted_response += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Build one response-contrast candidate; `Ok(None)` means the candidate was
/// structurally unusable (no distractor available).
fn build_response_candidate(
    config: &GenConfig,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    counter: u64,
) -> Result<Option<(DatasetRecord, bool, bool)>> {
    let seed = mix_seed(&[config.seed, KIND_RESPONSE, counter]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occupancy = rng.gen_range(config.occupancy_min..=config.occupancy_max);
    let scene = gen_scene(
        mix_seed(&[seed, 0xA]),
        catalog,
        config.grid_width,
        config.grid_height,
        occupancy,
    )?;
    let absent: Vec<usize> = catalog
        .conventional_indices()
        .into_iter()
        .filter(|c| !scene.contains_category(*c))
        .collect();
    if absent.is_empty() {
        return Ok(None);
    }
    let distractor = absent[rng.gen_range(0..absent.len())];
    let slots: Vec<GridPos> = scene.occupied().map(|(p, _)| p).collect();
    let slot = slots[rng.gen_range(0..slots.len())];
    let task = if rng.gen_bool(0.5) {
        ResponseContrastTask::IsThereAbsent
    } else {
        ResponseContrastTask::CorruptedCaption
    };
    let record = build_response_contrast(scene_ref(&scene), catalog, vocab, rc, distractor, slot, task)?;

    // Winner/loser claim similarities: the winner claim is the scene itself,
    // the loser claim is the distractor-injected world.
    let image = render(&scene, rc);
    let sim_w = similarity(&caption(&scene, vocab), &image, vocab, rc)?;
    let claim = claim_scene(&scene, distractor, slot)?;
    let sim_l = similarity(&caption(&claim, vocab), &image, vocab, rc)?;

    // Only the caption task has a text-vs-image ratio to gate; yes/no
    // answers have no caption analogue.
    let (gated, passed) = match task {
        ResponseContrastTask::CorruptedCaption => {
            if sim_w <= 0.0 || sim_l <= 0.0 {
                return Ok(Some((placeholder_reject(record, seed), false, false)));
            }
            (true, ratio_gate(sim_w, sim_l, config.gate_threshold)?)
        }
        ResponseContrastTask::IsThereAbsent => (false, true),
    };

    let placed = scene.get(slot).expect("slot occupied");
    let replacement = match task {
        ResponseContrastTask::CorruptedCaption => Some(ReplacementInfo {
            position: slot,
            old: catalog.category_name(placed.category).to_string(),
            new: catalog.category_name(distractor).to_string(),
            tag: "hallucination-injection".into(),
        }),
        ResponseContrastTask::IsThereAbsent => None,
    };
    let dataset_record = DatasetRecord {
        record,
        provenance: Provenance {
            seed,
            scene_digest: scene.digest(catalog),
            replacement,
            sim_w,
            sim_l,
        },
    };
    Ok(Some((dataset_record, gated, passed)))
}

fn scene_ref(scene: &Scene) -> &Scene {
    scene
}

fn placeholder_reject(record: PreferenceRecord, seed: u64) -> DatasetRecord {
    DatasetRecord {
        record,
        provenance: Provenance {
            seed,
            scene_digest: String::new(),
            replacement: None,
            sim_w: 0.0,
            sim_l: 0.0,
        },
    }
}

fn generate_image_records(
    config: &GenConfig,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    quota: usize,
    stats: &mut GenStats,
    records: &mut Vec<DatasetRecord>,
) -> Result<()> {
    let proposer = RuleBasedProposer;
    let mut counter = 0u64;
    let mut emitted = 0usize;
    let mut waves = 0usize;
    while emitted < quota {
        waves += 1;
        if waves > MAX_WAVES {
            return Err(Error::Config(
                "image-contrast generation exceeded the wave budget".into(),
            ));
        }
        let batch: Vec<u64> = (0..config.group_size as u64).map(|i| counter + i).collect();
        counter += config.group_size as u64;
        let built: Vec<Result<Option<ImageCandidate>>> = batch
            .par_iter()
            .map(|&c| build_image_candidate(config, catalog, vocab, rc, &proposer, c))
            .collect();
        let mut candidates = Vec::new();
        for item in built {
            stats.candidates += 1;
            if let Some(c) = item? {
                candidates.push(c);
            }
        }
        if candidates.is_empty() {
            continue;
        }

        // Mutual-argmax over the wave's (intended caption, edited image)
        // pairs.
        let n = candidates.len();
        let mut scores = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                scores[i][j] = similarity(
                    &candidates[i].intended_caption,
                    &candidates[j].edited_image,
                    vocab,
                    rc,
                )?;
            }
        }
        let accepted = mutual_argmax_filter(&scores)?;
        stats.filter_checked += n;
        stats.filter_passed += accepted.len();

        for k in accepted {
            let cand = &candidates[k];
            let anchor = caption(&cand.scene, vocab);
            let source_image = render(&cand.scene, rc);
            let sim_w = similarity(&anchor, &source_image, vocab, rc)?;
            let sim_l = similarity(&anchor, &cand.edited_image, vocab, rc)?;
            if sim_w <= 0.0 || sim_l <= 0.0 {
                stats.rejected_nonpositive += 1;
                continue;
            }
            stats.gate_checked += 1;
            if !ratio_gate(sim_w, sim_l, config.gate_threshold)? {
                continue;
            }
            stats.gate_passed += 1;
            if emitted >= quota {
                continue;
            }
            let record = build_image_contrast(
                &cand.scene,
                catalog,
                vocab,
                rc,
                &cand.replacement,
                cand.task,
            )?;
            records.push(DatasetRecord {
                record,
                provenance: Provenance {
                    seed: cand.seed,
                    scene_digest: cand.scene.digest(catalog),
                    replacement: Some(ReplacementInfo {
                        position: cand.replacement.position,
                        old: catalog.category_name(cand.replacement.old).to_string(),
                        new: catalog.category_name(cand.replacement.new).to_string(),
                        tag: cand.replacement.tag.clone(),
                    }),
                    sim_w,
                    sim_l,
                },
            });
            emitted += 1;
            stats.emitted_image += 1;
        }
    }
    Ok(())
}

fn build_image_candidate(
    config: &GenConfig,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rc: &RenderConfig,
    proposer: &dyn ReplacementProposer,
    counter: u64,
) -> Result<Option<ImageCandidate>> {
    let seed = mix_seed(&[config.seed, KIND_IMAGE, counter]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occupancy = rng.gen_range(config.occupancy_min..=config.occupancy_max);
    let scene = gen_scene(
        mix_seed(&[seed, 0xB]),
        catalog,
        config.grid_width,
        config.grid_height,
        occupancy,
    )?;
    let proposals = proposer.propose(&scene, catalog)?;
    if proposals.is_empty() {
        return Ok(None);
    }
    let replacement = proposals[rng.gen_range(0..proposals.len())].clone();
    // The yes/no template needs the replaced category to vanish from the
    // edit; otherwise fall back to the caption task.
    let old_unique = scene
        .occupied()
        .filter(|(_, p)| p.category == replacement.old)
        .count()
        == 1;
    let task = if rng.gen_bool(0.5) && old_unique {
        ImageContrastTask::IsThereOld
    } else {
        ImageContrastTask::Describe
    };
    let edited = edit_scene(&scene, catalog, &replacement)?;
    Ok(Some(ImageCandidate {
        seed,
        intended_caption: caption(&edited, vocab),
        edited_image: render(&edited, rc),
        scene,
        replacement,
        task,
    }))
}

// ── Derived datasets ─────────────────────────────────────────────────

/// Winning (image, query, response) triples, the SFT training set.
pub fn sft_triples(records: &[DatasetRecord]) -> Vec<(RenderedImage, TokenSeq, TokenSeq)> {
    records
        .iter()
        .map(|r| {
            let (image, query, response) = r.record.winning_triple();
            (image.clone(), query.to_vec(), response.to_vec())
        })
        .collect()
}

/// Deterministic evaluation items over fresh scenes: balanced yes/no
/// existence probes plus captioning items with ground-truth and distractor
/// object sets.
pub fn generate_eval_items(
    config: &GenConfig,
    catalog: &Catalog,
    discriminative: usize,
    generative: usize,
) -> Result<Vec<EvalItem>> {
    config.validate()?;
    catalog.validate()?;
    let vocab = Vocabulary::build(catalog, config.grid_width, config.grid_height);
    let rc = config.render_config();
    let mut out = Vec::with_capacity(discriminative + generative);
    let mut counter = 0u64;
    while out.len() < discriminative {
        let seed = mix_seed(&[config.seed, 3, counter]);
        counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occupancy = rng.gen_range(config.occupancy_min..=config.occupancy_max);
        let scene = gen_scene(
            mix_seed(&[seed, 0xC]),
            catalog,
            config.grid_width,
            config.grid_height,
            occupancy,
        )?;
        let gold_yes = out.len() % 2 == 0;
        let category = if gold_yes {
            let present = scene.categories();
            present[rng.gen_range(0..present.len())]
        } else {
            let absent: Vec<usize> = catalog
                .conventional_indices()
                .into_iter()
                .filter(|c| !scene.contains_category(*c))
                .collect();
            if absent.is_empty() {
                continue;
            }
            absent[rng.gen_range(0..absent.len())]
        };
        out.push(EvalItem::Discriminative {
            image: render(&scene, &rc),
            query: vocab.is_there_query(category),
            gold_yes,
        });
    }
    let mut produced = 0usize;
    while produced < generative {
        let seed = mix_seed(&[config.seed, 4, counter]);
        counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occupancy = rng.gen_range(config.occupancy_min..=config.occupancy_max);
        let scene = gen_scene(
            mix_seed(&[seed, 0xD]),
            catalog,
            config.grid_width,
            config.grid_height,
            occupancy,
        )?;
        let truth: Vec<usize> = scene
            .categories()
            .into_iter()
            .map(|c| vocab.category_token(c))
            .collect();
        let absent: Vec<usize> = catalog
            .conventional_indices()
            .into_iter()
            .filter(|c| !scene.contains_category(*c))
            .collect();
        if absent.is_empty() {
            continue;
        }
        let mut distractors = Vec::new();
        for _ in 0..2.min(absent.len()) {
            let pick = absent[rng.gen_range(0..absent.len())];
            let tok = vocab.category_token(pick);
            if !distractors.contains(&tok) {
                distractors.push(tok);
            }
        }
        distractors.sort_unstable();
        out.push(EvalItem::Generative {
            image: render(&scene, &rc),
            query: vocab.describe_query(),
            truth,
            distractors,
        });
        produced += 1;
    }
    Ok(out)
}
