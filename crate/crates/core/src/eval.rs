//! Hallucination metrics and log-likelihood gap analysis.
//!
//! Discriminative probes are scored by comparing the log-probability of the
//! one-token "yes" and "no" answers (ties resolve to "no", conservative
//! against yes-bias). Generative metrics count exact category-token mentions
//! in greedy decodes. Gap analysis measures the preferred-minus-dispreferred
//! log-likelihood difference under the conditioned and the zero-image
//! distributions, the quantity whose training-time shift the guided
//! objective is meant to steer.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::to_jsonl_line;
use crate::objectives::PreferenceRecord;
use crate::policy::{
    decode, seq_logprob, uncond_seq_logprob, DecodeMode, PolicyParams, RenderedImage, TokenId,
    TokenSeq,
};
use crate::world::Vocabulary;

/// One evaluation probe, JSONL-serializable alongside the dataset schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum EvalItem {
    /// Existence probe with a gold yes/no answer.
    Discriminative {
        image: RenderedImage,
        query: TokenSeq,
        gold_yes: bool,
    },
    /// Captioning probe with ground-truth and distractor object token sets.
    Generative {
        image: RenderedImage,
        query: TokenSeq,
        truth: Vec<TokenId>,
        distractors: Vec<TokenId>,
    },
}

// ── Discriminative metrics ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrMetrics {
    /// All on the 0..=1 scale; "yes" is the positive class.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

/// Score yes/no items: predict "yes" iff the yes-response outscores the
/// no-response in sequence log-probability.
pub fn discr_eval(policy: &PolicyParams, items: &[EvalItem]) -> Result<DiscrMetrics> {
    let probes: Vec<(&RenderedImage, &TokenSeq, bool)> = items
        .iter()
        .filter_map(|item| match item {
            EvalItem::Discriminative {
                image,
                query,
                gold_yes,
            } => Some((image, query, *gold_yes)),
            _ => None,
        })
        .collect();
    if probes.is_empty() {
        return Err(Error::Input("no discriminative items".into()));
    }
    let yes = vec![crate::policy::YES_TOKEN, crate::policy::EOS_TOKEN];
    let no = vec![crate::policy::NO_TOKEN, crate::policy::EOS_TOKEN];
    let predictions: Vec<Result<bool>> = probes
        .par_iter()
        .map(|(image, query, _)| {
            let lp_yes = seq_logprob(policy, image, query, &yes)?.total;
            let lp_no = seq_logprob(policy, image, query, &no)?.total;
            Ok(lp_yes > lp_no)
        })
        .collect();
    let mut confusion = Confusion::default();
    for (prediction, (_, _, gold)) in predictions.into_iter().zip(&probes) {
        confusion.add(prediction?, *gold);
    }
    Ok(confusion.metrics())
}

/// Shared confusion arithmetic, also used verbatim by recomputation tests.
#[derive(Debug, Default, Clone, Copy)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted_yes: bool, gold_yes: bool) {
        match (predicted_yes, gold_yes) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn metrics(&self) -> DiscrMetrics {
        let total = self.tp + self.fp + self.tn + self.fn_;
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let yes_ratio = if total == 0 {
            0.0
        } else {
            (self.tp + self.fp) as f64 / total as f64
        };
        DiscrMetrics {
            precision,
            recall,
            f1,
            yes_ratio,
        }
    }
}

// ── Generative metrics ───────────────────────────────────────────────

/// All as percentages in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    /// Hallucinated object mentions over all object mentions.
    pub chair: f64,
    /// Ground-truth objects mentioned over all ground-truth objects.
    pub cover: f64,
    /// Responses containing at least one hallucinated mention.
    pub hal: f64,
    /// Hallucinated mentions drawn from the items' distractor sets, over
    /// all object mentions.
    pub cog: f64,
}

/// Decode every generative item and tally corpus-level metrics.
pub fn gen_eval(
    policy: &PolicyParams,
    items: &[EvalItem],
    mode: DecodeMode,
    vocab: &Vocabulary,
) -> Result<GenMetrics> {
    let probes: Vec<(&RenderedImage, &TokenSeq, &Vec<TokenId>, &Vec<TokenId>)> = items
        .iter()
        .filter_map(|item| match item {
            EvalItem::Generative {
                image,
                query,
                truth,
                distractors,
            } => Some((image, query, truth, distractors)),
            _ => None,
        })
        .collect();
    if probes.is_empty() {
        return Err(Error::Input("no generative items".into()));
    }
    let decoded: Vec<Result<TokenSeq>> = probes
        .par_iter()
        .map(|(image, query, _, _)| decode(policy, image, query, mode))
        .collect();
    let mut responses = Vec::with_capacity(probes.len());
    for d in decoded {
        responses.push(d?);
    }
    let tallies: Vec<(TokenSeq, Vec<TokenId>, Vec<TokenId>)> = responses
        .into_iter()
        .zip(&probes)
        .map(|(resp, (_, _, truth, distractors))| (resp, (*truth).clone(), (*distractors).clone()))
        .collect();
    tally_generative(&tallies, vocab)
}

/// Corpus tally over (response, truth set, distractor set) triples. Mention
/// extraction is exact token matching against the catalog-backed vocabulary.
pub fn tally_generative(
    items: &[(TokenSeq, Vec<TokenId>, Vec<TokenId>)],
    vocab: &Vocabulary,
) -> Result<GenMetrics> {
    if items.is_empty() {
        return Err(Error::Input("no generative tallies".into()));
    }
    let mut total_mentions = 0usize;
    let mut halluc_mentions = 0usize;
    let mut cog_mentions = 0usize;
    let mut truth_total = 0usize;
    let mut truth_covered = 0usize;
    let mut responses_with_halluc = 0usize;
    for (response, truth, distractors) in items {
        let truth: BTreeSet<TokenId> = truth.iter().copied().collect();
        let distractors: BTreeSet<TokenId> = distractors.iter().copied().collect();
        let mentions: Vec<TokenId> = response
            .iter()
            .copied()
            .filter(|t| vocab.category_of_token(*t).is_some())
            .collect();
        let mut item_halluc = 0usize;
        for m in &mentions {
            total_mentions += 1;
            if !truth.contains(m) {
                halluc_mentions += 1;
                item_halluc += 1;
                if distractors.contains(m) {
                    cog_mentions += 1;
                }
            }
        }
        if item_halluc > 0 {
            responses_with_halluc += 1;
        }
        truth_total += truth.len();
        let mentioned: BTreeSet<TokenId> = mentions.iter().copied().collect();
        truth_covered += truth.intersection(&mentioned).count();
    }
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    Ok(GenMetrics {
        chair: pct(halluc_mentions, total_mentions),
        cover: pct(truth_covered, truth_total),
        hal: pct(responses_with_halluc, items.len()),
        cog: pct(cog_mentions, total_mentions),
    })
}

/// `(100 - CHAIR + F1) / 2`, both inputs as percentages.
pub fn amber_score(chair: f64, f1: f64) -> Result<f64> {
    for (name, v) in [("chair", chair), ("f1", f1)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Input(format!("{name} must be in [0, 100], got {v}")));
        }
    }
    Ok((100.0 - chair + f1) / 2.0)
}

// ── Gap analysis ─────────────────────────────────────────────────────

pub const GAP_HIST_LO: f64 = -20.0;
pub const GAP_HIST_HI: f64 = 20.0;
pub const GAP_HIST_BINS: usize = 40;

/// Fixed-bin histogram with explicit under/overflow cells at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// `bins + 2` counts: underflow, the bins, overflow.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Histogram {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins + 2],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len() - 2
    }

    pub fn add(&mut self, value: f64) {
        let bins = self.bins();
        let idx = if value < self.lo {
            0
        } else if value >= self.hi {
            bins + 1
        } else {
            1 + ((value - self.lo) / (self.hi - self.lo) * bins as f64) as usize
        };
        self.counts[idx.min(bins + 1)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Interior bin edges, `bins + 1` values from lo to hi.
    pub fn edges(&self) -> Vec<f64> {
        let bins = self.bins();
        (0..=bins)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / bins as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub count: usize,
    pub mean_cond: f64,
    pub mean_uncond: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAnalysis {
    pub overall: GapSummary,
    pub response_contrast: Option<GapSummary>,
    pub image_contrast: Option<GapSummary>,
    pub hist_cond: Histogram,
    pub hist_uncond: Histogram,
}

/// Per-record preferred-minus-dispreferred log-likelihood differences under
/// the conditioned and zero-image distributions. Image-contrast records
/// share their textual inputs, so their unconditioned difference is exactly
/// zero by construction.
pub fn gap_analysis(policy: &PolicyParams, records: &[PreferenceRecord]) -> Result<GapAnalysis> {
    if records.is_empty() {
        return Err(Error::Input("gap analysis needs a non-empty pair set".into()));
    }
    let deltas: Vec<Result<(f64, f64, bool)>> = records
        .par_iter()
        .map(|record| match record {
            PreferenceRecord::ResponseContrast {
                image,
                query,
                response_w,
                response_l,
            } => {
                let cond = seq_logprob(policy, image, query, response_w)?.total
                    - seq_logprob(policy, image, query, response_l)?.total;
                let uncond = uncond_seq_logprob(policy, query, response_w)?.total
                    - uncond_seq_logprob(policy, query, response_l)?.total;
                Ok((cond, uncond, false))
            }
            PreferenceRecord::ImageContrast {
                image_w,
                image_l,
                query,
                response,
            } => {
                let cond = seq_logprob(policy, image_w, query, response)?.total
                    - seq_logprob(policy, image_l, query, response)?.total;
                // Identical text inputs on both sides: the two unconditioned
                // evaluations are the same computation, so the difference is
                // exactly zero.
                let u = uncond_seq_logprob(policy, query, response)?.total;
                Ok((cond, u - u, true))
            }
        })
        .collect();

    let mut hist_cond = Histogram::new(GAP_HIST_LO, GAP_HIST_HI, GAP_HIST_BINS);
    let mut hist_uncond = Histogram::new(GAP_HIST_LO, GAP_HIST_HI, GAP_HIST_BINS);
    let mut all = Accum::default();
    let mut resp = Accum::default();
    let mut img = Accum::default();
    for d in deltas {
        let (cond, uncond, is_image) = d?;
        hist_cond.add(cond);
        hist_uncond.add(uncond);
        all.add(cond, uncond);
        if is_image {
            img.add(cond, uncond);
        } else {
            resp.add(cond, uncond);
        }
    }
    Ok(GapAnalysis {
        overall: all.summary().expect("non-empty"),
        response_contrast: resp.summary(),
        image_contrast: img.summary(),
        hist_cond,
        hist_uncond,
    })
}

#[derive(Default)]
struct Accum {
    count: usize,
    sum_cond: f64,
    sum_uncond: f64,
}

impl Accum {
    fn add(&mut self, cond: f64, uncond: f64) {
        self.count += 1;
        self.sum_cond += cond;
        self.sum_uncond += uncond;
    }

    fn summary(&self) -> Option<GapSummary> {
        (self.count > 0).then(|| GapSummary {
            count: self.count,
            mean_cond: self.sum_cond / self.count as f64,
            mean_uncond: self.sum_uncond / self.count as f64,
        })
    }
}

/// Mean-gap movement from a baseline checkpoint to the evaluated one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapShift {
    pub overall_cond: f64,
    pub overall_uncond: f64,
    pub response_cond: Option<f64>,
    pub response_uncond: Option<f64>,
    pub image_cond: Option<f64>,
    pub image_uncond: Option<f64>,
}

pub fn gap_shift(after: &GapAnalysis, before: &GapAnalysis) -> GapShift {
    let pair = |a: &Option<GapSummary>, b: &Option<GapSummary>| match (a, b) {
        (Some(x), Some(y)) => (
            Some(x.mean_cond - y.mean_cond),
            Some(x.mean_uncond - y.mean_uncond),
        ),
        _ => (None, None),
    };
    let (response_cond, response_uncond) =
        pair(&after.response_contrast, &before.response_contrast);
    let (image_cond, image_uncond) = pair(&after.image_contrast, &before.image_contrast);
    GapShift {
        overall_cond: after.overall.mean_cond - before.overall.mean_cond,
        overall_uncond: after.overall.mean_uncond - before.overall.mean_uncond,
        response_cond,
        response_uncond,
        image_cond,
        image_uncond,
    }
}

// ── Report emission ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub discriminative: Option<DiscrMetrics>,
    pub generative: Option<GenMetrics>,
    /// `(100 - CHAIR + F1%) / 2` when both halves are present.
    pub amber_score: Option<f64>,
    pub gaps: Option<GapAnalysis>,
    pub shift: Option<GapShift>,
}

impl EvalReport {
    pub fn with_amber(
        discriminative: Option<DiscrMetrics>,
        generative: Option<GenMetrics>,
        gaps: Option<GapAnalysis>,
        shift: Option<GapShift>,
    ) -> Result<EvalReport> {
        let amber = match (&discriminative, &generative) {
            (Some(d), Some(g)) => Some(amber_score(g.chair, d.f1 * 100.0)?),
            _ => None,
        };
        Ok(EvalReport {
            discriminative,
            generative,
            amber_score: amber,
            gaps,
            shift,
        })
    }
}

/// Write `report.json`, `metrics.csv`, and (when gaps are present)
/// `histograms.csv` plus one SVG per histogram.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_jsonl_line(report)? + "\n")?;

    let mut csv = String::from("metric,value\n");
    if let Some(d) = &report.discriminative {
        csv.push_str(&format!("precision,{}\n", d.precision));
        csv.push_str(&format!("recall,{}\n", d.recall));
        csv.push_str(&format!("f1,{}\n", d.f1));
        csv.push_str(&format!("yes_ratio,{}\n", d.yes_ratio));
    }
    if let Some(g) = &report.generative {
        csv.push_str(&format!("chair,{}\n", g.chair));
        csv.push_str(&format!("cover,{}\n", g.cover));
        csv.push_str(&format!("hal,{}\n", g.hal));
        csv.push_str(&format!("cog,{}\n", g.cog));
    }
    if let Some(a) = report.amber_score {
        csv.push_str(&format!("amber_score,{a}\n"));
    }
    if let Some(gaps) = &report.gaps {
        csv.push_str(&format!("gap_mean_cond,{}\n", gaps.overall.mean_cond));
        csv.push_str(&format!("gap_mean_uncond,{}\n", gaps.overall.mean_uncond));
    }
    if let Some(s) = &report.shift {
        csv.push_str(&format!("shift_cond,{}\n", s.overall_cond));
        csv.push_str(&format!("shift_uncond,{}\n", s.overall_uncond));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;

    if let Some(gaps) = &report.gaps {
        let mut rows = String::from("bin_lo,bin_hi,cond_count,uncond_count\n");
        let edges = gaps.hist_cond.edges();
        let bins = gaps.hist_cond.bins();
        rows.push_str(&format!(
            "-inf,{},{},{}\n",
            edges[0], gaps.hist_cond.counts[0], gaps.hist_uncond.counts[0]
        ));
        for b in 0..bins {
            rows.push_str(&format!(
                "{},{},{},{}\n",
                edges[b],
                edges[b + 1],
                gaps.hist_cond.counts[b + 1],
                gaps.hist_uncond.counts[b + 1]
            ));
        }
        rows.push_str(&format!(
            "{},+inf,{},{}\n",
            edges[bins],
            gaps.hist_cond.counts[bins + 1],
            gaps.hist_uncond.counts[bins + 1]
        ));
        std::fs::write(dir.join("histograms.csv"), rows)?;
        std::fs::write(
            dir.join("hist_cond.svg"),
            histogram_svg(&gaps.hist_cond, "conditioned gap"),
        )?;
        std::fs::write(
            dir.join("hist_uncond.svg"),
            histogram_svg(&gaps.hist_uncond, "unconditioned gap"),
        )?;
    }
    Ok(())
}

/// Minimal self-contained bar chart.
pub fn histogram_svg(hist: &Histogram, title: &str) -> String {
    let width = 640.0;
    let height = 320.0;
    let margin = 30.0;
    let n = hist.counts.len();
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (width - 2.0 * margin) / n as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "  <title>{title} ({} samples)</title>\n",
        hist.total()
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    for (i, count) in hist.counts.iter().enumerate() {
        let h = (height - 2.0 * margin) * (*count as f64) / max;
        let x = margin + i as f64 * bar_w;
        let y = height - margin - h;
        // Overflow cells at the ends are drawn darker.
        let fill = if i == 0 || i == n - 1 { "#888888" } else { "#4477aa" };
        out.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>\n",
            bar_w.max(1.0) - 0.5
        ));
    }
    out.push_str(&format!(
        "  <line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - margin,
        width - margin,
        height - margin
    ));
    out.push_str(&format!(
        "  <text x=\"{margin}\" y=\"{}\" font-size=\"12\">{} .. {}</text>\n",
        height - 8.0,
        hist.lo,
        hist.hi
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use crate::world::{Catalog, Vocabulary};

    #[test]
    fn confusion_arithmetic_examples() {
        // All correct on a balanced set.
        let mut c = Confusion::default();
        for _ in 0..5 {
            c.add(true, true);
            c.add(false, false);
        }
        let m = c.metrics();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.yes_ratio, 0.5);

        // All-yes predictor on balanced gold.
        let mut c = Confusion::default();
        for _ in 0..5 {
            c.add(true, true);
            c.add(true, false);
        }
        let m = c.metrics();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.yes_ratio, 1.0);
    }

    #[test]
    fn confusion_matches_bruteforce_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let preds: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let golds: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let mut c = Confusion::default();
            for (p, g) in preds.iter().zip(&golds) {
                c.add(*p, *g);
            }
            let m = c.metrics();
            // Independent recomputation with plain counting loops.
            let tp = preds.iter().zip(&golds).filter(|(p, g)| **p && **g).count();
            let fp = preds.iter().zip(&golds).filter(|(p, g)| **p && !**g).count();
            let fn_ = preds.iter().zip(&golds).filter(|(p, g)| !**p && **g).count();
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            assert_eq!(m.precision, precision);
            assert_eq!(m.recall, recall);
            assert_eq!(m.f1, f1);
        }
    }

    #[test]
    fn generative_tally_definitions() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        let dog = vocab.category_token(catalog.category_index("dog").unwrap());
        let car = vocab.category_token(catalog.category_index("car").unwrap());
        let tree = vocab.category_token(catalog.category_index("tree").unwrap());

        // Mentions {dog, car}, truth {dog}: one hallucinated of two mentions.
        let items = vec![(vec![dog, car, crate::policy::EOS_TOKEN], vec![dog], vec![car])];
        let m = tally_generative(&items, &vocab).unwrap();
        assert_eq!(m.chair, 50.0);
        assert_eq!(m.hal, 100.0);
        assert_eq!(m.cover, 100.0);
        assert_eq!(m.cog, 50.0);

        // Perfect captioner.
        let items = vec![
            (vec![dog, crate::policy::EOS_TOKEN], vec![dog], vec![car]),
            (vec![tree, crate::policy::EOS_TOKEN], vec![tree], vec![car]),
        ];
        let m = tally_generative(&items, &vocab).unwrap();
        assert_eq!(m.chair, 0.0);
        assert_eq!(m.cover, 100.0);
        assert_eq!(m.hal, 0.0);
        assert_eq!(m.cog, 0.0);
    }

    #[test]
    fn generative_tally_matches_per_item_recount() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        let n_cats = catalog.categories.len();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let items: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = (0..n)
                .map(|_| {
                    let resp: Vec<usize> = (0..rng.gen_range(1..6))
                        .map(|_| vocab.category_token(rng.gen_range(0..n_cats)))
                        .chain([crate::policy::EOS_TOKEN])
                        .collect();
                    let truth: Vec<usize> = (0..rng.gen_range(1..4))
                        .map(|_| vocab.category_token(rng.gen_range(0..n_cats)))
                        .collect();
                    let distract: Vec<usize> = (0..rng.gen_range(0..3))
                        .map(|_| vocab.category_token(rng.gen_range(0..n_cats)))
                        .collect();
                    (resp, truth, distract)
                })
                .collect();
            let fast = tally_generative(&items, &vocab).unwrap();

            // Independent tally script.
            let (mut tot, mut hall, mut cogm, mut t_tot, mut t_cov, mut resp_h) =
                (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
            for (resp, truth, distract) in &items {
                let mentions: Vec<usize> = resp
                    .iter()
                    .copied()
                    .filter(|t| vocab.category_of_token(*t).is_some())
                    .collect();
                let mut any = false;
                for m in &mentions {
                    tot += 1;
                    if !truth.contains(m) {
                        hall += 1;
                        any = true;
                        if distract.contains(m) {
                            cogm += 1;
                        }
                    }
                }
                if any {
                    resp_h += 1;
                }
                let tset: BTreeSet<usize> = truth.iter().copied().collect();
                t_tot += tset.len();
                t_cov += tset.iter().filter(|t| mentions.contains(t)).count();
            }
            let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
            assert_eq!(fast.chair, pct(hall, tot));
            assert_eq!(fast.cover, pct(t_cov, t_tot));
            assert_eq!(fast.hal, pct(resp_h, items.len()));
            assert_eq!(fast.cog, pct(cogm, tot));
        }
    }

    #[test]
    fn amber_score_paper_rows() {
        // Formula-level reproduction of the published score arithmetic.
        assert!((amber_score(7.8, 74.7).unwrap() - 83.45).abs() < 1e-9);
        assert!((amber_score(6.6, 83.5).unwrap() - 88.45).abs() < 1e-9);
        assert_eq!(amber_score(0.0, 100.0).unwrap(), 100.0);
        assert!(amber_score(-1.0, 50.0).is_err());
        assert!(amber_score(10.0, 101.0).is_err());
    }

    #[test]
    fn histogram_binning_and_overflow() {
        let mut h = Histogram::new(-20.0, 20.0, 40);
        h.add(-25.0);
        h.add(-20.0);
        h.add(0.0);
        h.add(19.999);
        h.add(20.0);
        h.add(1e9);
        assert_eq!(h.total(), 6);
        assert_eq!(h.counts[0], 1);
        assert_eq!(*h.counts.last().unwrap(), 2);
        assert_eq!(h.counts[1], 1, "lo edge lands in the first bin");
        assert_eq!(h.edges().len(), 41);
    }

    #[test]
    fn svg_is_balanced_xml() {
        let mut h = Histogram::new(-20.0, 20.0, 40);
        for i in 0..100 {
            h.add((i as f64) * 0.5 - 25.0);
        }
        let svg = histogram_svg(&h, "test");
        assert!(svg.starts_with("<svg"));
        // Tag balance: every opened element is closed or self-closing.
        let mut depth = 0i64;
        for token in svg.split('<').skip(1) {
            if token.starts_with('/') {
                depth -= 1;
            } else if !token.trim_end().contains("/>") {
                depth += 1;
            }
            assert!(depth >= 0, "unbalanced at {token}");
        }
        assert_eq!(depth, 0);
    }

    #[test]
    fn report_roundtrips_through_json() {
        let report = EvalReport::with_amber(
            Some(DiscrMetrics {
                precision: 0.5,
                recall: 1.0,
                f1: 2.0 / 3.0,
                yes_ratio: 1.0,
            }),
            Some(GenMetrics {
                chair: 7.8,
                cover: 51.0,
                hal: 36.4,
                cog: 4.2,
            }),
            None,
            None,
        )
        .unwrap();
        let line = to_jsonl_line(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, report);
        // The AMBER identity holds on every emitted report.
        let expect = (100.0 - 7.8 + (2.0 / 3.0) * 100.0) / 2.0;
        assert!((report.amber_score.unwrap() - expect).abs() < 1e-9);
    }
}
