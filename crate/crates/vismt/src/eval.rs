//! Quantitative evaluation: corpus BLEU, the visual agreement distance
//! split over visual/non-visual pairs, aligner accuracy against gold links,
//! and gate separation diagnostics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::aligner::{align_argmax, AlignmentTable};
use crate::corpus::{Instance, Side};
use crate::error::{Error, Result};
use crate::model::TraceValues;

// ── BLEU ────────────────────────────────────────────────────────────────

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions times the brevity penalty. Precisions for n >= 2 are add-one
/// smoothed; unigram precision is raw, so zero lexical overlap scores 0.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::contract("bleu: empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let max_n = max_n.max(1);
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                correct[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (c, t) = (correct[n - 1] as f64, total[n - 1] as f64);
        let p = if n == 1 {
            if c == 0.0 {
                return Ok(0.0);
            }
            c / t
        } else if t == 0.0 {
            1.0
        } else {
            (c + 1.0) / (t + 1.0)
        };
        log_sum += p.ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_sum / max_n as f64).exp())
}

// ── Visual agreement distance ───────────────────────────────────────────

/// One instance's VAD inputs: teacher-forced traces of both directions and
/// the word pairs to compare, each flagged visual or not.
pub struct VadInput {
    pub id: String,
    /// Forward-model trace over the target sentence.
    pub fwd: TraceValues,
    /// Backward-model trace over the source sentence.
    pub bwd: TraceValues,
    /// (src_index, tgt_index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub pair_visual: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VadInstance {
    pub id: String,
    pub visual_sum: f64,
    pub visual_pairs: usize,
    pub nonvisual_sum: f64,
    pub nonvisual_pairs: usize,
}

/// Mean l1 distance between paired visual-attention vectors, reported
/// separately for visual and non-visual word pairs. Empty categories are
/// left unvalued.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VadReport {
    pub vad_visual: Option<f64>,
    pub vad_nonvisual: Option<f64>,
    pub visual_pairs: usize,
    pub nonvisual_pairs: usize,
    pub per_instance: Vec<VadInstance>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

pub fn vad(inputs: &[VadInput]) -> Result<VadReport> {
    let mut per_instance = Vec::with_capacity(inputs.len());
    let mut visual_sum = 0.0;
    let mut visual_pairs = 0usize;
    let mut nonvisual_sum = 0.0;
    let mut nonvisual_pairs = 0usize;
    for input in inputs {
        if input.pairs.len() != input.pair_visual.len() {
            return Err(Error::contract(format!(
                "vad: {} pairs vs {} category flags in {}",
                input.pairs.len(),
                input.pair_visual.len(),
                input.id
            )));
        }
        let mut inst = VadInstance {
            id: input.id.clone(),
            visual_sum: 0.0,
            visual_pairs: 0,
            nonvisual_sum: 0.0,
            nonvisual_pairs: 0,
        };
        for (&(src, tgt), &is_visual) in input.pairs.iter().zip(input.pair_visual.iter()) {
            let src_attn = input.bwd.visual.get(src).ok_or_else(|| {
                Error::contract(format!("vad: source index {src} outside backward trace"))
            })?;
            let tgt_attn = input.fwd.visual.get(tgt).ok_or_else(|| {
                Error::contract(format!("vad: target index {tgt} outside forward trace"))
            })?;
            if src_attn.len() != tgt_attn.len() {
                return Err(Error::contract(
                    "vad: traces disagree on the number of regions",
                ));
            }
            let distance = l1(src_attn, tgt_attn);
            if is_visual {
                inst.visual_sum += distance;
                inst.visual_pairs += 1;
            } else {
                inst.nonvisual_sum += distance;
                inst.nonvisual_pairs += 1;
            }
        }
        visual_sum += inst.visual_sum;
        visual_pairs += inst.visual_pairs;
        nonvisual_sum += inst.nonvisual_sum;
        nonvisual_pairs += inst.nonvisual_pairs;
        per_instance.push(inst);
    }
    Ok(VadReport {
        vad_visual: (visual_pairs > 0).then(|| visual_sum / visual_pairs as f64),
        vad_nonvisual: (nonvisual_pairs > 0).then(|| nonvisual_sum / nonvisual_pairs as f64),
        visual_pairs,
        nonvisual_pairs,
        per_instance,
    })
}

/// Pairs for VAD from gold alignments, with a pair flagged visual when both
/// endpoints are visual tokens.
pub fn gold_vad_pairs(instance: &Instance) -> Result<(Vec<(usize, usize)>, Vec<bool>)> {
    let align = instance
        .gold_align
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{}: gold_align missing", instance.id)))?;
    let src_mask = instance
        .visual_mask(Side::Src)
        .ok_or_else(|| Error::contract(format!("{}: visual_mask_src missing", instance.id)))?;
    let tgt_mask = instance
        .visual_mask(Side::Tgt)
        .ok_or_else(|| Error::contract(format!("{}: visual_mask_tgt missing", instance.id)))?;
    let flags = align
        .iter()
        .map(|&(s, t)| src_mask[s] && tgt_mask[t])
        .collect();
    Ok((align.clone(), flags))
}

// ── Aligner accuracy ────────────────────────────────────────────────────

/// Fraction of gold one-to-one visual links whose source word the table's
/// argmax recovers. Links whose endpoints occur in more than one gold link
/// (multi-word phrases) are excluded.
pub fn aligner_accuracy(table: &AlignmentTable, instances: &[Instance]) -> Result<f64> {
    let mut checked = 0usize;
    let mut hit = 0usize;
    for instance in instances {
        let align = instance
            .gold_align
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{}: gold_align missing", instance.id)))?;
        let src_mask = instance
            .visual_mask(Side::Src)
            .ok_or_else(|| Error::contract(format!("{}: visual_mask_src missing", instance.id)))?;
        let tgt_mask = instance
            .visual_mask(Side::Tgt)
            .ok_or_else(|| Error::contract(format!("{}: visual_mask_tgt missing", instance.id)))?;
        let mut src_degree = vec![0usize; instance.src.len()];
        let mut tgt_degree = vec![0usize; instance.tgt.len()];
        for &(s, t) in align {
            src_degree[s] += 1;
            tgt_degree[t] += 1;
        }
        for &(s, t) in align {
            if src_degree[s] != 1 || tgt_degree[t] != 1 || !src_mask[s] || !tgt_mask[t] {
                continue;
            }
            checked += 1;
            if align_argmax(table, &instance.tgt[t], &instance.src) == s {
                hit += 1;
            }
        }
    }
    if checked == 0 {
        return Err(Error::contract(
            "aligner_accuracy: no one-to-one visual links in the corpus",
        ));
    }
    Ok(hit as f64 / checked as f64)
}

// ── Gate separation ─────────────────────────────────────────────────────

/// Mean of the visual-dependence gate over visual vs non-visual target
/// tokens (the end-marker step carries no mask entry and is skipped).
pub fn beta_separation(
    traces: &[TraceValues],
    masks: &[Vec<bool>],
) -> (Option<f64>, Option<f64>) {
    let mut visual = (0.0, 0usize);
    let mut nonvisual = (0.0, 0usize);
    for (trace, mask) in traces.iter().zip(masks.iter()) {
        for (pos, &is_visual) in mask.iter().enumerate() {
            let Some(&beta) = trace.beta.get(pos) else {
                continue;
            };
            if is_visual {
                visual.0 += beta;
                visual.1 += 1;
            } else {
                nonvisual.0 += beta;
                nonvisual.1 += 1;
            }
        }
    }
    (
        (visual.1 > 0).then(|| visual.0 / visual.1 as f64),
        (nonvisual.1 > 0).then(|| nonvisual.0 / nonvisual.1 as f64),
    )
}
