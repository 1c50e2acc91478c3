//! Unsupervised word alignment: IBM Model 1 trained by EM.
//!
//! Provides the lexical translation probabilities consumed by the hard
//! agreement regularizer and the mutual alignment pairs used by the VAD
//! diagnostic. No NULL word: the regularizer always needs some source word.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Conditioned on target words: rows are aligner(x|y).
    Fwd,
    /// Conditioned on source words: rows are aligner(y|x).
    Bwd,
}

/// Lexical translation table t(generated | conditioning).
///
/// For the `Fwd` direction the conditioning side is the target sentence and
/// the generated side is the source sentence, so `prob(y, x)` is aligner(x|y).
#[derive(Clone, Debug)]
pub struct AlignmentTable {
    t: HashMap<String, HashMap<String, f64>>,
    pub direction: Direction,
    /// Corpus log-likelihood before each EM update, then after the last one.
    pub log_likelihoods: Vec<f64>,
    pub skipped_pairs: usize,
}

impl AlignmentTable {
    pub fn prob(&self, conditioning: &str, generated: &str) -> f64 {
        self.t
            .get(conditioning)
            .and_then(|row| row.get(generated))
            .copied()
            .unwrap_or(0.0)
    }

    /// Distribution over generated words for one conditioning word.
    pub fn row(&self, conditioning: &str) -> Option<&HashMap<String, f64>> {
        self.t.get(conditioning)
    }

    pub fn conditioning_vocab(&self) -> usize {
        self.t.len()
    }

    /// Text dump, one "conditioning generated prob" line, sorted.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let sorted: BTreeMap<&String, &HashMap<String, f64>> = self.t.iter().collect();
        for (y, row) in sorted {
            let row_sorted: BTreeMap<&String, &f64> = row.iter().collect();
            for (x, p) in row_sorted {
                writeln!(out, "{y} {x} {p:.12}").unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump())?;
        Ok(())
    }

    /// Parse a table back from the dump format.
    pub fn load(path: &Path, direction: Direction) -> Result<AlignmentTable> {
        let text = std::fs::read_to_string(path)?;
        let mut t: HashMap<String, HashMap<String, f64>> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let cond = parts.next().ok_or_else(|| parse_err("missing word"))?;
            let gen = parts
                .next()
                .ok_or_else(|| parse_err("missing second word"))?;
            let prob: f64 = parts
                .next()
                .ok_or_else(|| parse_err("missing probability"))?
                .parse()
                .map_err(|_| parse_err("bad probability"))?;
            t.entry(cond.to_string())
                .or_default()
                .insert(gen.to_string(), prob);
        }
        Ok(AlignmentTable {
            t,
            direction,
            log_likelihoods: Vec::new(),
            skipped_pairs: 0,
        })
    }
}

/// Train IBM Model 1 with `iterations` EM updates over sentence pairs given
/// as (generated side, conditioning side). Initialization is uniform over
/// co-occurring words; with zero iterations the uniform table is returned.
pub fn train_ibm1(
    pairs: &[(Vec<String>, Vec<String>)],
    iterations: usize,
    direction: Direction,
) -> Result<AlignmentTable> {
    let usable: Vec<&(Vec<String>, Vec<String>)> = pairs
        .iter()
        .filter(|(x, y)| !x.is_empty() && !y.is_empty())
        .collect();
    let skipped = pairs.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::contract("train_ibm1: no non-empty sentence pairs"));
    }

    // uniform init over the co-occurring generated vocabulary of each
    // conditioning word
    let mut co: HashMap<&str, HashSet<&str>> = HashMap::new();
    for (xs, ys) in &usable {
        for y in ys {
            let entry = co.entry(y.as_str()).or_default();
            for x in xs {
                entry.insert(x.as_str());
            }
        }
    }
    let mut t: HashMap<String, HashMap<String, f64>> = co
        .iter()
        .map(|(&y, xs)| {
            let p = 1.0 / xs.len() as f64;
            (
                y.to_string(),
                xs.iter().map(|&x| (x.to_string(), p)).collect(),
            )
        })
        .collect();

    let log_likelihood = |t: &HashMap<String, HashMap<String, f64>>| -> f64 {
        let mut ll = 0.0;
        for (xs, ys) in &usable {
            let inv_len = 1.0 / ys.len() as f64;
            for x in xs {
                let total: f64 = ys
                    .iter()
                    .map(|y| t.get(y.as_str()).and_then(|r| r.get(x.as_str())))
                    .map(|p| p.copied().unwrap_or(0.0))
                    .sum();
                ll += (total * inv_len).ln();
            }
        }
        ll
    };

    let mut lls = vec![log_likelihood(&t)];
    for _ in 0..iterations {
        let mut counts: HashMap<&str, HashMap<&str, f64>> = HashMap::new();
        let mut totals: HashMap<&str, f64> = HashMap::new();
        for (xs, ys) in &usable {
            for x in xs {
                let denom: f64 = ys
                    .iter()
                    .map(|y| t[y.as_str()][x.as_str()])
                    .sum();
                for y in ys {
                    let delta = t[y.as_str()][x.as_str()] / denom;
                    *counts
                        .entry(y.as_str())
                        .or_default()
                        .entry(x.as_str())
                        .or_insert(0.0) += delta;
                    *totals.entry(y.as_str()).or_insert(0.0) += delta;
                }
            }
        }
        for (y, row) in t.iter_mut() {
            let total = totals[y.as_str()];
            for (x, p) in row.iter_mut() {
                *p = counts[y.as_str()][x.as_str()] / total;
            }
        }
        let ll = log_likelihood(&t);
        assert!(
            ll >= lls.last().unwrap() - 1e-9,
            "EM log-likelihood decreased: {} -> {ll}",
            lls.last().unwrap()
        );
        lls.push(ll);
    }

    Ok(AlignmentTable {
        t,
        direction,
        log_likelihoods: lls,
        skipped_pairs: skipped,
    })
}

/// Index of the candidate with the highest aligner probability given the
/// conditioning word. Unseen pairs score 0; ties and all-zero rows resolve
/// to the lowest index.
pub fn align_argmax(table: &AlignmentTable, conditioning: &str, candidates: &[String]) -> usize {
    assert!(!candidates.is_empty(), "align_argmax: empty candidate list");
    let mut best = 0;
    let mut best_p = f64::NEG_INFINITY;
    for (i, cand) in candidates.iter().enumerate() {
        let p = table.prob(conditioning, cand);
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

/// Word pairs (src_index, tgt_index) where each side is the other's argmax
/// alignment in both table directions.
pub fn mutual_pairs(
    fwd: &AlignmentTable,
    bwd: &AlignmentTable,
    src: &[String],
    tgt: &[String],
) -> Vec<(usize, usize)> {
    if src.is_empty() || tgt.is_empty() {
        return Vec::new();
    }
    let best_src: Vec<usize> = tgt.iter().map(|y| align_argmax(fwd, y, src)).collect();
    let best_tgt: Vec<usize> = src.iter().map(|x| align_argmax(bwd, x, tgt)).collect();
    let mut pairs = Vec::new();
    for (j, &i) in best_src.iter().enumerate() {
        if best_tgt[i] == j {
            pairs.push((i, j));
        }
    }
    pairs
}
