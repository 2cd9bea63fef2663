//! Text generation metrics: ROUGE-1/2/L, token F1, word error rate, label
//! accuracy and BLEU-4.
//!
//! All metrics tokenize on whitespace after lower-casing. No stemming.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, refs: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum()
}

fn f_score(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    match (cand_total, ref_total) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / cand_total as f64;
            let r = overlap as f64 / ref_total as f64;
            2.0 * p * r / (p + r)
        }
    }
}

/// ROUGE-N F1 (harmonic mean of n-gram precision and recall).
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let overlap = clipped_overlap(&cc, &rc);
    f_score(overlap, c.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    f_score(lcs_len(&c, &r), c.len(), r.len())
}

fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of one pair. The reference must be non-empty.
pub fn wer(hypothesis: &str, reference: &str) -> Result<f64> {
    let (e, n) = wer_counts(hypothesis, reference)?;
    Ok(e as f64 / n as f64)
}

/// `(edits, reference length)` for pooling into a corpus-level WER.
pub fn wer_counts(hypothesis: &str, reference: &str) -> Result<(usize, usize)> {
    let (h, r) = (tokens(hypothesis), tokens(reference));
    if r.is_empty() {
        return Err(Error::Value("word error rate is undefined for an empty reference".into()));
    }
    Ok((edit_distance(&h, &r), r.len()))
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut e, mut n) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (de, dn) = wer_counts(h, r)?;
        e += de;
        n += dn;
    }
    if n == 0 {
        return Err(Error::Value("word error rate over an empty corpus".into()));
    }
    Ok(e as f64 / n as f64)
}

/// Bag-of-tokens F1 with clipped multiplicities.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let overlap = clipped_overlap(&ngram_counts(&c, 1), &ngram_counts(&r, 1));
    f_score(overlap, c.len(), r.len())
}

/// Maps a free-form generation onto a label: the exact label if present,
/// otherwise the label with the highest token F1 (first label wins ties).
pub fn label_of_generation(generated: &str, label_set: &[String]) -> String {
    if let Some(l) = label_set.iter().find(|l| l.as_str() == generated) {
        return l.clone();
    }
    let mut best = 0;
    let mut best_f = f64::NEG_INFINITY;
    for (i, l) in label_set.iter().enumerate() {
        let f = token_f1(generated, l);
        if f > best_f {
            best_f = f;
            best = i;
        }
    }
    label_set.get(best).cloned().unwrap_or_default()
}

/// Fraction of generations whose mapped label equals the reference label.
pub fn label_accuracy(generations: &[String], references: &[String], label_set: &[String]) -> Result<f64> {
    if generations.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} generations for {} references",
            generations.len(),
            references.len()
        )));
    }
    if generations.is_empty() {
        return Ok(0.0);
    }
    let hits = generations
        .iter()
        .zip(references)
        .filter(|(g, r)| label_of_generation(g, label_set) == **r)
        .count();
    Ok(hits as f64 / generations.len() as f64)
}

/// Modified n-gram precision `(matches, total)` against several references.
fn bleu_precision(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let cc = ngram_counts(cand, n);
    let total = cand.len().saturating_sub(n - 1);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    (clipped_overlap(&cc, &max_ref), total)
}

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times the
/// brevity penalty.
///
/// Smoothing: for n ≥ 2, an order with zero matches uses `(0+1)/(total+1)`.
/// Unigram precision is never smoothed, so a candidate with no word in common
/// with any reference scores 0.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand = tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = bleu_precision(&cand, &refs, n);
        let p = if m == 0 {
            if n == 1 {
                return 0.0;
            }
            1.0 / (t + 1) as f64
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    // closest reference length, shorter wins ties
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

pub const METRIC_NAMES: [&str; 7] = ["rouge1", "rouge2", "rougeL", "f1", "wer", "accuracy", "bleu4"];

/// Averaged metric scores over a set of examples. WER is corpus level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub scores: BTreeMap<String, f64>,
}

/// Computes the named metrics over aligned generations and references.
/// Label accuracy uses the distinct references as the label set.
pub fn evaluate(generations: &[String], references: &[String], metrics: &[&str]) -> Result<EvalReport> {
    if generations.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} generations for {} references",
            generations.len(),
            references.len()
        )));
    }
    for m in metrics {
        if !METRIC_NAMES.contains(m) {
            return Err(Error::Usage(format!(
                "unknown metric `{m}`; valid metrics: {}",
                METRIC_NAMES.join(", ")
            )));
        }
    }
    let n = generations.len();
    let mean = |f: &dyn Fn(&str, &str) -> f64| -> f64 {
        if n == 0 {
            return 0.0;
        }
        generations
            .iter()
            .zip(references)
            .map(|(g, r)| f(g, r))
            .sum::<f64>()
            / n as f64
    };
    let mut scores = BTreeMap::new();
    for &m in metrics {
        let v = match m {
            "rouge1" => mean(&|g, r| rouge_n(g, r, 1)),
            "rouge2" => mean(&|g, r| rouge_n(g, r, 2)),
            "rougeL" => mean(&|g, r| rouge_l(g, r)),
            "f1" => mean(&|g, r| token_f1(g, r)),
            "bleu4" => mean(&|g, r| bleu4(g, &[r])),
            "wer" => corpus_wer(generations, references)?,
            "accuracy" => {
                let mut labels: Vec<String> = Vec::new();
                for r in references {
                    if !labels.contains(r) {
                        labels.push(r.clone());
                    }
                }
                label_accuracy(generations, references, &labels)?
            }
            _ => unreachable!("validated above"),
        };
        scores.insert(m.to_string(), v);
    }
    Ok(EvalReport { count: n, scores })
}
