//! Ranking statistics for model comparison: ROC-AUC in Mann-Whitney form,
//! percentile bootstrap confidence intervals, a paired bootstrap test for
//! AUC differences, and DeLong's test as the parametric cross-check.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Scores and binary labels for one model on one label, with example ids
/// kept for pairing across models.
#[derive(Clone, Debug)]
pub struct ScoredSet {
    pub example_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(example_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if example_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::contract(format!(
                "misaligned set: {} ids, {} scores, {} labels",
                example_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::contract(format!("label {l} is not binary")));
        }
        Ok(ScoredSet {
            example_ids,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn check_aligned(&self, other: &ScoredSet) -> Result<()> {
        if self.example_ids != other.example_ids {
            return Err(Error::contract("example ids do not align across sets"));
        }
        if self.labels != other.labels {
            return Err(Error::contract("labels disagree on shared example ids"));
        }
        Ok(())
    }
}

/// Probability that a random positive outscores a random negative, ties
/// credited one half. Computed from midranks in one sort.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    auc_from(&set.scores, &set.labels)
}

fn auc_from(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives / {n_neg} negatives"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut start = 0;
    while start < n {
        let v = scores[idx[start]];
        let mut end = start + 1;
        while end < n && scores[idx[end]] == v {
            end += 1;
        }
        // Midrank of a tie group spanning 1-based ranks start+1 ..= end.
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            if labels[i] == 1 {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

fn resample_indices<R: Rng>(n: usize, labels: &[u8], rng: &mut R) -> Vec<usize> {
    // Redraw until both classes are present; terminates almost surely
    // because the source set holds at least one of each.
    loop {
        let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let pos = draw.iter().any(|&i| labels[i] == 1);
        let neg = draw.iter().any(|&i| labels[i] == 0);
        if pos && neg {
            return draw;
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile bootstrap CI for the AUC: resample examples with replacement
/// `n_iter` times (single-class resamples are redrawn) and take the
/// ((1-level)/2, 1-(1-level)/2) percentiles.
pub fn bootstrap_ci<R: Rng>(
    set: &ScoredSet,
    n_iter: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_iter == 0 {
        return Err(Error::contract("bootstrap needs at least one iteration"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::contract(format!("confidence level {level} not in (0,1)")));
    }
    roc_auc(set)?;
    let n = set.len();
    let mut aucs = Vec::with_capacity(n_iter);
    let mut s = vec![0.0f64; n];
    let mut l = vec![0u8; n];
    for _ in 0..n_iter {
        let draw = resample_indices(n, &set.labels, rng);
        for (k, &i) in draw.iter().enumerate() {
            s[k] = set.scores[i];
            l[k] = set.labels[i];
        }
        aucs.push(auc_from(&s, &l).expect("resample has both classes"));
    }
    aucs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&aucs, alpha), percentile(&aucs, 1.0 - alpha)))
}

/// Grouped variant: resamples whole groups (for example patients) with
/// replacement instead of single examples. `group_of[i]` names example i's
/// group.
pub fn bootstrap_ci_grouped<R: Rng>(
    set: &ScoredSet,
    group_of: &[String],
    n_iter: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if group_of.len() != set.len() {
        return Err(Error::contract("group list does not align with the set"));
    }
    if n_iter == 0 {
        return Err(Error::contract("bootstrap needs at least one iteration"));
    }
    roc_auc(set)?;
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_of.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = members.values().collect();
    let mut aucs = Vec::with_capacity(n_iter);
    loop {
        let mut s = Vec::with_capacity(set.len());
        let mut l = Vec::with_capacity(set.len());
        for _ in 0..groups.len() {
            let g = groups[rng.random_range(0..groups.len())];
            for &i in g {
                s.push(set.scores[i]);
                l.push(set.labels[i]);
            }
        }
        if let Ok(a) = auc_from(&s, &l) {
            aucs.push(a);
            if aucs.len() == n_iter {
                break;
            }
        }
    }
    aucs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&aucs, alpha), percentile(&aucs, 1.0 - alpha)))
}

/// Paired bootstrap for AUC(a) - AUC(b) over identical examples: returns
/// the observed difference and the one-sided p-value, the fraction of
/// resamples in which the difference is not positive.
pub fn paired_bootstrap_diff<R: Rng>(
    set_a: &ScoredSet,
    set_b: &ScoredSet,
    n_iter: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    set_a.check_aligned(set_b)?;
    if n_iter == 0 {
        return Err(Error::contract("bootstrap needs at least one iteration"));
    }
    let diff = roc_auc(set_a)? - roc_auc(set_b)?;
    let n = set_a.len();
    let mut not_positive = 0usize;
    let mut sa = vec![0.0f64; n];
    let mut sb = vec![0.0f64; n];
    let mut l = vec![0u8; n];
    for _ in 0..n_iter {
        let draw = resample_indices(n, &set_a.labels, rng);
        for (k, &i) in draw.iter().enumerate() {
            sa[k] = set_a.scores[i];
            sb[k] = set_b.scores[i];
            l[k] = set_a.labels[i];
        }
        let da = auc_from(&sa, &l).expect("resample has both classes");
        let db = auc_from(&sb, &l).expect("resample has both classes");
        if da - db <= 0.0 {
            not_positive += 1;
        }
    }
    Ok((diff, not_positive as f64 / n_iter as f64))
}

/// Placement values: for each positive, the fraction of negatives it beats
/// (ties half); and symmetrically for negatives.
fn placements(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == 1 {
            pos.push(scores[i]);
        } else {
            neg.push(scores[i]);
        }
    }
    let mut sorted_neg = neg.clone();
    sorted_neg.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sorted_pos = pos.clone();
    sorted_pos.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let frac = |sorted: &[f64], v: f64| {
        let less = sorted.partition_point(|&x| x < v);
        let leq = sorted.partition_point(|&x| x <= v);
        (less as f64 + 0.5 * (leq - less) as f64) / sorted.len() as f64
    };
    let v10: Vec<f64> = pos.iter().map(|&v| frac(&sorted_neg, v)).collect();
    // For negatives: fraction of positives they are beaten by.
    let v01: Vec<f64> = neg
        .iter()
        .map(|&v| {
            let more = sorted_pos.len() - sorted_pos.partition_point(|&x| x <= v);
            let eq = sorted_pos.partition_point(|&x| x <= v) - sorted_pos.partition_point(|&x| x < v);
            (more as f64 + 0.5 * eq as f64) / sorted_pos.len() as f64
        })
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1.0)
}

/// DeLong's paired test for AUC(a) != AUC(b): returns (z, two-sided p).
/// A zero statistic (including identical sets) reports p = 1.
pub fn delong_test(set_a: &ScoredSet, set_b: &ScoredSet) -> Result<(f64, f64)> {
    set_a.check_aligned(set_b)?;
    let n_pos = set_a.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = set_a.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::UndefinedMetric(format!(
            "DeLong needs at least two of each class, got {n_pos} positives / {n_neg} negatives"
        )));
    }
    let auc_a = roc_auc(set_a)?;
    let auc_b = roc_auc(set_b)?;
    let (v10_a, v01_a) = placements(&set_a.scores, &set_a.labels);
    let (v10_b, v01_b) = placements(&set_b.scores, &set_b.labels);
    let var = (covariance(&v10_a, &v10_a) + covariance(&v10_b, &v10_b)
        - 2.0 * covariance(&v10_a, &v10_b))
        / n_pos as f64
        + (covariance(&v01_a, &v01_a) + covariance(&v01_b, &v01_b)
            - 2.0 * covariance(&v01_a, &v01_b))
            / n_neg as f64;
    let diff = auc_a - auc_b;
    if diff == 0.0 || var <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = diff / var.sqrt();
    let norm = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * (1.0 - norm.cdf(z.abs()));
    Ok((z, p.clamp(0.0, 1.0)))
}

/// Elementwise mean of aligned score sets; labels unchanged.
pub fn score_average(sets: &[ScoredSet]) -> Result<ScoredSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero sets"))?;
    for s in &sets[1..] {
        first.check_aligned(s)?;
    }
    let mut scores = vec![0.0f64; first.len()];
    for s in sets {
        for (acc, v) in scores.iter_mut().zip(&s.scores) {
            *acc += v;
        }
    }
    for v in &mut scores {
        *v /= sets.len() as f64;
    }
    ScoredSet::new(first.example_ids.clone(), scores, first.labels.clone())
}

pub const SCORES_HEADER: [&str; 4] = ["example_id", "label_name", "score", "true_label"];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub example_id: String,
    pub label_name: String,
    pub score: f64,
    pub true_label: u8,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(SCORES_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.example_id.as_str(),
            r.label_name.as_str(),
            &r.score.to_string(),
            &r.true_label.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers != SCORES_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {SCORES_HEADER:?}, got {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let score: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("score {:?} is not a number", &rec[2]),
        })?;
        let true_label: u8 = match &rec[3] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("true_label {other:?} is not 0/1"),
                })
            }
        };
        out.push(ScoreRow {
            example_id: rec[0].to_string(),
            label_name: rec[1].to_string(),
            score,
            true_label,
        });
    }
    Ok(out)
}

/// Group score rows into per-label sets, ordered by example_id within each
/// label so sets from different models align.
pub fn group_scores(rows: &[ScoreRow]) -> Result<BTreeMap<String, ScoredSet>> {
    let mut grouped: BTreeMap<String, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.label_name.clone()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (label, mut rows) in grouped {
        rows.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        for pair in rows.windows(2) {
            if pair[0].example_id == pair[1].example_id {
                return Err(Error::Integrity(format!(
                    "duplicate example_id {:?} for label {label:?}",
                    pair[0].example_id
                )));
            }
        }
        let set = ScoredSet::new(
            rows.iter().map(|r| r.example_id.clone()).collect(),
            rows.iter().map(|r| r.score).collect(),
            rows.iter().map(|r| r.true_label).collect(),
        )?;
        out.insert(label, set);
    }
    Ok(out)
}
