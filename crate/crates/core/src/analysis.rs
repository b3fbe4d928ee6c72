//! Redundancy and acceptance analyses over decoded trajectories.

use std::io::{BufRead, Write};

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafter::DraftMode;
use crate::model::{DenseDistribution, ModelError, TargetModel};
use crate::store::NGramStore;
use crate::TokenId;

pub const OVERLAP_FORMAT: &str = "stand-overlap";
pub const OVERLAP_VERSION: u32 = 1;
pub const TRAJECTORIES_FORMAT: &str = "stand-trajectories";
pub const TRAJECTORIES_VERSION: u32 = 1;

/// Gram lengths covered by [`overlap_report`].
pub const REPORT_GRAMS: std::ops::RangeInclusive<usize> = 2..=5;

/// Width of the sibling group used by the acceptance probe.
pub const PROBE_WIDTH: usize = 3;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("n must be at least 2, got {0}")]
    GramTooShort(usize),
    #[error("no {0}-grams in the input")]
    NoGrams(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported trajectory file: format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Occurrence and type counts of the pooled n-grams of a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GramCounts {
    pub occurrences: u64,
    /// Occurrences whose n-gram appears at least twice in the pool.
    pub repeated_occurrences: u64,
    pub distinct: u64,
    /// Distinct n-grams appearing at least twice.
    pub repeated_types: u64,
}

impl GramCounts {
    pub fn overlap_pct(&self) -> f64 {
        100.0 * self.repeated_occurrences as f64 / self.occurrences as f64
    }

    pub fn distinct_overlap_pct(&self) -> f64 {
        100.0 * self.repeated_types as f64 / self.distinct as f64
    }
}

pub fn gram_counts<S: AsRef<[TokenId]>>(trajectories: &[S], n: usize) -> GramCounts {
    let mut table: FxHashMap<&[TokenId], u64> = FxHashMap::default();
    for t in trajectories {
        for gram in t.as_ref().windows(n) {
            *table.entry(gram).or_insert(0) += 1;
        }
    }
    let mut counts = GramCounts { distinct: table.len() as u64, ..Default::default() };
    for &c in table.values() {
        counts.occurrences += c;
        if c >= 2 {
            counts.repeated_occurrences += c;
            counts.repeated_types += 1;
        }
    }
    counts
}

/// Percentage of pooled n-gram occurrences whose n-gram occurs at least twice
/// (duplicates counted every time they occur).
pub fn overlap<S: AsRef<[TokenId]>>(trajectories: &[S], n: usize) -> Result<f64, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::GramTooShort(n));
    }
    let counts = gram_counts(trajectories, n);
    if counts.occurrences == 0 {
        return Err(AnalysisError::NoGrams(n));
    }
    Ok(counts.overlap_pct())
}

/// Percentage of distinct n-grams that occur at least twice.
pub fn distinct_overlap<S: AsRef<[TokenId]>>(trajectories: &[S], n: usize) -> Result<f64, AnalysisError> {
    if n < 2 {
        return Err(AnalysisError::GramTooShort(n));
    }
    let counts = gram_counts(trajectories, n);
    if counts.occurrences == 0 {
        return Err(AnalysisError::NoGrams(n));
    }
    Ok(counts.distinct_overlap_pct())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    /// Number of trajectories pooled (the first `k` of the input).
    pub k: usize,
    pub n: usize,
    pub overlap_pct: f64,
    pub distinct_overlap_pct: f64,
    #[serde(flatten)]
    pub counts: GramCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub format: String,
    pub version: u32,
    pub trajectories: usize,
    pub token_counts: Vec<usize>,
    /// Rows for every `k` in `1..=trajectories` and `n` in 2..=5 that has n-grams.
    pub rows: Vec<OverlapRow>,
}

pub fn overlap_report<S: AsRef<[TokenId]>>(trajectories: &[S]) -> OverlapReport {
    let mut rows = Vec::new();
    for k in 1..=trajectories.len() {
        for n in REPORT_GRAMS {
            let counts = gram_counts(&trajectories[..k], n);
            if counts.occurrences > 0 {
                rows.push(OverlapRow {
                    k,
                    n,
                    overlap_pct: counts.overlap_pct(),
                    distinct_overlap_pct: counts.distinct_overlap_pct(),
                    counts,
                });
            }
        }
    }
    OverlapReport {
        format: OVERLAP_FORMAT.into(),
        version: OVERLAP_VERSION,
        trajectories: trajectories.len(),
        token_counts: trajectories.iter().map(|t| t.as_ref().len()).collect(),
        rows,
    }
}

impl OverlapReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,n,overlap_pct,distinct_overlap_pct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.k, r.n, r.overlap_pct, r.distinct_overlap_pct));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    tokens: Vec<TokenId>,
}

/// First line of a trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFileHeader {
    pub format: String,
    pub version: u32,
}

impl Default for TrajectoryFileHeader {
    fn default() -> Self {
        Self { format: TRAJECTORIES_FORMAT.into(), version: TRAJECTORIES_VERSION }
    }
}

/// Reads JSON-lines trajectories: one object with a `tokens` array per line,
/// other fields ignored. An optional header line must name a known version.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Vec<TokenId>>, AnalysisError> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| AnalysisError::Parse { line: i + 1, message: e.to_string() };
        if std::mem::take(&mut first) {
            let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
            if value.get("format").is_some() {
                let header: TrajectoryFileHeader = serde_json::from_value(value).map_err(parse_err)?;
                if header != TrajectoryFileHeader::default() {
                    return Err(AnalysisError::Version { format: header.format, version: header.version });
                }
                continue;
            }
        }
        let parsed: TrajectoryLine = serde_json::from_str(&line).map_err(parse_err)?;
        out.push(parsed.tokens);
    }
    Ok(out)
}

pub fn write_trajectories<W: Write, S: AsRef<[TokenId]>>(trajectories: &[S], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(&TrajectoryFileHeader::default()).expect("header serializes"))?;
    for t in trajectories {
        let line = TrajectoryLine { tokens: t.as_ref().to_vec() };
        writeln!(out, "{}", serde_json::to_string(&line).expect("trajectory serializes"))?;
    }
    out.flush()
}

/// Exact probability that some sibling is accepted when `width` siblings are
/// drafted from `candidates` and verified against `p`.
///
/// Stochastic mode averages over every ordered without-replacement draw and
/// the residual updates after each rejection; deterministic mode drafts the
/// top `width` candidates with one-hot `q`, which sums their target mass.
pub fn expected_acceptance(p: &DenseDistribution, candidates: &[(TokenId, f64)], width: usize, mode: DraftMode) -> f64 {
    let positive: Vec<(TokenId, f64)> = candidates.iter().copied().filter(|(_, q)| *q > 0.0).collect();
    match mode {
        DraftMode::Deterministic => {
            let mut sorted = positive;
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sorted.iter().take(width).map(|(t, _)| p.prob(*t)).sum::<f64>().min(1.0)
        }
        DraftMode::Stochastic => stochastic_acceptance(p.probs(), &positive, width),
    }
}

fn stochastic_acceptance(p: &[f64], candidates: &[(TokenId, f64)], width: usize) -> f64 {
    let total: f64 = candidates.iter().map(|(_, q)| q).sum();
    if width == 0 || candidates.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, &(x, qx)) in candidates.iter().enumerate() {
        let q_norm = qx / total;
        let accept = (p[x as usize] / q_norm).min(1.0);
        let mut continuation = 0.0;
        if accept < 1.0 && width > 1 {
            let mut residual: Vec<f64> = p.to_vec();
            for &(t, q) in candidates {
                residual[t as usize] = (residual[t as usize] - q / total).max(0.0);
            }
            residual[x as usize] = 0.0;
            let mass: f64 = residual.iter().sum();
            if mass > crate::verifier::RESIDUAL_EPS {
                residual.iter_mut().for_each(|v| *v /= mass);
                let rest: Vec<(TokenId, f64)> =
                    candidates.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| *c).collect();
                continuation = stochastic_acceptance(&residual, &rest, width - 1);
            }
        }
        acc += q_norm * (accept + (1.0 - accept) * continuation);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: DraftMode,
    /// Expected acceptance probability for each context with a store hit.
    pub per_context: Vec<f64>,
    pub misses: usize,
    pub mean: f64,
}

/// Expected acceptance probability of a depth-1, width-3 draft at each
/// context; contexts whose store lookup misses are counted and skipped.
pub fn acceptance_probe<M: TargetModel + ?Sized, S: AsRef<[TokenId]>>(
    target: &M,
    store: &NGramStore,
    contexts: &[S],
    mode: DraftMode,
) -> Result<ProbeReport, AnalysisError> {
    let mut per_context = Vec::with_capacity(contexts.len());
    let mut misses = 0;
    for ctx in contexts {
        let ctx = ctx.as_ref();
        let Some(hit) = store.lookup(ctx) else {
            misses += 1;
            continue;
        };
        let p = target.next_distribution(ctx)?;
        per_context.push(expected_acceptance(&p, hit.dist.entries(), PROBE_WIDTH, mode));
    }
    let mean = if per_context.is_empty() { 0.0 } else { per_context.iter().sum::<f64>() / per_context.len() as f64 };
    Ok(ProbeReport { mode, per_context, misses, mean })
}

/// Samples `count` probe contexts: each is `prompt` followed by an
/// autoregressive continuation of uniformly random length in `1..=max_len`.
pub fn sample_contexts<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &M,
    prompt: &[TokenId],
    count: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>, AnalysisError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.random_range(1..=max_len.max(1));
        let mut ctx = prompt.to_vec();
        for _ in 0..len {
            let p = target.next_distribution(&ctx)?;
            ctx.push(p.sample(rng));
        }
        out.push(ctx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_sequence_is_fully_repeated() {
        assert_eq!(overlap(&[vec![0, 1, 0, 1, 0, 1]], 2).unwrap(), 100.0);
        assert_eq!(overlap(&[vec![0, 1, 2, 3, 4, 5]], 2).unwrap(), 0.0);
        assert!(matches!(overlap(&[vec![1, 2]], 3), Err(AnalysisError::NoGrams(3))));
        assert!(matches!(overlap(&[vec![1, 2]], 1), Err(AnalysisError::GramTooShort(1))));
    }

    #[test]
    fn duplicated_trajectory_is_fully_repeated() {
        let t = vec![4, 8, 1, 9, 3, 3, 7];
        for n in 2..=5 {
            assert_eq!(overlap(&[t.clone(), t.clone()], n).unwrap(), 100.0);
        }
    }

    #[test]
    fn distinct_overlap_counts_types() {
        // Bigrams: (1,2) x2, (2,1) x1, (2,3) x1.
        let corpus = [vec![1, 2, 1, 2, 3]];
        assert_eq!(overlap(&corpus, 2).unwrap(), 50.0);
        assert!((distinct_overlap(&corpus, 2).unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_rows_and_csv() {
        let report = overlap_report(&[vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3]]);
        assert!(report.rows.iter().any(|r| r.k == 2 && r.n == 3 && r.overlap_pct == 100.0 * 2.0 / 5.0));
        assert!(report.to_csv().starts_with("k,n,overlap_pct"));
        // k = 2 has no 4-grams from the short trajectory but still rows from the first.
        assert_eq!(report.rows.iter().filter(|r| r.k == 2).count(), 4);
    }

    #[test]
    fn trajectory_file_round_trip() {
        let corpus = vec![vec![1, 2, 3], vec![], vec![7]];
        let mut buf = Vec::new();
        write_trajectories(&corpus, &mut buf).unwrap();
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), corpus);
        assert!(read_trajectories("{\"tokens\":[1,\"x\"]}\n".as_bytes()).is_err());
        assert_eq!(read_trajectories("{\"tokens\":[4,5],\"mode\":\"x\"}\n".as_bytes()).unwrap(), vec![vec![4, 5]]);
        let future = "{\"format\":\"stand-trajectories\",\"version\":2}\n{\"tokens\":[1]}\n";
        assert!(matches!(read_trajectories(future.as_bytes()), Err(AnalysisError::Version { .. })));
    }

    #[test]
    fn exact_store_gives_full_acceptance_in_stochastic_mode() {
        let p = DenseDistribution::new(vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05, 0.0, 0.0]).unwrap();
        let cands = p.top_k(10);
        assert!((expected_acceptance(&p, &cands, 3, DraftMode::Stochastic) - 1.0).abs() < 1e-12);
        assert!((expected_acceptance(&p, &cands, 3, DraftMode::Deterministic) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_hot_target_matching_top1_accepts_surely() {
        let p = DenseDistribution::one_hot(8, 2);
        let cands = [(2, 1.0)];
        for mode in [DraftMode::Stochastic, DraftMode::Deterministic] {
            assert!((expected_acceptance(&p, &cands, 3, mode) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sibling_matches_min_ratio_sum() {
        let p = DenseDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let cands = [(0, 0.8), (1, 0.1), (2, 0.1)];
        let expected: f64 = cands.iter().map(|(t, q)| q * (p.prob(*t) / q).min(1.0)).sum();
        assert!((expected_acceptance(&p, &cands, 1, DraftMode::Stochastic) - expected).abs() < 1e-12);
    }
}
