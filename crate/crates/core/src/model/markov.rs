use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{apply_temperature, check_context, DenseDistribution, ModelError, TargetModel};
use crate::TokenId;

/// Largest transition table (rows x vocab entries) a Markov spec may allocate.
const MAX_TABLE_ENTRIES: usize = 1 << 24;

/// A repeated token phrase injected into the base chain.
///
/// Whenever the context ends with a proper prefix of `tokens`, the phrase's
/// next token receives `prob` of the mass before temperature is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub tokens: Vec<TokenId>,
    pub prob: f64,
}

/// On-disk model spec: `{"vocab_size", "order", "rows": {"ctx": [...]}, "patterns": [...]}`.
///
/// Row keys are comma-separated context tokens (`"3"`, `"3,5"`); the empty key
/// `""` is the start distribution used for contexts shorter than `order`.
/// Missing rows are uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpecFile {
    pub vocab_size: usize,
    pub order: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub patterns: Vec<Pattern>,
}

/// Validated transition structure of a synthetic Markov language model.
///
/// Rows are base (temperature 1) probabilities; the table is shared behind an
/// `Arc` so many problems can reuse one family's rows with different patterns.
#[derive(Clone, Debug)]
pub struct MarkovModelSpec {
    vocab_size: usize,
    order: usize,
    table: Arc<Vec<f64>>,
    start: Vec<f64>,
    patterns: Vec<Pattern>,
    /// For each token `t`, `(pattern, j)` pairs with `pattern.tokens[j - 1] == t`,
    /// sorted by descending `j` within each pattern.
    by_last: Vec<Vec<(usize, usize)>>,
}

impl MarkovModelSpec {
    /// Builds a spec from a flat row-major table of `vocab_size^order` rows.
    pub fn from_table(
        vocab_size: usize,
        order: usize,
        table: Arc<Vec<f64>>,
        start: Option<Vec<f64>>,
        patterns: Vec<Pattern>,
    ) -> Result<Self, ModelError> {
        if vocab_size < 2 {
            return Err(ModelError::Spec(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if order < 1 {
            return Err(ModelError::Spec("order must be >= 1".into()));
        }
        let rows = table_rows(vocab_size, order)?;
        if table.len() != rows * vocab_size {
            return Err(ModelError::Spec(format!(
                "table has {} entries, expected {}",
                table.len(),
                rows * vocab_size
            )));
        }
        for (r, row) in table.chunks(vocab_size).enumerate() {
            validate_row(row).map_err(|e| ModelError::Spec(format!("row {r}: {e}")))?;
        }
        let start = start.unwrap_or_else(|| vec![1.0 / vocab_size as f64; vocab_size]);
        if start.len() != vocab_size {
            return Err(ModelError::Spec("start row has the wrong length".into()));
        }
        validate_row(&start).map_err(|e| ModelError::Spec(format!("start row: {e}")))?;
        for (i, pattern) in patterns.iter().enumerate() {
            if pattern.tokens.len() < 2 {
                return Err(ModelError::Spec(format!("pattern {i} must have at least two tokens")));
            }
            if !(pattern.prob > 0.0 && pattern.prob <= 1.0) {
                return Err(ModelError::Spec(format!("pattern {i} probability {} not in (0, 1]", pattern.prob)));
            }
            check_context(&pattern.tokens, vocab_size)?;
        }
        let mut by_last = vec![Vec::new(); vocab_size];
        for (pi, pattern) in patterns.iter().enumerate() {
            for j in (1..pattern.tokens.len()).rev() {
                by_last[pattern.tokens[j - 1] as usize].push((pi, j));
            }
        }
        Ok(Self { vocab_size, order, table, start, patterns, by_last })
    }

    pub fn from_file_spec(file: &MarkovSpecFile) -> Result<Self, ModelError> {
        let vocab = file.vocab_size;
        let rows = table_rows(vocab.max(2), file.order.max(1))?;
        let mut table = vec![1.0 / vocab.max(1) as f64; rows * vocab];
        let mut start = None;
        for (key, row) in &file.rows {
            if row.len() != vocab {
                return Err(ModelError::Spec(format!("row {key:?} has {} entries, expected {vocab}", row.len())));
            }
            if key.trim().is_empty() {
                start = Some(row.clone());
                continue;
            }
            let ctx = parse_context_key(key)?;
            if ctx.len() != file.order {
                return Err(ModelError::Spec(format!("row key {key:?} does not have {} tokens", file.order)));
            }
            check_context(&ctx, vocab)?;
            let idx = row_index(&ctx, vocab);
            table[idx * vocab..(idx + 1) * vocab].copy_from_slice(row);
        }
        Self::from_table(vocab, file.order, Arc::new(table), start, file.patterns.clone())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let file: MarkovSpecFile =
            serde_json::from_str(&text).map_err(|e| ModelError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_file_spec(&file)
    }

    pub fn to_file_spec(&self) -> MarkovSpecFile {
        let vocab = self.vocab_size;
        let mut rows = BTreeMap::new();
        rows.insert(String::new(), self.start.clone());
        let mut ctx = vec![0; self.order];
        for (idx, row) in self.table.chunks(vocab).enumerate() {
            let mut rem = idx;
            for slot in ctx.iter_mut().rev() {
                *slot = (rem % vocab) as TokenId;
                rem /= vocab;
            }
            let key = ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
            rows.insert(key, row.to_vec());
        }
        MarkovSpecFile { vocab_size: vocab, order: self.order, rows, patterns: self.patterns.clone() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn table(&self) -> &Arc<Vec<f64>> {
        &self.table
    }

    pub fn with_patterns(&self, patterns: Vec<Pattern>) -> Result<Self, ModelError> {
        Self::from_table(self.vocab_size, self.order, Arc::clone(&self.table), Some(self.start.clone()), patterns)
    }

    /// Base (temperature-1) row plus pattern injection for `context`.
    pub fn base_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let vocab = self.vocab_size;
        let mut probs = if context.len() >= self.order {
            let idx = row_index(&context[context.len() - self.order..], vocab);
            self.table[idx * vocab..(idx + 1) * vocab].to_vec()
        } else {
            self.start.clone()
        };
        let Some(&last) = context.last() else {
            return probs;
        };
        let mut injected: Vec<(TokenId, f64)> = Vec::new();
        let mut matched_pattern = usize::MAX;
        for &(pi, j) in &self.by_last[last as usize] {
            if pi == matched_pattern || j > context.len() {
                continue;
            }
            let pattern = &self.patterns[pi];
            if context[context.len() - j..] == pattern.tokens[..j] {
                matched_pattern = pi;
                injected.push((pattern.tokens[j], pattern.prob));
            }
        }
        if injected.is_empty() {
            return probs;
        }
        let total: f64 = injected.iter().map(|(_, w)| w).sum();
        let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
        let base_weight = (1.0 - total * scale).max(0.0);
        probs.iter_mut().for_each(|p| *p *= base_weight);
        for (token, w) in injected {
            probs[token as usize] += w * scale;
        }
        probs
    }
}

/// Synthetic Markov target: a [`MarkovModelSpec`] sampled at a fixed temperature.
#[derive(Clone, Debug)]
pub struct MarkovModel {
    spec: MarkovModelSpec,
    temperature: f64,
}

impl MarkovModel {
    pub fn new(spec: MarkovModelSpec, temperature: f64) -> Result<Self, ModelError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::Spec(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { spec, temperature })
    }

    pub fn spec(&self) -> &MarkovModelSpec {
        &self.spec
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl TargetModel for MarkovModel {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError> {
        check_context(context, self.spec.vocab_size)?;
        let base = self.spec.base_distribution(context);
        Ok(DenseDistribution { probs: apply_temperature(&base, self.temperature) })
    }
}

fn table_rows(vocab_size: usize, order: usize) -> Result<usize, ModelError> {
    let mut rows: usize = 1;
    for _ in 0..order {
        rows = rows
            .checked_mul(vocab_size)
            .filter(|r| r.saturating_mul(vocab_size) <= MAX_TABLE_ENTRIES)
            .ok_or_else(|| ModelError::Spec(format!("vocab {vocab_size} with order {order} is too large")))?;
    }
    Ok(rows)
}

fn row_index(context: &[TokenId], vocab: usize) -> usize {
    context.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

fn validate_row(row: &[f64]) -> Result<(), String> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err("entries must be finite and non-negative".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(format!("mass is {total}"));
    }
    Ok(())
}

fn parse_context_key(key: &str) -> Result<Vec<TokenId>, ModelError> {
    key.split(',')
        .map(|s| s.trim().parse::<TokenId>().map_err(|e| ModelError::Spec(format!("row key {key:?}: {e}"))))
        .collect()
}
