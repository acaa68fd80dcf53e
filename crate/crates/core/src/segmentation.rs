//! Deterministic query decomposition and trigger-key insertion.

use crate::error::{Error, Result};
use crate::types::Segment;

/// A labeled query: ordered segments plus the aligned account mask.
///
/// Segments are supplied by the scenario with all key flags false; the
/// account mask is a label, never inferred from text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    segments: Vec<Segment>,
    account_mask: Vec<bool>,
}

impl QuerySpec {
    /// Build a query from raw segment texts and the aligned account mask.
    pub fn new(texts: Vec<String>, account_mask: Vec<bool>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Validation(
                "query must contain at least one segment".to_string(),
            ));
        }
        if texts.len() != account_mask.len() {
            return Err(Error::Validation(format!(
                "account_mask length {} does not match segment count {}",
                account_mask.len(),
                texts.len()
            )));
        }
        let segments = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Segment {
                index: i + 1,
                text,
                is_account: account_mask[i],
                has_key: false,
            })
            .collect();
        Ok(QuerySpec {
            segments,
            account_mask,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn account_mask(&self) -> &[bool] {
        &self.account_mask
    }

    /// Account mask as a real-valued affinity vector for the counterpart
    /// optimizer.
    pub fn affinity_vector(&self) -> Vec<f64> {
        self.account_mask
            .iter()
            .map(|&flag| if flag { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Decompose the query into its segment sequence. Pure and deterministic:
/// returns the stored segments verbatim.
pub fn segment(query: &QuerySpec) -> Vec<Segment> {
    query.segments.clone()
}

/// Insert the trigger key into exactly one segment: segment `key_index`'s
/// text becomes `text ∥ key` and its key flag is set; all other segments are
/// returned unchanged.
pub fn insert_key(segments: &[Segment], key_index: usize, key: &str) -> Result<Vec<Segment>> {
    if key_index < 1 || key_index > segments.len() {
        return Err(Error::IndexOutOfRange {
            index: key_index,
            count: segments.len(),
        });
    }
    if let Some(existing) = segments.iter().find(|s| s.has_key) {
        return Err(Error::DuplicateKey(existing.index));
    }
    let mut out = segments.to_vec();
    let target = &mut out[key_index - 1];
    if !key.is_empty() {
        // Single-space separator keeps the key lexically isolated for
        // exact-match checks.
        target.text = format!("{} {}", target.text, key);
    }
    target.has_key = true;
    Ok(out)
}
