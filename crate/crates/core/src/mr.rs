//! Meaning representations: slot-value pairs, parsing from the E2E surface
//! format, canonical serialization, linearization to token sequences, and
//! slot-level F-score matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowercase, trim, and collapse internal whitespace runs to single spaces.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last_was_space = true;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() {
            if !last_was_space {
                out.push(' ');
                last_was_space = true;
            }
        } else {
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
            last_was_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum MrError {
    #[error("empty slot name at byte offset {0}")]
    EmptySlotName(usize),
    #[error("empty slot value at byte offset {0}")]
    EmptySlotValue(usize),
    #[error("missing '[' in entry at byte offset {0}")]
    MissingOpenBracket(usize),
    #[error("unclosed ']' for entry starting at byte offset {0}")]
    UnclosedBracket(usize),
    #[error("unexpected character {1:?} at byte offset {0}")]
    UnexpectedChar(usize, char),
    #[error("empty string is not a valid slot name or value")]
    EmptyText,
}

/// A normalized slot name. Non-empty after normalization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotName(String);

/// A normalized slot value. Non-empty after normalization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotValue(String);

impl SlotName {
    pub fn new(raw: &str) -> Result<Self, MrError> {
        let n = normalize(raw);
        if n.is_empty() {
            return Err(MrError::EmptyText);
        }
        Ok(SlotName(n))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl SlotValue {
    pub fn new(raw: &str) -> Result<Self, MrError> {
        let n = normalize(raw);
        if n.is_empty() {
            return Err(MrError::EmptyText);
        }
        Ok(SlotValue(n))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whitespace-split tokens of the value.
    pub fn tokens(&self) -> Vec<String> {
        self.0.split(' ').map(str::to_owned).collect()
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An ordered, duplicate-free sequence of slot-value pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeaningRepresentation {
    pairs: Vec<(SlotName, SlotValue)>,
}

/// Result of parsing: the representation plus any duplicate-slot warnings.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub mr: MeaningRepresentation,
    /// Slot names that appeared more than once in the source. The first
    /// occurrence wins; later ones are dropped.
    pub duplicate_slots: Vec<SlotName>,
}

impl MeaningRepresentation {
    pub fn empty() -> Self {
        MeaningRepresentation { pairs: Vec::new() }
    }

    /// Build from pairs, keeping the first occurrence of each slot name.
    pub fn from_pairs(pairs: Vec<(SlotName, SlotValue)>) -> Self {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for (name, value) in pairs {
            if seen.insert(name.clone()) {
                kept.push((name, value));
            }
        }
        MeaningRepresentation { pairs: kept }
    }

    /// Parse the canonical `slot[value], slot[value]` format, discarding
    /// duplicate warnings.
    pub fn parse(source: &str) -> Result<Self, MrError> {
        parse_mr(source).map(|o| o.mr)
    }

    pub fn pairs(&self) -> &[(SlotName, SlotValue)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn value_of(&self, slot: &SlotName) -> Option<&SlotValue> {
        self.pairs.iter().find(|(n, _)| n == slot).map(|(_, v)| v)
    }

    pub fn slot_names(&self) -> Vec<SlotName> {
        self.pairs.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Slot names as a set, for signature comparisons.
    pub fn signature(&self) -> BTreeSet<SlotName> {
        self.pairs.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Order-insensitive equality on the slot-value pair set.
    pub fn same_pairs(&self, other: &MeaningRepresentation) -> bool {
        if self.pairs.len() != other.pairs.len() {
            return false;
        }
        let mine: BTreeSet<_> = self.pairs.iter().collect();
        other.pairs.iter().all(|p| mine.contains(p))
    }
}

impl fmt::Display for MeaningRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}[{}]", name, value)?;
        }
        Ok(())
    }
}

/// Parse the E2E native surface format: comma-separated `slot[value]` entries.
///
/// The empty string parses to the empty representation. Duplicate slot names
/// keep the first occurrence and are reported in the outcome.
pub fn parse_mr(source: &str) -> Result<ParseOutcome, MrError> {
    let bytes = source.as_bytes();
    let mut pairs: Vec<(SlotName, SlotValue)> = Vec::new();
    let mut duplicates = Vec::new();
    let mut seen: BTreeSet<SlotName> = BTreeSet::new();
    let mut pos = 0usize;

    loop {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            break;
        }
        let entry_start = pos;
        let open = match source[pos..].find('[') {
            Some(rel) => pos + rel,
            None => return Err(MrError::MissingOpenBracket(entry_start)),
        };
        // A comma before the bracket means an entry without brackets.
        if let Some(rel) = source[pos..open].find(',') {
            return Err(MrError::MissingOpenBracket(pos + rel));
        }
        let name_raw = &source[entry_start..open];
        let name = SlotName::new(name_raw).map_err(|_| MrError::EmptySlotName(entry_start))?;
        let close = match source[open + 1..].find(']') {
            Some(rel) => open + 1 + rel,
            None => return Err(MrError::UnclosedBracket(entry_start)),
        };
        let value_raw = &source[open + 1..close];
        let value = SlotValue::new(value_raw).map_err(|_| MrError::EmptySlotValue(open + 1))?;

        if seen.insert(name.clone()) {
            pairs.push((name, value));
        } else {
            duplicates.push(name);
        }

        pos = close + 1;
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() {
            if bytes[pos] == b',' {
                pos += 1;
            } else {
                return Err(MrError::UnexpectedChar(pos, source[pos..].chars().next().unwrap()));
            }
        }
    }

    Ok(ParseOutcome {
        mr: MeaningRepresentation { pairs },
        duplicate_slots: duplicates,
    })
}

/// Canonical `slot[value], slot[value]` string. Inverse of `parse_mr` on
/// normalized input.
pub fn serialize_mr(mr: &MeaningRepresentation) -> String {
    mr.to_string()
}

/// Flatten to a token sequence: `<slot:NAME>` marker followed by the value's
/// whitespace tokens, per pair in order.
pub fn linearize(mr: &MeaningRepresentation) -> Vec<String> {
    let mut tokens = Vec::new();
    for (name, value) in mr.pairs() {
        tokens.push(slot_marker(name));
        tokens.extend(value.tokens());
    }
    tokens
}

/// The vocabulary item marking a slot in a linearized sequence.
pub fn slot_marker(name: &SlotName) -> String {
    format!("<slot:{}>", name.as_str())
}

pub fn is_slot_marker(token: &str) -> bool {
    token.starts_with("<slot:") && token.ends_with('>')
}

/// Precision/recall/F1 of exact slot-value matching between two MRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub pred_only: usize,
    pub gold_only: usize,
}

/// A pair matches iff slot name and value are string-equal after
/// normalization. Empty prediction and empty gold count as a perfect match.
pub fn slot_fscore(pred: &MeaningRepresentation, gold: &MeaningRepresentation) -> MatchReport {
    let gold_set: BTreeSet<&(SlotName, SlotValue)> = gold.pairs().iter().collect();
    let matched = pred.pairs().iter().filter(|p| gold_set.contains(p)).count();
    if pred.is_empty() && gold.is_empty() {
        return MatchReport {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            matched: 0,
            pred_only: 0,
            gold_only: 0,
        };
    }
    let precision = if pred.is_empty() {
        0.0
    } else {
        matched as f64 / pred.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        matched as f64 / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MatchReport {
        precision,
        recall,
        f1,
        matched,
        pred_only: pred.len() - matched,
        gold_only: gold.len() - matched,
    }
}

/// Per-slot value inventory with an open/closed flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub values: BTreeSet<SlotValue>,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub slots: BTreeMap<SlotName, SlotSpec>,
}

impl Schema {
    pub fn slot_names(&self) -> impl Iterator<Item = &SlotName> {
        self.slots.keys()
    }

    pub fn contains(&self, mr: &MeaningRepresentation) -> bool {
        mr.pairs().iter().all(|(n, _)| self.slots.contains_key(n))
    }
}

/// Induce a schema from observed MRs: one slot per observed name, value set =
/// union of observed values. Slots whose value count exceeds `open_threshold`
/// are flagged open.
pub fn schema_from_corpus<'a, I>(mrs: I, open_threshold: usize) -> Result<Schema, MrError>
where
    I: IntoIterator<Item = &'a MeaningRepresentation>,
{
    let mut slots: BTreeMap<SlotName, BTreeSet<SlotValue>> = BTreeMap::new();
    let mut any = false;
    for mr in mrs {
        any = true;
        for (name, value) in mr.pairs() {
            slots.entry(name.clone()).or_default().insert(value.clone());
        }
    }
    if !any {
        return Err(MrError::EmptyText);
    }
    Ok(Schema {
        slots: slots
            .into_iter()
            .map(|(name, values)| {
                let open = values.len() > open_threshold;
                (name, SlotSpec { values, open })
            })
            .collect(),
    })
}
