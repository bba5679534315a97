//! Weak text annotation for unlabeled MRs. A template bank extracted from
//! the clean pairs stands in for a fine-tuned LM: it delexicalizes clean
//! texts into reusable fragments, realizes new MRs from them, and corrupts
//! the output with configurable drop/hallucination/lexical noise. External
//! annotators plug in through the Annotator trait or weak-label JSONL files.
//! The consistency filter scores weak pairs with an NLU predictor and keeps
//! those whose slot f-score clears a threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_weak_jsonl, CorpusError, ParallelPair, Provenance};
use crate::mr::{is_slot_marker, slot_fscore, slot_marker, MeaningRepresentation, SlotName, SlotValue};
use crate::parallel::par_map_enumerate;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("noise probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("filter threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Anything that can realize an MR as text. Implementations must be
/// deterministic per (mr, seed) and never return an empty sequence.
pub trait Annotator {
    fn annotate(&self, mr: &MeaningRepresentation, seed: u64) -> Vec<String>;

    /// Tag recorded in the `source` field of produced pairs.
    fn source(&self) -> &str {
        "annotator"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_hallucinate: f64,
    pub p_lexical: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn clean(seed: u64) -> Self {
        NoiseConfig {
            p_drop: 0.0,
            p_hallucinate: 0.0,
            p_lexical: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        for p in [self.p_drop, self.p_hallucinate, self.p_lexical] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(AnnotateError::BadProbability(p));
            }
        }
        Ok(())
    }
}

/// Delexicalized realization material harvested from clean pairs: full
/// sentence scaffolds indexed by slot signature, per-slot fragments for
/// unseen signatures, a value inventory for hallucination, and a word
/// inventory for lexical noise. Slots with no harvested fragment fall back
/// to a synthesized `the SLOT is VALUE` phrasing, so realization is total.
#[derive(Debug, Clone, Default)]
pub struct TemplateBank {
    scaffolds: BTreeMap<BTreeSet<SlotName>, Vec<Vec<String>>>,
    fragments: BTreeMap<SlotName, Vec<Vec<String>>>,
    values_seen: BTreeMap<SlotName, Vec<SlotValue>>,
    words: Vec<String>,
    slots: Vec<SlotName>,
}

fn marker_slot(token: &str) -> Option<SlotName> {
    if !is_slot_marker(token) {
        return None;
    }
    SlotName::new(&token["<slot:".len()..token.len() - 1]).ok()
}

/// Replace every occurrence of a slot value's token run with that slot's
/// marker. Longer values match first.
fn delexicalize(
    text: &[String],
    mr: &MeaningRepresentation,
) -> (Vec<String>, BTreeSet<SlotName>) {
    let mut entries: Vec<(&SlotName, Vec<String>)> = mr
        .pairs()
        .iter()
        .map(|(n, v)| (n, v.tokens()))
        .collect();
    entries.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    let mut out = Vec::with_capacity(text.len());
    let mut matched = BTreeSet::new();
    let mut i = 0;
    'scan: while i < text.len() {
        for (name, vtoks) in &entries {
            if text.len() - i >= vtoks.len() && text[i..i + vtoks.len()] == vtoks[..] {
                out.push(slot_marker(name));
                matched.insert((*name).clone());
                i += vtoks.len();
                continue 'scan;
            }
        }
        out.push(text[i].clone());
        i += 1;
    }
    (out, matched)
}

/// Cut a delexicalized sequence at each marker; trailing tokens join the
/// last fragment.
fn split_fragments(delexed: &[String]) -> Vec<(SlotName, Vec<String>)> {
    let mut out: Vec<(SlotName, Vec<String>)> = Vec::new();
    let mut acc: Vec<String> = Vec::new();
    for tok in delexed {
        acc.push(tok.clone());
        if let Some(slot) = marker_slot(tok) {
            out.push((slot, std::mem::take(&mut acc)));
        }
    }
    if !acc.is_empty() {
        if let Some(last) = out.last_mut() {
            last.1.extend(acc);
        }
    }
    out
}

fn fallback_fragment(slot: &SlotName) -> Vec<String> {
    let mut frag = vec!["the".to_owned()];
    frag.extend(slot.as_str().split_whitespace().map(str::to_owned));
    frag.push("is".to_owned());
    frag.push(slot_marker(slot));
    frag
}

impl TemplateBank {
    pub fn slots(&self) -> &[SlotName] {
        &self.slots
    }

    pub fn scaffold_count(&self) -> usize {
        self.scaffolds.values().map(Vec::len).sum()
    }

    pub fn has_fragment(&self, slot: &SlotName) -> bool {
        self.fragments.contains_key(slot)
    }

    fn fragment_for(&self, slot: &SlotName, rng: &mut ChaCha8Rng) -> Vec<String> {
        match self.fragments.get(slot) {
            Some(frags) => frags[rng.random_range(0..frags.len())].clone(),
            None => fallback_fragment(slot),
        }
    }
}

pub fn extract_templates(clean_pairs: &[ParallelPair]) -> TemplateBank {
    let mut bank = TemplateBank::default();
    let mut slot_set = BTreeSet::new();
    let mut word_set = BTreeSet::new();
    for pair in clean_pairs {
        let (delexed, matched) = delexicalize(&pair.text, &pair.mr);
        let signature = pair.mr.signature();
        if !signature.is_empty() && matched == signature {
            let scaffs = bank.scaffolds.entry(signature).or_default();
            if !scaffs.contains(&delexed) {
                scaffs.push(delexed.clone());
            }
        }
        for (slot, frag) in split_fragments(&delexed) {
            let frags = bank.fragments.entry(slot).or_default();
            if !frags.contains(&frag) {
                frags.push(frag);
            }
        }
        for (name, value) in pair.mr.pairs() {
            slot_set.insert(name.clone());
            let vals = bank.values_seen.entry(name.clone()).or_default();
            if !vals.contains(value) {
                vals.push(value.clone());
            }
        }
        for tok in &pair.text {
            word_set.insert(tok.clone());
        }
    }
    for vals in bank.values_seen.values_mut() {
        vals.sort();
    }
    bank.words = word_set.into_iter().collect();
    bank.slots = slot_set.into_iter().collect();
    bank
}

/// Realize one MR with noise, deterministically for a given seed.
pub fn realize_noisy(
    bank: &TemplateBank,
    mr: &MeaningRepresentation,
    noise: &NoiseConfig,
    seed: u64,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frags: Vec<(SlotName, Vec<String>)> = match bank.scaffolds.get(&mr.signature()) {
        Some(scaffs) if !scaffs.is_empty() => {
            let pick = rng.random_range(0..scaffs.len());
            split_fragments(&scaffs[pick])
        }
        _ => mr
            .pairs()
            .iter()
            .map(|(n, _)| (n.clone(), bank.fragment_for(n, &mut rng)))
            .collect(),
    };
    if noise.p_drop > 0.0 && !frags.is_empty() {
        let first = frags[0].clone();
        let mut kept = Vec::with_capacity(frags.len());
        for frag in frags {
            if rng.random_range(0.0..1.0) >= noise.p_drop {
                kept.push(frag);
            }
        }
        if kept.is_empty() {
            // never let the realization go empty
            kept.push(first);
        }
        frags = kept;
    }
    let mut tokens = fill_values(&frags, mr);
    if noise.p_hallucinate > 0.0 && rng.random_range(0.0..1.0) < noise.p_hallucinate {
        if let Some(extra) = hallucination(bank, mr, &mut rng) {
            tokens.extend(extra);
        }
    }
    if noise.p_lexical > 0.0 && !bank.words.is_empty() {
        for tok in tokens.iter_mut() {
            if rng.random_range(0.0..1.0) < noise.p_lexical {
                *tok = bank.words[rng.random_range(0..bank.words.len())].clone();
            }
        }
    }
    if tokens.is_empty() {
        return vec!["it".to_owned(), "is".to_owned(), "here".to_owned()];
    }
    tokens
}

fn fill_values(frags: &[(SlotName, Vec<String>)], mr: &MeaningRepresentation) -> Vec<String> {
    let mut tokens = Vec::new();
    for (_, frag) in frags {
        for tok in frag {
            match marker_slot(tok) {
                Some(slot) => {
                    if let Some(value) = mr.value_of(&slot) {
                        tokens.extend(value.tokens());
                    }
                }
                None => tokens.push(tok.clone()),
            }
        }
    }
    tokens
}

/// A filled fragment for some (slot, value) not present in the MR; absent
/// slots are preferred so the insertion is visible to a slot matcher.
fn hallucination(
    bank: &TemplateBank,
    mr: &MeaningRepresentation,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<String>> {
    let (mut absent, mut present): (Vec<&SlotName>, Vec<&SlotName>) = bank
        .slots
        .iter()
        .partition(|s| mr.value_of(s).is_none());
    absent.shuffle(rng);
    present.shuffle(rng);
    for slot in absent.into_iter().chain(present) {
        let candidates: Vec<&SlotValue> = bank
            .values_seen
            .get(slot)
            .map(|vals| {
                vals.iter()
                    .filter(|v| mr.value_of(slot) != Some(*v))
                    .collect()
            })
            .unwrap_or_default();
        if candidates.is_empty() {
            continue;
        }
        let value = candidates[rng.random_range(0..candidates.len())];
        let frag = bank.fragment_for(slot, rng);
        let fake = MeaningRepresentation::from_pairs(vec![(slot.clone(), value.clone())]);
        return Some(fill_values(&[(slot.clone(), frag)], &fake));
    }
    None
}

/// Template-driven Annotator over an extracted bank.
pub struct TemplateAnnotator<'a> {
    pub bank: &'a TemplateBank,
    pub noise: NoiseConfig,
}

impl Annotator for TemplateAnnotator<'_> {
    fn annotate(&self, mr: &MeaningRepresentation, seed: u64) -> Vec<String> {
        realize_noisy(self.bank, mr, &self.noise, seed)
    }

    fn source(&self) -> &str {
        "template"
    }
}

fn item_seed(base: u64, index: usize) -> u64 {
    // splitmix-style spread so items stay independent under any ordering
    let mut z = base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run any Annotator over a batch of MRs. Items are seeded independently,
/// so the result does not depend on evaluation order.
pub fn annotate_with<A>(
    mrs: &[MeaningRepresentation],
    annotator: &A,
    base_seed: u64,
) -> Vec<ParallelPair>
where
    A: Annotator + Sync + Send,
{
    par_map_enumerate(mrs, |i, mr| ParallelPair {
        id: i as u64,
        mr: mr.clone(),
        text: annotator.annotate(mr, item_seed(base_seed, i)),
        provenance: Provenance::Weak,
        source: annotator.source().to_owned(),
    })
}

/// Weakly label MRs with the built-in template annotator.
pub fn annotate(
    mrs: &[MeaningRepresentation],
    bank: &TemplateBank,
    noise: &NoiseConfig,
) -> Result<Vec<ParallelPair>, AnnotateError> {
    noise.validate()?;
    let annotator = TemplateAnnotator {
        bank,
        noise: noise.clone(),
    };
    Ok(annotate_with(mrs, &annotator, noise.seed))
}

/// Weak labels produced outside this process (e.g. by a fine-tuned LM),
/// read from JSONL.
pub fn ingest_external(path: &Path) -> Result<Vec<ParallelPair>, AnnotateError> {
    Ok(load_weak_jsonl(path)?)
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<ParallelPair>,
    /// Texts of rejected pairs, available as unlabeled data.
    pub rejected_texts: Vec<Vec<String>>,
    pub rejected_count: usize,
    /// Slot f-score counts in ten equal bins over [0, 1].
    pub histogram: [usize; 10],
}

/// Keep the weak pairs whose predicted MR agrees with their paired MR at or
/// above `threshold` slot f-score.
pub fn filter_consistency<F>(
    weak: Vec<ParallelPair>,
    predict: F,
    threshold: f64,
) -> Result<FilterOutcome, AnnotateError>
where
    F: Fn(&[String]) -> MeaningRepresentation + Sync + Send,
{
    if !(0.0..=1.0).contains(&threshold) || threshold.is_nan() {
        return Err(AnnotateError::BadThreshold(threshold));
    }
    let scores = par_map_enumerate(&weak, |_, pair| {
        slot_fscore(&predict(&pair.text), &pair.mr).f1
    });
    let mut outcome = FilterOutcome {
        kept: Vec::new(),
        rejected_texts: Vec::new(),
        rejected_count: 0,
        histogram: [0; 10],
    };
    for (pair, score) in weak.into_iter().zip(scores) {
        let bin = ((score * 10.0) as usize).min(9);
        outcome.histogram[bin] += 1;
        if score >= threshold {
            outcome.kept.push(pair);
        } else {
            outcome.rejected_texts.push(pair.text);
            outcome.rejected_count += 1;
        }
    }
    Ok(outcome)
}
