//! Dataset ingestion, tokenization, vocabulary construction, deterministic
//! splitting, value pools, and a synthetic closed-grammar benchmark.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mr::{self, MeaningRepresentation, MrError, SlotName, SlotValue};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?} in header")]
    MissingColumn(&'static str),
    #[error("invalid JSON on line {line}: {message}")]
    BadJsonLine { line: usize, message: String },
    #[error("empty dataset")]
    Empty,
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("mr error: {0}")]
    Mr(#[from] MrError),
    #[error("requested {requested} samples but only {available} distinct MRs exist")]
    SpaceExhausted { requested: usize, available: usize },
    #[error("synthetic benchmark counts must all be >= 1")]
    BadSynthSpec,
}

/// Lowercase, split on whitespace, and break punctuation into separate
/// tokens. Runs of alphanumeric characters form word tokens; any other
/// non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Clean,
    Weak,
}

/// An (MR, text) pair with provenance and a dataset-stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: u64,
    pub mr: MeaningRepresentation,
    pub text: Vec<String>,
    pub provenance: Provenance,
    /// Which annotator produced the text ("e2e", "template", ...).
    pub source: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<ParallelPair>,
    pub unlabeled_mrs: Vec<MeaningRepresentation>,
    pub unlabeled_texts: Vec<Vec<String>>,
}

impl Dataset {
    pub fn from_pairs(pairs: Vec<ParallelPair>) -> Self {
        Dataset {
            pairs,
            unlabeled_mrs: Vec::new(),
            unlabeled_texts: Vec::new(),
        }
    }

    pub fn all_mrs(&self) -> impl Iterator<Item = &MeaningRepresentation> {
        self.pairs.iter().map(|p| &p.mr).chain(self.unlabeled_mrs.iter())
    }
}

/// Outcome of a CSV load: the dataset plus the rows that failed to parse.
#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: Dataset,
    /// (1-based data row number, error message) per skipped row.
    pub skipped: Vec<(usize, String)>,
}

/// Load an E2E-format CSV with header columns `mr,ref`. Rows whose MR fails
/// to parse are skipped and reported.
pub fn load_e2e_csv(path: &Path) -> Result<CsvLoad, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mr_idx = headers
        .iter()
        .position(|h| h == "mr")
        .ok_or(CorpusError::MissingColumn("mr"))?;
    let ref_idx = headers
        .iter()
        .position(|h| h == "ref")
        .ok_or(CorpusError::MissingColumn("ref"))?;

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let mr_field = record.get(mr_idx).unwrap_or_default();
        let ref_field = record.get(ref_idx).unwrap_or_default();
        match mr::parse_mr(mr_field) {
            Ok(outcome) => {
                let text = tokenize(ref_field);
                if text.is_empty() {
                    skipped.push((row_no + 1, "empty reference text".to_owned()));
                    continue;
                }
                pairs.push(ParallelPair {
                    id: pairs.len() as u64,
                    mr: outcome.mr,
                    text,
                    provenance: Provenance::Clean,
                    source: "e2e".to_owned(),
                });
            }
            Err(e) => skipped.push((row_no + 1, e.to_string())),
        }
    }
    Ok(CsvLoad {
        dataset: Dataset::from_pairs(pairs),
        skipped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct WeakRecord {
    mr: String,
    text: String,
    source: String,
}

/// Load weak-label JSONL: one `{"mr","text","source"}` object per line.
pub fn load_weak_jsonl(path: &Path) -> Result<Vec<ParallelPair>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WeakRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadJsonLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        let mr = MeaningRepresentation::parse(&record.mr).map_err(|e| CorpusError::BadJsonLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push(ParallelPair {
            id: pairs.len() as u64,
            mr,
            text: tokenize(&record.text),
            provenance: Provenance::Weak,
            source: record.source,
        });
    }
    Ok(pairs)
}

pub fn write_weak_jsonl(pairs: &[ParallelPair], path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        let record = WeakRecord {
            mr: mr::serialize_mr(&pair.mr),
            text: detokenize(&pair.text),
            source: pair.source.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable record"))?;
    }
    Ok(())
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with fixed reserved ids. Built deterministically:
/// frequency descending, then lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// FNV-1a over the token list; checkpoints carry this to detect mismatch.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Build the vocabulary over pair texts, linearized MRs, and the unlabeled
/// pools. Slot-marker tokens are always included; word tokens need
/// `min_freq` occurrences, and everything else maps to UNK.
pub fn build_vocab(dataset: &Dataset, min_freq: usize) -> Result<Vocabulary, CorpusError> {
    if dataset.pairs.is_empty() && dataset.unlabeled_mrs.is_empty() && dataset.unlabeled_texts.is_empty()
    {
        return Err(CorpusError::Empty);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |tok: &str| *counts.entry(tok.to_owned()).or_insert(0) += 1;
    for pair in &dataset.pairs {
        for tok in &pair.text {
            bump(tok);
        }
        for tok in mr::linearize(&pair.mr) {
            bump(&tok);
        }
    }
    for m in &dataset.unlabeled_mrs {
        for tok in mr::linearize(m) {
            bump(&tok);
        }
    }
    for text in &dataset.unlabeled_texts {
        for tok in text {
            bump(tok);
        }
    }

    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, count)| mr::is_slot_marker(tok) || *count >= min_freq)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Deterministic split of the labeled pairs. Sizes follow floor-then-
/// distribute rounding; the unlabeled pools stay with the train split.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if (sum - 1.0).abs() > 1e-9 || fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 {
        return Err(CorpusError::BadFractions(sum));
    }
    let n = dataset.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut sizes = [
        (n as f64 * fractions.0).floor() as usize,
        (n as f64 * fractions.1).floor() as usize,
        (n as f64 * fractions.2).floor() as usize,
    ];
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut slot = 0;
    while leftover > 0 {
        sizes[slot] += 1;
        leftover -= 1;
        slot = (slot + 1) % 3;
    }

    let take = |range: std::ops::Range<usize>| -> Vec<ParallelPair> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| dataset.pairs[i].clone()).collect()
    };
    let train_pairs = take(0..sizes[0]);
    let dev_pairs = take(sizes[0]..sizes[0] + sizes[1]);
    let test_pairs = take(sizes[0] + sizes[1]..n);

    let train = Dataset {
        pairs: train_pairs,
        unlabeled_mrs: dataset.unlabeled_mrs.clone(),
        unlabeled_texts: dataset.unlabeled_texts.clone(),
    };
    Ok((train, Dataset::from_pairs(dev_pairs), Dataset::from_pairs(test_pairs)))
}

/// Deduplicated, sorted value list per slot name.
pub fn value_pools<'a, I>(mrs: I) -> BTreeMap<SlotName, Vec<SlotValue>>
where
    I: IntoIterator<Item = &'a MeaningRepresentation>,
{
    let mut pools: BTreeMap<SlotName, Vec<SlotValue>> = BTreeMap::new();
    for m in mrs {
        for (name, value) in m.pairs() {
            pools.entry(name.clone()).or_default().push(value.clone());
        }
    }
    for values in pools.values_mut() {
        values.sort();
        values.dedup();
    }
    pools
}

/// Parameters of the synthetic closed-grammar benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_slots: usize,
    pub values_per_slot: usize,
    pub n_clean: usize,
    pub n_unlabeled_mrs: usize,
    pub seed: u64,
}

const SLOT_WORDS: [&str; 10] = [
    "area", "food", "price", "rating", "style", "size", "venue", "theme", "color", "shape",
];

/// The ground-truth realization grammar behind a synthetic benchmark. Every
/// slot has a fixed phrase pattern and globally unique value words, so the
/// realization is invertible: `invert` recovers the exact MR from clean text.
#[derive(Debug, Clone)]
pub struct SynthGrammar {
    slots: Vec<(SlotName, Vec<SlotValue>)>,
}

impl SynthGrammar {
    pub fn new(n_slots: usize, values_per_slot: usize) -> Self {
        let slots = (0..n_slots)
            .map(|i| {
                let word = if i < SLOT_WORDS.len() {
                    SLOT_WORDS[i].to_owned()
                } else {
                    format!("slot{}", i)
                };
                let values = (0..values_per_slot)
                    .map(|j| SlotValue::new(&format!("{}{}", word, j)).expect("non-empty"))
                    .collect();
                (SlotName::new(&word).expect("non-empty"), values)
            })
            .collect();
        SynthGrammar { slots }
    }

    pub fn slot_names(&self) -> Vec<SlotName> {
        self.slots.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn values(&self, slot_idx: usize) -> &[SlotValue] {
        &self.slots[slot_idx].1
    }

    /// Number of distinct non-empty MRs: (values_per_slot + 1)^n_slots - 1.
    pub fn space_size(&self) -> u128 {
        let per = self.slots.first().map(|(_, v)| v.len() as u128 + 1).unwrap_or(1);
        per.saturating_pow(self.slots.len() as u32).saturating_sub(1)
    }

    fn pattern_tokens(&self, slot_idx: usize, slot: &SlotName, value: &SlotValue) -> Vec<String> {
        let s = slot.as_str().to_owned();
        let v = value.as_str().to_owned();
        match slot_idx % 4 {
            0 => vec!["the".into(), s, "is".into(), v],
            1 => vec!["it".into(), "has".into(), v, s],
            2 => vec![s, "of".into(), v],
            _ => vec![v, s, "here".into()],
        }
    }

    /// Deterministic ground-truth realization of an MR.
    pub fn realize(&self, m: &MeaningRepresentation) -> Vec<String> {
        let mut text = Vec::new();
        for (name, value) in m.pairs() {
            let idx = self
                .slots
                .iter()
                .position(|(n, _)| n == name)
                .expect("mr conforms to grammar");
            text.extend(self.pattern_tokens(idx, name, value));
        }
        text
    }

    /// The ground-truth inverse: recover slot-value pairs from value-word
    /// occurrences, in order of first appearance.
    pub fn invert(&self, tokens: &[String]) -> MeaningRepresentation {
        let mut pairs = Vec::new();
        for tok in tokens {
            for (name, values) in &self.slots {
                if let Some(v) = values.iter().find(|v| v.as_str() == tok) {
                    pairs.push((name.clone(), v.clone()));
                }
            }
        }
        MeaningRepresentation::from_pairs(pairs)
    }

    /// Decode an MR from an index into the combination space. Index digits
    /// in base values_per_slot+1 select absent (0) or value j-1 per slot.
    fn mr_at(&self, mut index: u128) -> MeaningRepresentation {
        let base = self.slots[0].1.len() as u128 + 1;
        let mut pairs = Vec::new();
        for (name, values) in &self.slots {
            let digit = (index % base) as usize;
            index /= base;
            if digit > 0 {
                pairs.push((name.clone(), values[digit - 1].clone()));
            }
        }
        MeaningRepresentation::from_pairs(pairs)
    }

    /// Sample `count` distinct non-empty MRs, uniformly without replacement.
    pub fn sample_distinct(
        &self,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<MeaningRepresentation>, CorpusError> {
        let space = self.space_size();
        if count as u128 > space {
            return Err(CorpusError::SpaceExhausted {
                requested: count,
                available: space.min(usize::MAX as u128) as usize,
            });
        }
        if space <= 4 * count as u128 && space <= 1 << 20 {
            // Small space: enumerate (indices 1..=space are the non-empty MRs),
            // shuffle, take.
            let mut all: Vec<u128> = (1..=space).collect();
            all.shuffle(rng);
            return Ok(all.into_iter().take(count).map(|i| self.mr_at(i)).collect());
        }
        // Large space: rejection-sample distinct indices.
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let idx = 1 + (rng.next_u64() as u128 % space);
            if seen.insert(idx) {
                out.push(self.mr_at(idx));
            }
        }
        Ok(out)
    }
}

use rand::RngCore;

/// Generate a synthetic benchmark: clean pairs via the exact ground-truth
/// realization, plus a distinct pool of unlabeled MRs.
pub fn synth_benchmark(spec: &SynthSpec) -> Result<(Dataset, SynthGrammar), CorpusError> {
    if spec.n_slots < 1 || spec.values_per_slot < 1 || spec.n_clean < 1 || spec.n_unlabeled_mrs < 1 {
        return Err(CorpusError::BadSynthSpec);
    }
    let grammar = SynthGrammar::new(spec.n_slots, spec.values_per_slot);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let space = grammar.space_size();
    let total = spec.n_clean as u128 + spec.n_unlabeled_mrs as u128;
    let (clean_mrs, unlabeled_mrs) = if total <= space {
        // Draw jointly so clean and unlabeled MRs are disjoint.
        let mut all = grammar.sample_distinct(spec.n_clean + spec.n_unlabeled_mrs, &mut rng)?;
        let unlabeled = all.split_off(spec.n_clean);
        (all, unlabeled)
    } else {
        // Space too small for disjoint groups: each group is distinct
        // internally but may overlap the other.
        let clean = grammar.sample_distinct(spec.n_clean, &mut rng)?;
        let unlabeled = grammar.sample_distinct(spec.n_unlabeled_mrs, &mut rng)?;
        (clean, unlabeled)
    };

    let pairs = clean_mrs
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let text = grammar.realize(&m);
            ParallelPair {
                id: i as u64,
                mr: m,
                text,
                provenance: Provenance::Clean,
                source: "synth".to_owned(),
            }
        })
        .collect();

    Ok((
        Dataset {
            pairs,
            unlabeled_mrs,
            unlabeled_texts: Vec::new(),
        },
        grammar,
    ))
}
