//! Synthetic MR creation by value swapping: keep an observed slot-name set,
//! resample each slot's value from the corpus-wide pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mr::{MeaningRepresentation, SlotName, SlotValue};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("slot {0:?} missing from value pools")]
    MissingSlot(String),
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub target_count: usize,
    /// Drop outputs equal (as pair sets) to a source MR.
    pub dedup_against_source: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub mrs: Vec<MeaningRepresentation>,
    /// True when the distinct combination space ran out before target_count.
    pub exhausted: bool,
}

/// Dedup key: order-insensitive pair set.
fn key(m: &MeaningRepresentation) -> BTreeSet<(SlotName, SlotValue)> {
    m.pairs().iter().cloned().collect()
}

/// Resample every slot value of each source MR uniformly from that slot's
/// pool, preserving the source's slot-name set. Outputs are distinct among
/// themselves; exhausting the combination space yields all of it plus a
/// warning flag.
pub fn swap_augment(
    mrs: &[MeaningRepresentation],
    pools: &BTreeMap<SlotName, Vec<SlotValue>>,
    cfg: &AugmentConfig,
) -> Result<AugmentOutcome, AugmentError> {
    for m in mrs {
        for (name, _) in m.pairs() {
            if !pools.contains_key(name) {
                return Err(AugmentError::MissingSlot(name.as_str().to_owned()));
            }
        }
    }
    if cfg.target_count == 0 || mrs.is_empty() {
        return Ok(AugmentOutcome {
            mrs: Vec::new(),
            exhausted: cfg.target_count > 0,
        });
    }

    // One representative slot order per distinct slot-name set.
    let mut signatures: Vec<Vec<SlotName>> = Vec::new();
    let mut seen_sigs: BTreeSet<BTreeSet<SlotName>> = BTreeSet::new();
    for m in mrs {
        if seen_sigs.insert(m.signature()) {
            signatures.push(m.slot_names());
        }
    }

    let space_size: u128 = signatures
        .iter()
        .map(|sig| sig.iter().map(|n| pools[n].len() as u128).product::<u128>())
        .sum();
    let source_keys: BTreeSet<_> = if cfg.dedup_against_source {
        mrs.iter().map(key).collect()
    } else {
        BTreeSet::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Enumerate when the whole space is small or the request covers most of
    // it; otherwise rejection-sample distinct combinations.
    const ENUM_LIMIT: u128 = 1 << 20;
    let enumerate = space_size <= ENUM_LIMIT
        && (cfg.target_count as u128 * 2 >= space_size || cfg.target_count as u128 >= space_size);
    if enumerate {
        let mut all = Vec::new();
        for sig in &signatures {
            enumerate_signature(sig, pools, &mut all);
        }
        if cfg.dedup_against_source {
            all.retain(|m| !source_keys.contains(&key(m)));
        }
        all.shuffle(&mut rng);
        let exhausted = all.len() < cfg.target_count;
        if exhausted {
            log::warn!(
                "augment: combination space exhausted, returning {} of {} requested",
                all.len(),
                cfg.target_count
            );
        }
        all.truncate(cfg.target_count);
        return Ok(AugmentOutcome { mrs: all, exhausted });
    }

    let mut out = Vec::with_capacity(cfg.target_count);
    let mut keys: BTreeSet<BTreeSet<(SlotName, SlotValue)>> = BTreeSet::new();
    let max_attempts = 200 * cfg.target_count + 1000;
    let mut attempts = 0;
    while out.len() < cfg.target_count && attempts < max_attempts {
        attempts += 1;
        let src = &mrs[rng.random_range(0..mrs.len())];
        let pairs = src
            .pairs()
            .iter()
            .map(|(name, _)| {
                let pool = &pools[name];
                (name.clone(), pool[rng.random_range(0..pool.len())].clone())
            })
            .collect();
        let candidate = MeaningRepresentation::from_pairs(pairs);
        let k = key(&candidate);
        if source_keys.contains(&k) || !keys.insert(k) {
            continue;
        }
        out.push(candidate);
    }
    let exhausted = out.len() < cfg.target_count;
    if exhausted {
        log::warn!(
            "augment: sampling stalled after {} attempts, returning {} of {} requested",
            attempts,
            out.len(),
            cfg.target_count
        );
    }
    Ok(AugmentOutcome { mrs: out, exhausted })
}

/// All value combinations for one slot order, values in sorted pool order.
fn enumerate_signature(
    sig: &[SlotName],
    pools: &BTreeMap<SlotName, Vec<SlotValue>>,
    out: &mut Vec<MeaningRepresentation>,
) {
    let sizes: Vec<usize> = sig.iter().map(|n| pools[n].len()).collect();
    if sizes.iter().any(|&s| s == 0) {
        return;
    }
    let total: usize = sizes.iter().product();
    for mut idx in 0..total {
        let mut pairs = Vec::with_capacity(sig.len());
        for (name, &size) in sig.iter().zip(&sizes) {
            let digit = idx % size;
            idx /= size;
            pairs.push((name.clone(), pools[name][digit].clone()));
        }
        out.push(MeaningRepresentation::from_pairs(pairs));
    }
}
