//! Dual-learning trainer. One optimizer step per batch sums four terms:
//! weighted supervised NLL in both directions, the two pseudo-label cycles
//! (MR -> text' -> MR updates only the NLU side, text -> MR' -> text only
//! the NLG side), and autoencoding on both spaces. On top of that sit DMI
//! quality scoring against a frozen teacher and the two-step schedule:
//! teacher on clean data, student pretrained on weak data, then the student
//! fine-tuned on the combined set with per-sample c weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, ParallelPair, Vocabulary, EOS};
use crate::kernel::optim::ParamStore;
use crate::kernel::tape::Var;
use crate::kernel::KernelError;
use crate::models::{DecodeMode, Graph, ModelConfig, ModelSet};
use crate::mr::{MeaningRepresentation, Schema};
use crate::parallel::par_map;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training pairs")]
    EmptyTraining,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("{got} weights for {expected} pairs")]
    WeightLenMismatch { got: usize, expected: usize },
    #[error("per-sample weight {0} is outside [0, 1]")]
    BadWeight(f64),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Which direction(s) the supervised objective trains. The single-direction
/// settings exist for separately trained baseline models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedDirection {
    Both,
    NlgOnly,
    NluOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    /// Non-improving dev evaluations tolerated before stopping.
    pub patience: usize,
    /// Steps between dev evaluations.
    pub eval_every: usize,
    pub lambda_sup: f64,
    pub lambda_dtd: f64,
    pub lambda_tdt: f64,
    pub lambda_ae: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Divide the supervised term by the batch weight sum (weighted mean).
    /// Off, the term is a plain weighted sum, which makes weight scaling
    /// commute with the learning rate under SGD.
    pub normalize_by_weight_sum: bool,
    /// Extend c weights to the pseudo-label objectives as well.
    pub weight_unsupervised: bool,
    /// Rank-based DMI normalization instead of min-max.
    pub rank_normalize: bool,
    /// Length-normalize log-probs inside DMI.
    pub length_normalize: bool,
    pub sup_direction: SupervisedDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.0002,
            batch: 28,
            max_steps: 10_000,
            patience: 100,
            eval_every: 10,
            lambda_sup: 1.0,
            lambda_dtd: 1.0,
            lambda_tdt: 1.0,
            lambda_ae: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            normalize_by_weight_sum: true,
            weight_unsupervised: false,
            rank_normalize: false,
            length_normalize: false,
            sup_direction: SupervisedDirection::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        for (name, l) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_dtd", self.lambda_dtd),
            ("lambda_tdt", self.lambda_tdt),
            ("lambda_ae", self.lambda_ae),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("{} = {} must be >= 0", name, l));
            }
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".to_owned());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".to_owned());
        }
        if self.batch < 1 {
            return bad("batch must be >= 1".to_owned());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr = {} must be > 0", self.base_lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub evals: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TeacherSet {
    pub model: ModelSet,
    pub stats: TrainStats,
}

#[derive(Debug, Clone)]
pub struct StudentSet {
    pub model: ModelSet,
    pub stats: TrainStats,
}

/// Duality-gap quality score for one pair. `c` is meaningful only after
/// corpus-level normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmiScore {
    pub mi_xy: f64,
    pub mi_yx: f64,
    pub dmi: f64,
    pub c: f64,
}

impl DmiScore {
    pub fn from_mi(mi_xy: f64, mi_yx: f64) -> Self {
        DmiScore {
            mi_xy,
            mi_yx,
            dmi: (mi_xy - mi_yx).abs().exp(),
            c: f64::NAN,
        }
    }
}

/// Unlabeled material for the pseudo-label and autoencoding objectives.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub mrs: Vec<MeaningRepresentation>,
    pub texts: Vec<Vec<String>>,
}

impl Pools {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Pools {
            mrs: ds.unlabeled_mrs.clone(),
            texts: ds.unlabeled_texts.clone(),
        }
    }
}

fn check_weights(weights: &[f64], n_pairs: usize) -> Result<(), TrainError> {
    if weights.len() != n_pairs {
        return Err(TrainError::WeightLenMismatch {
            got: weights.len(),
            expected: n_pairs,
        });
    }
    for &w in weights {
        if !(0.0..=1.0).contains(&w) || w.is_nan() {
            return Err(TrainError::BadWeight(w));
        }
    }
    Ok(())
}

fn text_targets(vocab: &Vocabulary, text: &[String]) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.push(EOS);
    ids
}

/// Weighted joint NLL term over a batch; None when the weight mass is zero
/// (the batch is skipped).
fn supervised_term(
    model: &ModelSet,
    g: &mut Graph,
    batch: &[(&ParallelPair, f64)],
    lambda: f64,
    normalize: bool,
    dir: SupervisedDirection,
) -> Result<Option<Var>, KernelError> {
    let wsum: f64 = batch.iter().map(|(_, w)| w).sum();
    if batch.is_empty() || wsum == 0.0 {
        return Ok(None);
    }
    let mut weighted = Vec::with_capacity(batch.len());
    for (pair, w) in batch {
        let joint = match dir {
            SupervisedDirection::NlgOnly => {
                let latent_x = model.encode_mr_g(g, &pair.mr)?;
                model
                    .decode_nll_g(g, latent_x, &text_targets(&model.vocab, &pair.text))?
                    .0
            }
            SupervisedDirection::NluOnly => {
                let latent_y = model.encode_text_g(g, &pair.text)?;
                model.heads_nll_g(g, latent_y, &pair.mr)?
            }
            SupervisedDirection::Both => {
                let latent_x = model.encode_mr_g(g, &pair.mr)?;
                let (nll_y, _) =
                    model.decode_nll_g(g, latent_x, &text_targets(&model.vocab, &pair.text))?;
                let latent_y = model.encode_text_g(g, &pair.text)?;
                let nll_x = model.heads_nll_g(g, latent_y, &pair.mr)?;
                g.tape.add(nll_y, nll_x)?
            }
        };
        weighted.push(g.tape.scale(joint, *w));
    }
    let sum = g.tape.add_many(&weighted)?;
    let factor = if normalize { lambda / wsum } else { lambda };
    Ok(Some(g.tape.scale(sum, factor)))
}

/// NLU loss against pseudo texts decoded from MRs; the decode is off-tape,
/// so only the NLU side sees gradient.
fn dtd_term(
    model: &ModelSet,
    g: &mut Graph,
    pseudo: &[(&MeaningRepresentation, Vec<String>, f64)],
    lambda: f64,
) -> Result<Option<Var>, KernelError> {
    if pseudo.is_empty() {
        return Ok(None);
    }
    let mut losses = Vec::with_capacity(pseudo.len());
    for (x, y_pseudo, w) in pseudo {
        let latent = model.encode_text_g(g, y_pseudo)?;
        let nll = model.heads_nll_g(g, latent, x)?;
        losses.push(g.tape.scale(nll, *w));
    }
    let sum = g.tape.add_many(&losses)?;
    Ok(Some(g.tape.scale(sum, lambda / pseudo.len() as f64)))
}

/// NLG loss against pseudo MRs predicted from texts; prediction is off-tape,
/// so only the NLG side sees gradient.
fn tdt_term(
    model: &ModelSet,
    g: &mut Graph,
    pseudo: &[(&Vec<String>, MeaningRepresentation, f64)],
    lambda: f64,
) -> Result<Option<Var>, KernelError> {
    if pseudo.is_empty() {
        return Ok(None);
    }
    let mut losses = Vec::with_capacity(pseudo.len());
    for (y, x_pseudo, w) in pseudo {
        let latent = model.encode_mr_g(g, x_pseudo)?;
        let (nll, _) = model.decode_nll_g(g, latent, &text_targets(&model.vocab, y))?;
        losses.push(g.tape.scale(nll, *w));
    }
    let sum = g.tape.add_many(&losses)?;
    Ok(Some(g.tape.scale(sum, lambda / pseudo.len() as f64)))
}

/// Reconstruction NLL on each space; either batch may be empty.
fn auto_term(
    model: &ModelSet,
    g: &mut Graph,
    mrs: &[&MeaningRepresentation],
    texts: &[&Vec<String>],
    lambda: f64,
) -> Result<Option<Var>, KernelError> {
    let mut parts = Vec::new();
    if !mrs.is_empty() {
        let mut losses = Vec::with_capacity(mrs.len());
        for x in mrs {
            let latent = model.encode_mr_g(g, x)?;
            losses.push(model.heads_nll_g(g, latent, x)?);
        }
        let sum = g.tape.add_many(&losses)?;
        parts.push(g.tape.scale(sum, lambda / mrs.len() as f64));
    }
    if !texts.is_empty() {
        let mut losses = Vec::with_capacity(texts.len());
        for y in texts {
            let latent = model.encode_text_g(g, y)?;
            let (nll, _) = model.decode_nll_g(g, latent, &text_targets(&model.vocab, y))?;
            losses.push(nll);
        }
        let sum = g.tape.add_many(&losses)?;
        parts.push(g.tape.scale(sum, lambda / texts.len() as f64));
    }
    match parts.len() {
        0 => Ok(None),
        1 => Ok(Some(parts[0])),
        _ => Ok(Some(g.tape.add_many(&parts)?)),
    }
}

/// Forward value of the weighted supervised objective; None when skipped.
pub fn loss_supervised(
    model: &ModelSet,
    pairs: &[&ParallelPair],
    weights: &[f64],
    normalize: bool,
) -> Result<Option<f64>, TrainError> {
    check_weights(weights, pairs.len())?;
    let batch: Vec<(&ParallelPair, f64)> =
        pairs.iter().copied().zip(weights.iter().copied()).collect();
    let mut g = Graph::new(&model.params);
    match supervised_term(model, &mut g, &batch, 1.0, normalize, SupervisedDirection::Both)? {
        None => Ok(None),
        Some(v) => Ok(Some(g.tape.value(v)[0])),
    }
}

/// Forward value of the MR -> text' -> MR objective.
pub fn loss_dtd(model: &ModelSet, mrs: &[MeaningRepresentation]) -> Result<f64, KernelError> {
    let mut pseudo = Vec::with_capacity(mrs.len());
    for x in mrs {
        let y = model.nlg_generate(x, DecodeMode::Greedy)?;
        pseudo.push((x, y.tokens, 1.0));
    }
    let mut g = Graph::new(&model.params);
    match dtd_term(model, &mut g, &pseudo, 1.0)? {
        None => Ok(0.0),
        Some(v) => Ok(g.tape.value(v)[0]),
    }
}

/// Forward value of the text -> MR' -> text objective.
pub fn loss_tdt(model: &ModelSet, texts: &[Vec<String>]) -> Result<f64, KernelError> {
    let mut pseudo = Vec::with_capacity(texts.len());
    for y in texts {
        pseudo.push((y, model.nlu_predict(y)?, 1.0));
    }
    let mut g = Graph::new(&model.params);
    match tdt_term(model, &mut g, &pseudo, 1.0)? {
        None => Ok(0.0),
        Some(v) => Ok(g.tape.value(v)[0]),
    }
}

/// Forward value of the two-space autoencoding objective.
pub fn loss_auto(
    model: &ModelSet,
    mrs: &[MeaningRepresentation],
    texts: &[Vec<String>],
) -> Result<f64, KernelError> {
    let mr_refs: Vec<&MeaningRepresentation> = mrs.iter().collect();
    let text_refs: Vec<&Vec<String>> = texts.iter().collect();
    let mut g = Graph::new(&model.params);
    match auto_term(model, &mut g, &mr_refs, &text_refs, 1.0)? {
        None => Ok(0.0),
        Some(v) => Ok(g.tape.value(v)[0]),
    }
}

/// Quality score of one pair under the frozen teacher: the gap between the
/// two directions' mutual-information estimates, exponentiated.
pub fn dmi_score(
    pair: &ParallelPair,
    teacher: &TeacherSet,
    length_normalize: bool,
) -> Result<DmiScore, KernelError> {
    let model = &teacher.model;
    let auto_y = model.auto_text_logprob(&pair.text)?;
    let nlg = model.nlg_logprob(&pair.mr, &pair.text)?.total_logprob;
    let auto_x = model.auto_mr_logprob(&pair.mr)?;
    let nlu = model.nlu_logprob(&pair.text, &pair.mr)?;
    let (mut mi_xy, mut mi_yx) = (auto_y - nlg, auto_x - nlu);
    if length_normalize {
        let y_len = (pair.text.len() + 1) as f64;
        let x_len = model.schema.slots.len().max(1) as f64;
        mi_xy /= y_len;
        mi_yx /= x_len;
    }
    Ok(DmiScore::from_mi(mi_xy, mi_yx))
}

/// Fill in c = 1 - N(dmi) over the whole collection. Min-max by default;
/// rank-based when `rank` is set. A degenerate all-equal collection maps
/// everything to c = 1.
pub fn normalize_dmi(scores: &mut [DmiScore], rank: bool) {
    if scores.is_empty() {
        return;
    }
    if rank {
        let n = scores.len();
        let dmis: Vec<f64> = scores.iter().map(|s| s.dmi).collect();
        for s in scores.iter_mut() {
            let below = dmis.iter().filter(|&&d| d < s.dmi).count();
            s.c = if n == 1 {
                1.0
            } else {
                1.0 - below as f64 / (n - 1) as f64
            };
        }
        return;
    }
    let lo = scores.iter().map(|s| s.dmi).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.dmi).fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        for s in scores.iter_mut() {
            s.c = 1.0;
        }
        return;
    }
    for s in scores.iter_mut() {
        s.c = 1.0 - (s.dmi - lo) / (hi - lo);
    }
}

fn draw<'p, T>(pool: &'p [T], cursor: &mut usize, n: usize) -> Vec<&'p T> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let item = &pool[*cursor % pool.len()];
            *cursor += 1;
            item
        })
        .collect()
}

/// Shared vocabulary, schema, and model shape for one experiment. All
/// models trained through the same Trainer are checkpoint-compatible.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub vocab: Vocabulary,
    pub schema: Schema,
    pub model_cfg: ModelConfig,
}

impl Trainer {
    pub fn new(vocab: Vocabulary, schema: Schema, model_cfg: ModelConfig) -> Self {
        Trainer {
            vocab,
            schema,
            model_cfg,
        }
    }

    fn fresh_model(&self, seed: u64) -> ModelSet {
        ModelSet::new(self.model_cfg.clone(), self.vocab.clone(), self.schema.clone(), seed)
    }

    fn dev_loss(&self, model: &ModelSet, dev: &[ParallelPair]) -> Result<f64, KernelError> {
        let mut total = 0.0;
        for pair in dev {
            total -= model.nlg_logprob(&pair.mr, &pair.text)?.total_logprob;
            total -= model.nlu_logprob(&pair.text, &pair.mr)?;
        }
        Ok(total / dev.len() as f64)
    }

    /// The optimization loop shared by every phase. Pairs carry per-sample
    /// weights; zero-weight pairs are excluded up front, so a run with some
    /// weights at zero is structurally identical to a run without those
    /// pairs. Single-threaded and bit-reproducible per seed.
    fn run(
        &self,
        mut model: ModelSet,
        all_pairs: &[ParallelPair],
        weights: &[f64],
        pools: &Pools,
        dev: &[ParallelPair],
        cfg: &TrainConfig,
        stage: &str,
    ) -> Result<(ModelSet, TrainStats), TrainError> {
        cfg.validate()?;
        check_weights(weights, all_pairs.len())?;
        let keep: Vec<usize> = (0..all_pairs.len()).filter(|&i| weights[i] > 0.0).collect();
        let pairs: Vec<&ParallelPair> = keep.iter().map(|&i| &all_pairs[i]).collect();
        let pair_weights: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut mr_pool = pools.mrs.clone();
        let mut text_pool = pools.texts.clone();
        mr_pool.shuffle(&mut rng);
        text_pool.shuffle(&mut rng);
        let (mut mr_cursor, mut text_cursor) = (0usize, 0usize);

        let mut best: Option<(f64, ParamStore)> = None;
        let mut bad_evals = 0usize;
        let mut evals = 0usize;
        let mut steps_taken = 0usize;
        let mut stopped_early = false;

        for step in 1..=cfg.max_steps {
            let sup_batch: Vec<(&ParallelPair, f64)> =
                if cfg.lambda_sup > 0.0 && !pairs.is_empty() {
                    (0..cfg.batch)
                        .map(|_| {
                            let i = rng.random_range(0..pairs.len());
                            (pairs[i], pair_weights[i])
                        })
                        .collect()
                } else {
                    Vec::new()
                };
            let dtd_mrs = if cfg.lambda_dtd > 0.0 {
                draw(&mr_pool, &mut mr_cursor, cfg.batch)
            } else {
                Vec::new()
            };
            let tdt_texts = if cfg.lambda_tdt > 0.0 {
                draw(&text_pool, &mut text_cursor, cfg.batch)
            } else {
                Vec::new()
            };
            let (ae_mrs, ae_texts) = if cfg.lambda_ae > 0.0 {
                (
                    draw(&mr_pool, &mut mr_cursor, cfg.batch),
                    draw(&text_pool, &mut text_cursor, cfg.batch),
                )
            } else {
                (Vec::new(), Vec::new())
            };

            // pseudo-labels come from the current model, outside the tape
            let mut dtd_pseudo = Vec::with_capacity(dtd_mrs.len());
            for x in dtd_mrs {
                let y = model.nlg_generate(x, DecodeMode::Greedy)?;
                dtd_pseudo.push((x, y.tokens, 1.0));
            }
            let mut tdt_pseudo = Vec::with_capacity(tdt_texts.len());
            for y in tdt_texts {
                tdt_pseudo.push((y, model.nlu_predict(y)?, 1.0));
            }

            let mut g = Graph::new(&model.params);
            let mut terms = Vec::new();
            if let Some(v) = supervised_term(
                &model,
                &mut g,
                &sup_batch,
                cfg.lambda_sup,
                cfg.normalize_by_weight_sum,
                cfg.sup_direction,
            )? {
                terms.push(v);
            }
            if let Some(v) = dtd_term(&model, &mut g, &dtd_pseudo, cfg.lambda_dtd)? {
                terms.push(v);
            }
            if let Some(v) = tdt_term(&model, &mut g, &tdt_pseudo, cfg.lambda_tdt)? {
                terms.push(v);
            }
            if let Some(v) = auto_term(&model, &mut g, &ae_mrs, &ae_texts, cfg.lambda_ae)? {
                terms.push(v);
            }

            steps_taken = step;
            if !terms.is_empty() {
                let root = g.tape.add_many(&terms)?;
                let loss = g.tape.value(root)[0];
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step });
                }
                g.tape.backward(root)?;
                let grads = g.grads();
                drop(g);
                match cfg.optimizer {
                    OptimizerKind::Adam => model.params.adam_step(&grads, cfg.base_lr, 1.0)?,
                    OptimizerKind::Sgd => model.params.sgd_step(&grads, cfg.base_lr, 1.0)?,
                }
            }

            if step % cfg.eval_every == 0 && !dev.is_empty() {
                let dl = self.dev_loss(&model, dev)?;
                evals += 1;
                let improved = best.as_ref().map_or(true, |(b, _)| dl < *b);
                if improved {
                    best = Some((dl, model.params.clone()));
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                }
                log::info!(
                    target: stage,
                    "step {} dev_loss {:.6} best {:.6} bad {}",
                    step,
                    dl,
                    best.as_ref().map(|(b, _)| *b).unwrap_or(dl),
                    bad_evals
                );
                if bad_evals >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }

        let best_dev_loss = match best {
            Some((loss, store)) => {
                model.params = store;
                loss
            }
            None => f64::INFINITY,
        };
        log::info!(
            target: stage,
            "finished after {} steps ({} evals, best dev {:.6})",
            steps_taken,
            evals,
            best_dev_loss
        );
        Ok((
            model,
            TrainStats {
                steps: steps_taken,
                evals,
                best_dev_loss,
                stopped_early,
            },
        ))
    }

    /// Step 1a: train a fresh model on the clean pairs plus the unlabeled
    /// pools; the result is frozen and used for DMI scoring.
    pub fn train_teacher(
        &self,
        clean: &Dataset,
        dev: &[ParallelPair],
        cfg: &TrainConfig,
    ) -> Result<TeacherSet, TrainError> {
        if clean.pairs.is_empty() {
            return Err(TrainError::EmptyTraining);
        }
        let weights = vec![1.0; clean.pairs.len()];
        let pools = Pools::from_dataset(clean);
        let (model, stats) = self.run(
            self.fresh_model(cfg.seed),
            &clean.pairs,
            &weights,
            &pools,
            dev,
            cfg,
            "teacher",
        )?;
        Ok(TeacherSet { model, stats })
    }

    /// Step 1b: pretrain a fresh student on the weak pairs alone.
    pub fn pretrain_student(
        &self,
        weak: &Dataset,
        dev: &[ParallelPair],
        cfg: &TrainConfig,
    ) -> Result<StudentSet, TrainError> {
        if weak.pairs.is_empty() {
            return Err(TrainError::EmptyTraining);
        }
        let weights = vec![1.0; weak.pairs.len()];
        let pools = Pools::from_dataset(weak);
        let (model, stats) = self.run(
            self.fresh_model(cfg.seed),
            &weak.pairs,
            &weights,
            &pools,
            dev,
            cfg,
            "student",
        )?;
        Ok(StudentSet { model, stats })
    }

    /// Score a pair collection with the frozen teacher and normalize c over
    /// it. Read-only and sample-parallel.
    pub fn score_dataset(
        teacher: &TeacherSet,
        pairs: &[ParallelPair],
        cfg: &TrainConfig,
    ) -> Result<Vec<DmiScore>, TrainError> {
        let scored: Result<Vec<DmiScore>, KernelError> =
            par_map(pairs, |p| dmi_score(p, teacher, cfg.length_normalize))
                .into_iter()
                .collect();
        let mut scores = scored?;
        normalize_dmi(&mut scores, cfg.rank_normalize);
        Ok(scores)
    }

    /// Step 2: score every pair (clean and weak alike) with the frozen
    /// teacher, normalize to c, and fine-tune the student on the combined
    /// set with c-weighted supervised updates.
    pub fn finetune_weighted(
        &self,
        student: StudentSet,
        teacher: &TeacherSet,
        combined: &Dataset,
        dev: &[ParallelPair],
        cfg: &TrainConfig,
    ) -> Result<(StudentSet, Vec<DmiScore>), TrainError> {
        if combined.pairs.is_empty() {
            return Err(TrainError::EmptyTraining);
        }
        let scores = Self::score_dataset(teacher, &combined.pairs, cfg)?;
        let weights: Vec<f64> = scores.iter().map(|s| s.c).collect();
        let student = self.finetune_with_weights(student, combined, &weights, dev, cfg)?;
        Ok((student, scores))
    }

    /// Fine-tune with externally supplied per-sample weights (e.g. c values
    /// from a score file).
    pub fn finetune_with_weights(
        &self,
        student: StudentSet,
        combined: &Dataset,
        weights: &[f64],
        dev: &[ParallelPair],
        cfg: &TrainConfig,
    ) -> Result<StudentSet, TrainError> {
        if combined.pairs.is_empty() {
            return Err(TrainError::EmptyTraining);
        }
        let pools = Pools::from_dataset(combined);
        let (model, stats) = self.run(
            student.model,
            &combined.pairs,
            weights,
            &pools,
            dev,
            cfg,
            "finetune",
        )?;
        Ok(StudentSet { model, stats })
    }
}
