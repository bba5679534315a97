//! End-to-end experiment orchestration: ingest, split, augment, weak
//! annotation, teacher training, consistency filtering, student pretraining,
//! DMI scoring, weighted fine-tuning, evaluation, and the baseline runs.
//! Stage artifacts live under `out_dir/seed{N}/` with content-hash sidecars;
//! a rerun reuses an artifact only when both the configuration fingerprint
//! and the file bytes still match.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    annotate, extract_templates, filter_consistency, ingest_external, AnnotateError, NoiseConfig,
};
use crate::augment::{swap_augment, AugmentConfig, AugmentError};
use crate::corpus::{
    build_vocab, load_e2e_csv, load_weak_jsonl, split, synth_benchmark, value_pools,
    write_weak_jsonl, CorpusError, Dataset, ParallelPair, SynthSpec,
};
use crate::eval::{
    append_csv_row, evaluate_model, evaluate_split, write_report, write_timings, EvalError,
    RunReport,
};
use crate::kernel::KernelError;
use crate::models::{DecodeMode, ModelConfig, ModelSet};
use crate::mr::{
    schema_from_corpus, serialize_mr, slot_fscore, MeaningRepresentation, MrError, SlotName,
    SlotValue,
};
use crate::parallel::par_map;
use crate::trainer::{
    StudentSet, TeacherSet, TrainConfig, TrainError, TrainStats, Trainer,
};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Mr(#[from] MrError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Message(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            PipelineError::Stage {
                source: StageError::Train(TrainError::Diverged { .. }),
                ..
            }
        )
    }
}

fn at<E: Into<StageError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    E2eCsv { path: PathBuf },
    Synth { spec: SynthSpec },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanBudget {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakSource {
    Annotate { noise: NoiseConfig },
    External { path: PathBuf },
}

pub const KNOWN_BASELINES: [&str; 4] = ["decoupled", "joint", "joint+aug", "step1"];

fn default_filter_threshold() -> f64 {
    0.7
}
fn default_augment_per_mr() -> usize {
    1
}
fn default_baselines() -> Vec<String> {
    KNOWN_BASELINES.iter().map(|s| s.to_string()).collect()
}
fn default_eval_beam() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub clean_budget: CleanBudget,
    /// Swapped MR variants added to the annotation input, per clean pair.
    #[serde(default = "default_augment_per_mr")]
    pub augment_per_mr: usize,
    pub weak: WeakSource,
    #[serde(default = "default_filter_threshold")]
    pub filter_threshold: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    /// Beam width for evaluation decoding; 0 or 1 means greedy.
    #[serde(default = "default_eval_beam")]
    pub eval_beam: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.clean_budget {
            CleanBudget::Count(k) if k < 1 => {
                return Err(PipelineError::BadConfig("clean budget must be >= 1".into()))
            }
            CleanBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(PipelineError::BadConfig(format!(
                    "clean budget fraction {} outside (0, 1]",
                    f
                )))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) || self.filter_threshold.is_nan() {
            return Err(PipelineError::BadConfig(format!(
                "filter threshold {} outside [0, 1]",
                self.filter_threshold
            )));
        }
        if self.seeds.is_empty() {
            return Err(PipelineError::BadConfig("at least one seed required".into()));
        }
        for b in &self.baselines {
            if !KNOWN_BASELINES.contains(&b.as_str()) {
                return Err(PipelineError::BadConfig(format!(
                    "unknown baseline {:?} (known: {})",
                    b,
                    KNOWN_BASELINES.join(", ")
                )));
            }
        }
        if let WeakSource::Annotate { noise } = &self.weak {
            noise
                .validate()
                .map_err(|e| PipelineError::BadConfig(e.to_string()))?;
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::BadConfig(format!("{}: {}", path.display(), e)))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::BadConfig(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_fingerprint(cfg: &PipelineConfig, seed: u64) -> u64 {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    fnv1a(format!("{}|seed{}", json, seed).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    fp: String,
    content: String,
}

/// Content-addressed reuse of per-seed stage artifacts.
struct StageCache {
    dir: PathBuf,
    fp: u64,
}

impl StageCache {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn sidecar_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}.hash", name))
    }

    /// True when the artifact exists and matches its sidecar: same config
    /// fingerprint and same file bytes.
    fn check(&self, name: &str) -> bool {
        let bytes = match fs::read(self.path(name)) {
            Ok(b) => b,
            Err(_) => return false,
        };
        let side: Sidecar = match fs::read_to_string(self.sidecar_path(name))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
        {
            Some(s) => s,
            None => return false,
        };
        side.fp == format!("{:016x}", self.fp)
            && side.content == format!("{:016x}", fnv1a(&bytes))
    }

    /// Record the sidecar for a freshly written artifact.
    fn seal(&self, name: &str) -> Result<(), PipelineError> {
        let bytes = fs::read(self.path(name)).map_err(at("cache"))?;
        let side = Sidecar {
            fp: format!("{:016x}", self.fp),
            content: format!("{:016x}", fnv1a(&bytes)),
        };
        fs::write(
            self.sidecar_path(name),
            serde_json::to_string(&side).map_err(at("cache"))?,
        )
        .map_err(at("cache"))?;
        Ok(())
    }
}

/// One JSONL row of the DMI score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmiRecord {
    pub id: u64,
    pub mi_xy: f64,
    pub mi_yx: f64,
    pub dmi: f64,
    pub c: f64,
}

pub fn write_dmi_jsonl(records: &[DmiRecord], path: &Path) -> Result<(), StageError> {
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_dmi_jsonl(path: &Path) -> Result<Vec<DmiRecord>, StageError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Replace one slot value in `fraction` of the pairs (rounded) with a
/// different value from the pools, leaving the text alone. Returns the
/// corrupted indices, sorted.
pub fn corrupt_pairs(
    pairs: &mut [ParallelPair],
    fraction: f64,
    pools: &BTreeMap<SlotName, Vec<SlotValue>>,
    seed: u64,
) -> Result<Vec<usize>, PipelineError> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(PipelineError::BadConfig(format!(
            "corruption fraction {} outside [0, 1]",
            fraction
        )));
    }
    let n = pairs.len();
    let count = (n as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut corrupted = Vec::new();
    for &i in &order {
        if corrupted.len() == count {
            break;
        }
        let current = pairs[i].mr.pairs().to_vec();
        let mut slot_order: Vec<usize> = (0..current.len()).collect();
        slot_order.shuffle(&mut rng);
        let mut replaced = false;
        for si in slot_order {
            let (name, value) = &current[si];
            let alternatives: Vec<&SlotValue> = pools
                .get(name)
                .map(|pool| pool.iter().filter(|v| *v != value).collect())
                .unwrap_or_default();
            if alternatives.is_empty() {
                continue;
            }
            let pick = alternatives[rng.random_range(0..alternatives.len())].clone();
            let mut rebuilt = current.clone();
            rebuilt[si] = (name.clone(), pick);
            pairs[i].mr = MeaningRepresentation::from_pairs(rebuilt);
            replaced = true;
            break;
        }
        if replaced {
            corrupted.push(i);
        }
    }
    if corrupted.len() < count {
        return Err(at("corrupt")(StageError::Message(format!(
            "only {} of {} requested pairs could be corrupted",
            corrupted.len(),
            count
        ))));
    }
    corrupted.sort_unstable();
    Ok(corrupted)
}

/// Fraction of pairs whose text, mapped back to an MR by `true_mr`, does
/// not fully match the paired MR.
pub fn corruption_rate<F>(pairs: &[ParallelPair], true_mr: F) -> f64
where
    F: Fn(&[String]) -> MeaningRepresentation + Sync + Send,
{
    if pairs.is_empty() {
        return 0.0;
    }
    let flags = par_map(pairs, |p| slot_fscore(&true_mr(&p.text), &p.mr).f1 < 1.0);
    flags.iter().filter(|&&f| f).count() as f64 / pairs.len() as f64
}

struct PreparedData {
    /// Clean pairs plus the unlabeled pools every phase shares.
    clean: Dataset,
    /// Swapped MR variants, already merged into the MR pool.
    augmented: Vec<MeaningRepresentation>,
    dev: Vec<ParallelPair>,
    test: Vec<ParallelPair>,
    /// First id past the base corpus; weak-side ids start here.
    id_offset: u64,
}

/// Ingest, split, clean budget, and value-swap augmentation. Cheap enough
/// to recompute every run, so no cache involvement.
fn prepare_data(cfg: &PipelineConfig, seed: u64) -> Result<PreparedData, PipelineError> {
    let base = match &cfg.data {
        DataSource::Synth { spec } => {
            let mut sp = spec.clone();
            sp.seed = seed;
            synth_benchmark(&sp).map_err(at("ingest"))?.0
        }
        DataSource::E2eCsv { path } => {
            let load = load_e2e_csv(path).map_err(at("ingest"))?;
            if !load.skipped.is_empty() {
                log::warn!(target: "ingest", "skipped {} unparseable rows", load.skipped.len());
            }
            load.dataset
        }
    };
    let (train, dev_ds, test_ds) = split(&base, (0.8, 0.1, 0.1), seed).map_err(at("split"))?;
    let k = match cfg.clean_budget {
        CleanBudget::Count(k) => k,
        CleanBudget::Fraction(f) => ((train.pairs.len() as f64 * f).round() as usize).max(1),
    };
    if k > train.pairs.len() {
        return Err(at("split")(StageError::Message(format!(
            "clean budget {} exceeds the {} training pairs",
            k,
            train.pairs.len()
        ))));
    }
    let clean_pairs: Vec<ParallelPair> = train.pairs[..k].to_vec();
    let rest = &train.pairs[k..];

    let mut pool_mrs = train.unlabeled_mrs.clone();
    pool_mrs.extend(rest.iter().map(|p| p.mr.clone()));
    let mut pool_texts = train.unlabeled_texts.clone();
    pool_texts.extend(rest.iter().map(|p| p.text.clone()));

    let mut augmented = Vec::new();
    if cfg.augment_per_mr > 0 {
        let clean_mrs: Vec<MeaningRepresentation> =
            clean_pairs.iter().map(|p| p.mr.clone()).collect();
        let pools = value_pools(clean_mrs.iter());
        let out = swap_augment(
            &clean_mrs,
            &pools,
            &AugmentConfig {
                target_count: k * cfg.augment_per_mr,
                dedup_against_source: true,
                seed: seed.wrapping_add(11),
            },
        )
        .map_err(at("augment"))?;
        if out.exhausted {
            log::warn!(target: "augment", "value-swap space exhausted at {} MRs", out.mrs.len());
        }
        log::info!(target: "augment", "added {} swapped MRs", out.mrs.len());
        pool_mrs.extend(out.mrs.iter().cloned());
        augmented = out.mrs;
    }

    // ids must stay unique across the combined clean + weak set
    let id_offset = base.pairs.iter().map(|p| p.id).max().unwrap_or(0) + 1;

    Ok(PreparedData {
        clean: Dataset {
            pairs: clean_pairs,
            unlabeled_mrs: pool_mrs,
            unlabeled_texts: pool_texts,
        },
        augmented,
        dev: dev_ds.pairs,
        test: test_ds.pairs,
        id_offset,
    })
}

/// Weak pairs from the configured source, ids renumbered past the clean set.
fn prepare_weak(
    cfg: &PipelineConfig,
    seed: u64,
    data: &PreparedData,
    cache: &StageCache,
) -> Result<Vec<ParallelPair>, PipelineError> {
    let weak_path = cache.path("weak_raw.jsonl");
    let mut weak_raw: Vec<ParallelPair> = match &cfg.weak {
        WeakSource::Annotate { noise } => {
            if cache.check("weak_raw.jsonl") {
                log::info!(target: "annotate", "reusing cached weak_raw.jsonl");
                load_weak_jsonl(&weak_path).map_err(at("annotate"))?
            } else {
                let bank = extract_templates(&data.clean.pairs);
                let mut nz = noise.clone();
                nz.seed = seed.wrapping_add(7);
                let pairs =
                    annotate(&data.clean.unlabeled_mrs, &bank, &nz).map_err(at("annotate"))?;
                write_weak_jsonl(&pairs, &weak_path).map_err(at("annotate"))?;
                cache.seal("weak_raw.jsonl")?;
                pairs
            }
        }
        WeakSource::External { path } => ingest_external(path).map_err(at("annotate"))?,
    };
    for (i, pair) in weak_raw.iter_mut().enumerate() {
        pair.id = data.id_offset + i as u64;
    }
    log::info!(target: "annotate", "{} weak pairs", weak_raw.len());
    Ok(weak_raw)
}

fn cached_model(cache: &StageCache, name: &str, trainer: &Trainer) -> Option<(ModelSet, TrainStats)> {
    let ckpt = format!("{}.ckpt", name);
    let stats_file = format!("{}.stats.json", name);
    if !cache.check(&ckpt) || !cache.check(&stats_file) {
        return None;
    }
    let model = ModelSet::load(&cache.path(&ckpt)).ok()?;
    if model.vocab.hash64() != trainer.vocab.hash64() {
        return None;
    }
    let stats: TrainStats =
        serde_json::from_str(&fs::read_to_string(cache.path(&stats_file)).ok()?).ok()?;
    log::info!(target: "cache", "reusing {}", ckpt);
    Some((model, stats))
}

fn store_model(
    cache: &StageCache,
    name: &str,
    model: &ModelSet,
    stats: &TrainStats,
) -> Result<(), PipelineError> {
    let ckpt = format!("{}.ckpt", name);
    let stats_file = format!("{}.stats.json", name);
    model.save(&cache.path(&ckpt)).map_err(at("cache"))?;
    fs::write(
        cache.path(&stats_file),
        serde_json::to_string_pretty(stats).map_err(at("cache"))?,
    )
    .map_err(at("cache"))?;
    cache.seal(&ckpt)?;
    cache.seal(&stats_file)
}

/// Stop points for running a prefix of the per-seed pipeline. Each stage
/// implies its predecessors; cached artifacts make repeated prefixes cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Augment,
    Annotate,
    Teacher,
    Filter,
    Student,
    Score,
    Finetune,
    Evaluate,
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub reports: Vec<RunReport>,
    pub timings: BTreeMap<String, f64>,
}

fn time_phase<T>(
    timings: &mut BTreeMap<String, f64>,
    name: &str,
    f: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(name.to_owned(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// The whole experiment for one seed. Returns one report per run
/// (`step1+2` plus the requested baselines) with artifacts cached under
/// `out_dir/seed{N}/`.
pub fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedOutcome, PipelineError> {
    run_seed_to(cfg, seed, None)
}

fn run_seed_to(
    cfg: &PipelineConfig,
    seed: u64,
    stop: Option<Stage>,
) -> Result<SeedOutcome, PipelineError> {
    let seed_dir = cfg.out_dir.join(format!("seed{}", seed));
    fs::create_dir_all(&seed_dir).map_err(at("setup"))?;
    let cache = StageCache {
        dir: seed_dir.clone(),
        fp: config_fingerprint(cfg, seed),
    };
    let mut timings = BTreeMap::new();
    let requested: BTreeSet<&str> = cfg.baselines.iter().map(|s| s.as_str()).collect();
    let mode = if cfg.eval_beam <= 1 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam(cfg.eval_beam)
    };
    let config_echo = serde_json::to_value(cfg).map_err(at("setup"))?;

    let data = time_phase(&mut timings, "prepare", || prepare_data(cfg, seed))?;
    let done = |timings: BTreeMap<String, f64>| {
        Ok(SeedOutcome {
            reports: Vec::new(),
            timings,
        })
    };
    if stop == Some(Stage::Augment) {
        let path = cache.path("augmented.jsonl");
        let mut out = fs::File::create(&path).map_err(at("augment"))?;
        for mr in &data.augmented {
            writeln!(out, "{}", serde_json::json!({ "mr": serialize_mr(mr) }))
                .map_err(at("augment"))?;
        }
        drop(out);
        cache.seal("augmented.jsonl")?;
        return done(timings);
    }

    let weak_raw = time_phase(&mut timings, "annotate", || {
        prepare_weak(cfg, seed, &data, &cache)
    })?;
    if stop == Some(Stage::Annotate) {
        return done(timings);
    }

    let mut vocab_ds = Dataset::from_pairs(
        data.clean
            .pairs
            .iter()
            .chain(weak_raw.iter())
            .cloned()
            .collect(),
    );
    vocab_ds.unlabeled_mrs = data.clean.unlabeled_mrs.clone();
    vocab_ds.unlabeled_texts = data.clean.unlabeled_texts.clone();
    let vocab = build_vocab(&vocab_ds, 1).map_err(at("vocab"))?;
    let schema = schema_from_corpus(vocab_ds.all_mrs(), 1_000_000).map_err(at("vocab"))?;
    let trainer = Trainer::new(vocab, schema, cfg.model.clone());

    // teacher: the joint recipe on clean data; also the frozen DMI scorer
    let teacher = time_phase(&mut timings, "teacher", || {
        if let Some((model, stats)) = cached_model(&cache, "teacher", &trainer) {
            return Ok(TeacherSet { model, stats });
        }
        let tcfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let teacher = trainer
            .train_teacher(&data.clean, &data.dev, &tcfg)
            .map_err(at("teacher"))?;
        store_model(&cache, "teacher", &teacher.model, &teacher.stats)?;
        Ok(teacher)
    })?;
    if stop == Some(Stage::Teacher) {
        return done(timings);
    }

    // consistency filter with the teacher's NLU
    let mut kept: Vec<ParallelPair> = time_phase(&mut timings, "filter", || {
        let kept_path = cache.path("kept.jsonl");
        if cache.check("kept.jsonl") {
            log::info!(target: "filter", "reusing cached kept.jsonl");
            return load_weak_jsonl(&kept_path).map_err(at("filter"));
        }
        let teacher_model = &teacher.model;
        let outcome = filter_consistency(
            weak_raw.clone(),
            |text| {
                teacher_model
                    .nlu_predict(text)
                    .unwrap_or_else(|_| MeaningRepresentation::empty())
            },
            cfg.filter_threshold,
        )
        .map_err(at("filter"))?;
        log::info!(
            target: "filter",
            "kept {} of {} weak pairs (histogram {:?})",
            outcome.kept.len(),
            outcome.kept.len() + outcome.rejected_count,
            outcome.histogram
        );
        write_weak_jsonl(&outcome.kept, &kept_path).map_err(at("filter"))?;
        cache.seal("kept.jsonl")?;
        Ok(outcome.kept)
    })?;
    if kept.is_empty() {
        return Err(at("filter")(StageError::Message(
            "consistency filter kept no weak pairs; lower the threshold".into(),
        )));
    }
    // the JSONL format drops ids, so renumber on both paths to keep
    // downstream artifacts independent of cache state
    for (i, pair) in kept.iter_mut().enumerate() {
        pair.id = data.id_offset + i as u64;
    }
    if stop == Some(Stage::Filter) {
        return done(timings);
    }

    // step 1: student pretrained on the kept weak pairs
    let student = time_phase(&mut timings, "student", || {
        if let Some((model, stats)) = cached_model(&cache, "student", &trainer) {
            return Ok(StudentSet { model, stats });
        }
        let mut weak_ds = Dataset::from_pairs(kept.clone());
        weak_ds.unlabeled_mrs = data.clean.unlabeled_mrs.clone();
        weak_ds.unlabeled_texts = data.clean.unlabeled_texts.clone();
        let scfg = TrainConfig {
            seed: seed.wrapping_add(101),
            ..cfg.train.clone()
        };
        let student = trainer
            .pretrain_student(&weak_ds, &data.dev, &scfg)
            .map_err(at("student"))?;
        store_model(&cache, "student", &student.model, &student.stats)?;
        Ok(student)
    })?;
    if stop == Some(Stage::Student) {
        return done(timings);
    }

    // step 2: DMI scores from the frozen teacher, then weighted fine-tuning
    let mut combined = Dataset::from_pairs(
        data.clean
            .pairs
            .iter()
            .chain(kept.iter())
            .cloned()
            .collect(),
    );
    combined.unlabeled_mrs = data.clean.unlabeled_mrs.clone();
    combined.unlabeled_texts = data.clean.unlabeled_texts.clone();

    let records: Vec<DmiRecord> = time_phase(&mut timings, "score", || {
        if cache.check("dmi.jsonl") {
            log::info!(target: "score", "reusing cached dmi.jsonl");
            return read_dmi_jsonl(&cache.path("dmi.jsonl")).map_err(at("score"));
        }
        let scores =
            Trainer::score_dataset(&teacher, &combined.pairs, &cfg.train).map_err(at("score"))?;
        let records: Vec<DmiRecord> = combined
            .pairs
            .iter()
            .zip(&scores)
            .map(|(p, s)| DmiRecord {
                id: p.id,
                mi_xy: s.mi_xy,
                mi_yx: s.mi_yx,
                dmi: s.dmi,
                c: s.c,
            })
            .collect();
        write_dmi_jsonl(&records, &cache.path("dmi.jsonl")).map_err(at("score"))?;
        cache.seal("dmi.jsonl")?;
        Ok(records)
    })?;
    if records.len() != combined.pairs.len() {
        return Err(at("score")(StageError::Message(format!(
            "{} score records for {} combined pairs",
            records.len(),
            combined.pairs.len()
        ))));
    }
    if stop == Some(Stage::Score) {
        return done(timings);
    }
    let weights: Vec<f64> = records.iter().map(|r| r.c).collect();

    let tuned = time_phase(&mut timings, "finetune", || {
        if let Some((model, stats)) = cached_model(&cache, "final", &trainer) {
            return Ok(StudentSet { model, stats });
        }
        let fcfg = TrainConfig {
            seed: seed.wrapping_add(202),
            ..cfg.train.clone()
        };
        let tuned = trainer
            .finetune_with_weights(student.clone(), &combined, &weights, &data.dev, &fcfg)
            .map_err(at("finetune"))?;
        store_model(&cache, "final", &tuned.model, &tuned.stats)?;
        Ok(tuned)
    })?;
    if stop == Some(Stage::Finetune) {
        return done(timings);
    }

    let mut reports = Vec::new();
    let mut push_report = |run_id: &str,
                           phase_steps: BTreeMap<String, usize>,
                           eval: crate::eval::EvalReport|
     -> Result<(), PipelineError> {
        let report = RunReport {
            run_id: run_id.to_owned(),
            seed,
            config_echo: config_echo.clone(),
            phase_steps,
            eval,
        };
        write_report(&report, &seed_dir.join(format!("metrics-{}.json", run_id)))
            .map_err(at("report"))?;
        reports.push(report);
        Ok(())
    };

    let eval_main = time_phase(&mut timings, "evaluate", || {
        evaluate_model(&tuned.model, &data.test, mode).map_err(at("evaluate"))
    })?;
    push_report(
        "step1+2",
        BTreeMap::from([
            ("teacher".to_owned(), teacher.stats.steps),
            ("student".to_owned(), student.stats.steps),
            ("finetune".to_owned(), tuned.stats.steps),
        ]),
        eval_main,
    )?;

    if requested.contains("step1") {
        let eval = time_phase(&mut timings, "evaluate_step1", || {
            evaluate_model(&student.model, &data.test, mode).map_err(at("evaluate"))
        })?;
        push_report(
            "step1",
            BTreeMap::from([("student".to_owned(), student.stats.steps)]),
            eval,
        )?;
    }

    if requested.contains("joint") {
        // identical recipe to the teacher, so its evaluation stands in
        let eval = time_phase(&mut timings, "evaluate_joint", || {
            evaluate_model(&teacher.model, &data.test, mode).map_err(at("evaluate"))
        })?;
        push_report(
            "joint",
            BTreeMap::from([("teacher".to_owned(), teacher.stats.steps)]),
            eval,
        )?;
    }

    if requested.contains("joint+aug") {
        let joint_aug = time_phase(&mut timings, "joint_aug", || {
            if let Some((model, stats)) = cached_model(&cache, "joint_aug", &trainer) {
                return Ok(TeacherSet { model, stats });
            }
            let mut ds = data.clean.clone();
            ds.unlabeled_texts
                .extend(weak_raw.iter().map(|p| p.text.clone()));
            let jcfg = TrainConfig {
                seed: seed.wrapping_add(405),
                ..cfg.train.clone()
            };
            let out = trainer
                .train_teacher(&ds, &data.dev, &jcfg)
                .map_err(at("joint_aug"))?;
            store_model(&cache, "joint_aug", &out.model, &out.stats)?;
            Ok(out)
        })?;
        let eval = time_phase(&mut timings, "evaluate_joint_aug", || {
            evaluate_model(&joint_aug.model, &data.test, mode).map_err(at("evaluate"))
        })?;
        push_report(
            "joint+aug",
            BTreeMap::from([("joint_aug".to_owned(), joint_aug.stats.steps)]),
            eval,
        )?;
    }

    if requested.contains("decoupled") {
        use crate::trainer::SupervisedDirection;
        let mut halves = Vec::new();
        for (name, dir, bump) in [
            ("dec_nlg", SupervisedDirection::NlgOnly, 303u64),
            ("dec_nlu", SupervisedDirection::NluOnly, 304u64),
        ] {
            let half = time_phase(&mut timings, name, || {
                if let Some((model, stats)) = cached_model(&cache, name, &trainer) {
                    return Ok(TeacherSet { model, stats });
                }
                let dcfg = TrainConfig {
                    seed: seed.wrapping_add(bump),
                    lambda_dtd: 0.0,
                    lambda_tdt: 0.0,
                    lambda_ae: 0.0,
                    sup_direction: dir,
                    ..cfg.train.clone()
                };
                let out = trainer
                    .train_teacher(&data.clean, &data.dev, &dcfg)
                    .map_err(at("decoupled"))?;
                store_model(&cache, name, &out.model, &out.stats)?;
                Ok(out)
            })?;
            halves.push(half);
        }
        let eval = time_phase(&mut timings, "evaluate_decoupled", || {
            evaluate_split(&halves[0].model, &halves[1].model, &data.test, mode)
                .map_err(at("evaluate"))
        })?;
        push_report(
            "decoupled",
            BTreeMap::from([
                ("dec_nlg".to_owned(), halves[0].stats.steps),
                ("dec_nlu".to_owned(), halves[1].stats.steps),
            ]),
            eval,
        )?;
    }

    Ok(SeedOutcome { reports, timings })
}

/// Run the pipeline prefix ending at `stage` for one seed, reusing cached
/// artifacts from earlier invocations. Returns the paths of the artifacts
/// the stage is responsible for; timings land in the seed directory.
pub fn run_stage(
    cfg: &PipelineConfig,
    seed: u64,
    stage: Stage,
) -> Result<Vec<PathBuf>, PipelineError> {
    cfg.validate()?;
    let stop = match stage {
        Stage::Evaluate => None,
        s => Some(s),
    };
    let outcome = run_seed_to(cfg, seed, stop)?;
    let dir = cfg.out_dir.join(format!("seed{}", seed));
    write_timings(&outcome.timings, &dir.join("timings.json")).map_err(at("report"))?;
    let files = match stage {
        Stage::Augment => vec![dir.join("augmented.jsonl")],
        Stage::Annotate => vec![dir.join("weak_raw.jsonl")],
        Stage::Teacher => vec![dir.join("teacher.ckpt"), dir.join("teacher.stats.json")],
        Stage::Filter => vec![dir.join("kept.jsonl")],
        Stage::Student => vec![dir.join("student.ckpt"), dir.join("student.stats.json")],
        Stage::Score => vec![dir.join("dmi.jsonl")],
        Stage::Finetune => vec![dir.join("final.ckpt"), dir.join("final.stats.json")],
        Stage::Evaluate => outcome
            .reports
            .iter()
            .map(|r| dir.join(format!("metrics-{}.json", r.run_id)))
            .collect(),
    };
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub n: usize,
    pub mean_bleu: f64,
    pub stddev_bleu: f64,
    pub mean_joint_accuracy: f64,
    pub stddev_joint_accuracy: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub runs: BTreeMap<String, MetricStats>,
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[RunReport]) -> Aggregate {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut runs = BTreeMap::new();
    let ids: BTreeSet<&str> = reports.iter().map(|r| r.run_id.as_str()).collect();
    for id in ids {
        let group: Vec<&RunReport> = reports.iter().filter(|r| r.run_id == id).collect();
        let bleus: Vec<f64> = group.iter().map(|r| r.eval.bleu.bleu).collect();
        let joints: Vec<f64> = group.iter().map(|r| r.eval.nlu.joint_accuracy).collect();
        let f1s: Vec<f64> = group.iter().map(|r| r.eval.nlu.f1).collect();
        let (mean_bleu, stddev_bleu) = mean_stddev(&bleus);
        let (mean_joint, stddev_joint) = mean_stddev(&joints);
        let (mean_f1, _) = mean_stddev(&f1s);
        runs.insert(
            id.to_owned(),
            MetricStats {
                n: group.len(),
                mean_bleu,
                stddev_bleu,
                mean_joint_accuracy: mean_joint,
                stddev_joint_accuracy: stddev_joint,
                mean_f1,
            },
        );
    }
    Aggregate { seeds, runs }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub reports: Vec<RunReport>,
    pub aggregate: Aggregate,
}

/// Run every seed, append the sweep CSV, and write the aggregate. The sweep
/// summary files are regenerated from scratch each invocation; per-seed
/// stage artifacts are reused when their hashes still match.
pub fn pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(at("setup"))?;
    let sweep = cfg.out_dir.join("sweep.csv");
    if sweep.exists() {
        fs::remove_file(&sweep).map_err(at("setup"))?;
    }
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        log::info!(target: "pipeline", "seed {} starting", seed);
        let outcome = run_seed(cfg, seed)?;
        for r in &outcome.reports {
            append_csv_row(r, &sweep).map_err(at("report"))?;
        }
        write_timings(
            &outcome.timings,
            &cfg.out_dir.join(format!("seed{}", seed)).join("timings.json"),
        )
        .map_err(at("report"))?;
        reports.extend(outcome.reports);
    }
    let agg = aggregate(&reports);
    fs::write(
        cfg.out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&agg).map_err(at("report"))? + "\n",
    )
    .map_err(at("report"))?;
    Ok(PipelineOutcome {
        reports,
        aggregate: agg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthGrammar;

    fn tiny_config(out_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            data: DataSource::Synth {
                spec: SynthSpec {
                    n_slots: 3,
                    values_per_slot: 3,
                    n_clean: 30,
                    n_unlabeled_mrs: 12,
                    seed: 0,
                },
            },
            clean_budget: CleanBudget::Count(8),
            augment_per_mr: 1,
            weak: WeakSource::Annotate {
                noise: NoiseConfig {
                    p_drop: 0.1,
                    p_hallucinate: 0.1,
                    p_lexical: 0.05,
                    seed: 0,
                },
            },
            filter_threshold: 0.3,
            train: TrainConfig {
                batch: 4,
                max_steps: 8,
                eval_every: 4,
                patience: 50,
                base_lr: 0.01,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                embed_dim: 8,
                hidden_dim: 8,
                latent_dim: 6,
                encoder_layers: 1,
                max_decode_len: 25,
            },
            out_dir,
            seeds: vec![3],
            baselines: default_baselines(),
            eval_beam: 1,
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.clean_budget = CleanBudget::Count(0);
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.filter_threshold = 1.5;
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.baselines = vec!["nonsense".into()];
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        assert!(tiny_config(dir.path().to_path_buf()).validate().is_ok());
    }

    #[test]
    fn budget_beyond_train_size_fails_in_split_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.clean_budget = CleanBudget::Count(500);
        let err = pipeline(&cfg).unwrap_err();
        match err {
            PipelineError::Stage { stage, .. } => assert_eq!(stage, "split"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn corruption_is_exact_and_grammar_detectable() {
        let spec = SynthSpec {
            n_slots: 4,
            values_per_slot: 4,
            n_clean: 40,
            n_unlabeled_mrs: 4,
            seed: 9,
        };
        let (ds, grammar) = synth_benchmark(&spec).unwrap();
        let mut pairs = ds.pairs.clone();
        let pools = value_pools(pairs.iter().map(|p| &p.mr));
        let corrupted = corrupt_pairs(&mut pairs, 0.3, &pools, 42).unwrap();
        assert_eq!(corrupted.len(), 12);
        let invert = |g: &SynthGrammar, text: &[String]| g.invert(text);
        for (i, pair) in pairs.iter().enumerate() {
            let f1 = slot_fscore(&invert(&grammar, &pair.text), &pair.mr).f1;
            if corrupted.contains(&i) {
                assert!(f1 < 1.0, "pair {} should read as corrupted", i);
            } else {
                assert_eq!(f1, 1.0, "pair {} should stay clean", i);
            }
        }
        let rate = corruption_rate(&pairs, |text| grammar.invert(text));
        assert!((rate - 0.3).abs() < 1e-9);

        let mut again = ds.pairs.clone();
        let repeat = corrupt_pairs(&mut again, 0.3, &pools, 42).unwrap();
        assert_eq!(corrupted, repeat);
    }

    #[test]
    fn dmi_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dmi.jsonl");
        let records = vec![
            DmiRecord {
                id: 3,
                mi_xy: 0.25,
                mi_yx: -0.5,
                dmi: (0.75f64).exp(),
                c: 0.4,
            },
            DmiRecord {
                id: 9,
                mi_xy: 0.0,
                mi_yx: 0.0,
                dmi: 1.0,
                c: 1.0,
            },
        ];
        write_dmi_jsonl(&records, &path).unwrap();
        assert_eq!(read_dmi_jsonl(&path).unwrap(), records);
    }

    #[test]
    fn end_to_end_runs_and_repeats_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().to_path_buf());
        let first = pipeline(&cfg).unwrap();
        let ids: BTreeSet<String> = first.reports.iter().map(|r| r.run_id.clone()).collect();
        for id in ["step1+2", "step1", "joint", "joint+aug", "decoupled"] {
            assert!(ids.contains(id), "missing run {}", id);
        }
        assert_eq!(first.aggregate.runs.len(), 5);
        let seed_dir = dir.path().join("seed3");
        for artifact in [
            "weak_raw.jsonl",
            "kept.jsonl",
            "teacher.ckpt",
            "student.ckpt",
            "dmi.jsonl",
            "final.ckpt",
            "metrics-step1+2.json",
            "timings.json",
        ] {
            assert!(seed_dir.join(artifact).exists(), "missing {}", artifact);
        }
        let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 6);

        let metrics_before =
            std::fs::read(seed_dir.join("metrics-step1+2.json")).unwrap();
        let second = pipeline(&cfg).unwrap();
        let metrics_after = std::fs::read(seed_dir.join("metrics-step1+2.json")).unwrap();
        assert_eq!(metrics_before, metrics_after);
        assert_eq!(first.reports.len(), second.reports.len());
        for (a, b) in first.reports.iter().zip(&second.reports) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tampered_stage_artifact_is_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.baselines = vec![];
        pipeline(&cfg).unwrap();
        let dmi_path = dir.path().join("seed3").join("dmi.jsonl");
        let original = std::fs::read(&dmi_path).unwrap();
        std::fs::write(&dmi_path, b"{\"id\":0,\"mi_xy\":9.0,\"mi_yx\":0.0,\"dmi\":1.0,\"c\":1.0}\n")
            .unwrap();
        pipeline(&cfg).unwrap();
        let rebuilt = std::fs::read(&dmi_path).unwrap();
        assert_eq!(rebuilt, original);
    }

    #[test]
    fn stage_prefixes_share_artifacts_and_match_full_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.baselines = vec!["step1".into()];

        let augmented = run_stage(&cfg, 3, Stage::Augment).unwrap();
        assert!(augmented[0].exists());
        let line = std::fs::read_to_string(&augmented[0])
            .unwrap()
            .lines()
            .next()
            .map(str::to_owned)
            .unwrap();
        assert!(line.contains("\"mr\""));

        let filtered = run_stage(&cfg, 3, Stage::Filter).unwrap();
        assert!(filtered[0].exists());
        for name in ["weak_raw.jsonl", "teacher.ckpt"] {
            assert!(dir.path().join("seed3").join(name).exists(), "missing {}", name);
        }
        assert!(!dir.path().join("seed3").join("dmi.jsonl").exists());

        let scored = run_stage(&cfg, 3, Stage::Score).unwrap();
        let dmi_from_stage = std::fs::read(&scored[0]).unwrap();

        let metrics = run_stage(&cfg, 3, Stage::Evaluate).unwrap();
        assert_eq!(metrics.len(), 2);
        for m in &metrics {
            assert!(m.exists(), "missing {}", m.display());
        }
        assert_eq!(std::fs::read(&scored[0]).unwrap(), dmi_from_stage);

        // a fresh directory reaching the same stage in one shot agrees
        let other = tempfile::tempdir().unwrap();
        let mut direct = tiny_config(other.path().to_path_buf());
        direct.baselines = vec!["step1".into()];
        run_stage(&direct, 3, Stage::Score).unwrap();
        let dmi_direct = std::fs::read(other.path().join("seed3").join("dmi.jsonl")).unwrap();
        assert_eq!(dmi_direct, dmi_from_stage);
    }
}
