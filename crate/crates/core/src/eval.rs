//! Corpus BLEU-4 for generation, joint accuracy and micro slot P/R/F1 for
//! understanding, and the machine-readable run reports the sweep tooling
//! consumes. Metrics files are deterministic; wall-clock timings go to a
//! separate file so reports stay byte-comparable across runs.

use std::collections::HashMap;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ParallelPair;
use crate::kernel::KernelError;
use crate::models::{DecodeMode, ModelSet};
use crate::mr::MeaningRepresentation;
use crate::parallel::par_map;

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
    pub bleu: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NluReport {
    pub joint_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with one reference per hypothesis. Clipped n-gram
/// matches and lengths are pooled over the corpus before any ratio is
/// taken; zero precisions are floored at 1e-9 inside the log.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_tokens = 0usize;
    let mut ref_tokens = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_tokens += hyp.len();
        ref_tokens += rf.len();
        for n in 1..=4 {
            let hyp_grams = ngram_counts(hyp, n);
            let ref_grams = ngram_counts(rf, n);
            for (gram, count) in &hyp_grams {
                let clip = ref_grams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += (*count).min(clip);
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let p: Vec<f64> = (0..4)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    if hyp_tokens == 0 {
        return Ok(BleuReport {
            p1: 0.0,
            p2: 0.0,
            p3: 0.0,
            p4: 0.0,
            bp: 0.0,
            bleu: 0.0,
            hyp_tokens,
            ref_tokens,
        });
    }
    let bp = if hyp_tokens >= ref_tokens {
        1.0
    } else {
        (1.0 - ref_tokens as f64 / hyp_tokens as f64).exp()
    };
    let log_mean: f64 = p.iter().map(|&pn| 0.25 * pn.max(EPS).ln()).sum();
    Ok(BleuReport {
        p1: p[0],
        p2: p[1],
        p3: p[2],
        p4: p[3],
        bp,
        bleu: bp * log_mean.exp(),
        hyp_tokens,
        ref_tokens,
    })
}

/// Fraction of samples whose predicted MR equals the gold MR on every slot.
pub fn joint_accuracy(
    pred: &[MeaningRepresentation],
    gold: &[MeaningRepresentation],
) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            hyps: pred.len(),
            refs: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let exact = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.same_pairs(g))
        .count();
    Ok(exact as f64 / pred.len() as f64)
}

/// Micro precision/recall/F1: slot-value matches pooled across the corpus
/// under the same matching rule as the per-sample F-score.
pub fn slot_prf(
    pred: &[MeaningRepresentation],
    gold: &[MeaningRepresentation],
) -> Result<(f64, f64, f64), EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            hyps: pred.len(),
            refs: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (mut matched, mut pred_total, mut gold_total) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let rep = crate::mr::slot_fscore(p, g);
        matched += rep.matched;
        pred_total += p.len();
        gold_total += g.len();
    }
    if pred_total == 0 && gold_total == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let precision = if pred_total == 0 {
        0.0
    } else {
        matched as f64 / pred_total as f64
    };
    let recall = if gold_total == 0 {
        0.0
    } else {
        matched as f64 / gold_total as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

pub fn nlu_report(
    pred: &[MeaningRepresentation],
    gold: &[MeaningRepresentation],
) -> Result<NluReport, EvalError> {
    let joint = joint_accuracy(pred, gold)?;
    let (precision, recall, f1) = slot_prf(pred, gold)?;
    Ok(NluReport {
        joint_accuracy: joint,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub bleu: BleuReport,
    pub nlu: NluReport,
}

/// Decode the test set in both directions and score it. Decoding is
/// read-only and runs sample-parallel.
pub fn evaluate_model(
    model: &ModelSet,
    test: &[ParallelPair],
    mode: DecodeMode,
) -> Result<EvalReport, EvalError> {
    evaluate_split(model, model, test, mode)
}

/// Same scoring with generation and understanding served by different
/// models (separately trained baselines).
pub fn evaluate_split(
    nlg_model: &ModelSet,
    nlu_model: &ModelSet,
    test: &[ParallelPair],
    mode: DecodeMode,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let decoded: Result<Vec<(Vec<String>, MeaningRepresentation)>, KernelError> =
        par_map(test, |pair| {
            let hyp = nlg_model.nlg_generate(&pair.mr, mode)?.tokens;
            let pred = nlu_model.nlu_predict(&pair.text)?;
            Ok((hyp, pred))
        })
        .into_iter()
        .collect();
    let decoded = decoded?;
    let hyps: Vec<Vec<String>> = decoded.iter().map(|(h, _)| h.clone()).collect();
    let refs: Vec<Vec<String>> = test.iter().map(|p| p.text.clone()).collect();
    let preds: Vec<MeaningRepresentation> = decoded.into_iter().map(|(_, p)| p).collect();
    let golds: Vec<MeaningRepresentation> = test.iter().map(|p| p.mr.clone()).collect();
    Ok(EvalReport {
        n: test.len(),
        bleu: bleu4(&hyps, &refs)?,
        nlu: nlu_report(&preds, &golds)?,
    })
}

/// Everything one run writes into its metrics file. Deliberately excludes
/// wall time; see `write_timings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    pub phase_steps: BTreeMap<String, usize>,
    pub eval: EvalReport,
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport, EvalError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_timings(timings: &BTreeMap<String, f64>, path: &Path) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(timings)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub const CSV_HEADER: [&str; 12] = [
    "run", "seed", "bleu", "p1", "p2", "p3", "p4", "bp", "joint_accuracy", "precision", "recall",
    "f1",
];

/// Append one flat row for sweep aggregation, writing the header first when
/// the file does not exist yet.
pub fn append_csv_row(report: &RunReport, path: &Path) -> Result<(), EvalError> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    let b = &report.eval.bleu;
    let n = &report.eval.nlu;
    w.write_record([
        report.run_id.clone(),
        report.seed.to_string(),
        b.bleu.to_string(),
        b.p1.to_string(),
        b.p2.to_string(),
        b.p3.to_string(),
        b.p4.to_string(),
        b.bp.to_string(),
        n.joint_accuracy.to_string(),
        n.precision.to_string(),
        n.recall.to_string(),
        n.f1.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn mr(s: &str) -> MeaningRepresentation {
        MeaningRepresentation::parse(s).unwrap()
    }

    #[test]
    fn perfect_match_scores_one() {
        let corpus = vec![toks("the cat sat on the mat"), toks("a dog barks loudly here")];
        let rep = bleu4(&corpus, &corpus).unwrap();
        assert_eq!(rep.bleu, 1.0);
        assert_eq!(rep.bp, 1.0);
        assert_eq!(rep.p4, 1.0);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let rep = bleu4(&[vec![]], &[toks("a b c")]).unwrap();
        assert_eq!(rep.bleu, 0.0);
        assert_eq!(rep.hyp_tokens, 0);
        assert_eq!(rep.ref_tokens, 3);
    }

    #[test]
    fn brevity_penalty_hand_oracle() {
        let rep = bleu4(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(rep.p1, 1.0);
        assert_eq!(rep.p2, 1.0);
        assert_eq!(rep.p3, 1.0);
        assert_eq!(rep.p4, 1.0);
        assert!((rep.bp - (-0.25f64).exp()).abs() < 1e-12);
        assert!((rep.bleu - (-0.25f64).exp()).abs() < 1e-12);
        assert!((rep.bleu - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn epsilon_floor_keeps_score_positive() {
        let rep = bleu4(&[toks("a b x d")], &[toks("a b c d")]).unwrap();
        assert_eq!(rep.p4, 0.0);
        assert!(rep.bleu > 0.0);
        assert!(rep.bleu < 0.3);
    }

    #[test]
    fn corpus_pooling_differs_from_mean_of_sentences() {
        let hyps = vec![toks("a b c d"), toks("x y")];
        let refs = vec![toks("a b c d"), toks("p q")];
        let pooled = bleu4(&hyps, &refs).unwrap();
        // matches pooled before the ratio: p1 = 4/6, not mean(1.0, 0.0)
        assert!((pooled.p1 - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant_over_corpus_order() {
        let hyps = vec![toks("a b c d"), toks("e f g"), toks("h i")];
        let refs = vec![toks("a b c x"), toks("e f g h"), toks("h i j")];
        let fwd = bleu4(&hyps, &refs).unwrap();
        let rev_h: Vec<Vec<String>> = hyps.iter().rev().cloned().collect();
        let rev_r: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
        let rev = bleu4(&rev_h, &rev_r).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn score_never_exceeds_one() {
        let cases = vec![
            (vec![toks("a a a a a")], vec![toks("a b")]),
            (vec![toks("a b c d e f g")], vec![toks("a b c d")]),
            (vec![toks("a b"), toks("c d")], vec![toks("a b"), toks("c d")]),
        ];
        for (h, r) in cases {
            assert!(bleu4(&h, &r).unwrap().bleu <= 1.0);
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(bleu4(&[], &[]), Err(EvalError::EmptyCorpus)));
        assert!(matches!(
            bleu4(&[toks("a")], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            joint_accuracy(&[], &[]),
            Err(EvalError::EmptyCorpus)
        ));
        assert!(matches!(
            slot_prf(&[mr("a[b]")], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn joint_accuracy_counts_exact_sets() {
        let gold = vec![mr("a[x], b[y]"), mr("a[x]")];
        let exact = vec![mr("b[y], a[x]"), mr("a[x]")];
        assert_eq!(joint_accuracy(&exact, &gold).unwrap(), 1.0);
        let half = vec![mr("b[y], a[x]"), mr("a[z]")];
        assert_eq!(joint_accuracy(&half, &gold).unwrap(), 0.5);
    }

    #[test]
    fn micro_f1_matches_hand_enumeration() {
        let pred = vec![mr("name[Giraffe], eatType[pub]")];
        let gold = vec![mr("name[Giraffe], eatType[pub], area[riverside]")];
        let (p, r, f1) = slot_prf(&pred, &gold).unwrap();
        assert_eq!(p, 1.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_joint_accuracy_implies_perfect_f1() {
        let gold = vec![mr("a[x], b[y]"), mr("c[z]")];
        let rep = nlu_report(&gold.clone(), &gold).unwrap();
        assert_eq!(rep.joint_accuracy, 1.0);
        assert_eq!(rep.f1, 1.0);
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
    }

    fn sample_report(run: &str, seed: u64) -> RunReport {
        RunReport {
            run_id: run.to_owned(),
            seed,
            config_echo: serde_json::json!({"k": 10}),
            phase_steps: BTreeMap::from([("teacher".to_owned(), 120), ("finetune".to_owned(), 80)]),
            eval: EvalReport {
                n: 2,
                bleu: bleu4(&[toks("a b c d")], &[toks("a b c d e")]).unwrap(),
                nlu: nlu_report(&[mr("a[x]")], &[mr("a[x]")]).unwrap(),
            },
        }
    }

    #[test]
    fn report_round_trips_every_numeric_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let report = sample_report("step1+2", 7);
        write_report(&report, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(report, back);
        assert_eq!(report.eval.bleu.bleu.to_bits(), back.eval.bleu.bleu.to_bits());
    }

    #[test]
    fn sweep_csv_grows_one_row_per_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        for seed in 0..5 {
            append_csv_row(&sample_report("joint", seed), &path).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("run,seed,bleu"));
        assert!(lines[1].starts_with("joint,0,"));
        assert!(lines[5].starts_with("joint,4,"));
    }

    #[test]
    fn model_evaluation_produces_finite_report() {
        use crate::corpus::{build_vocab, synth_benchmark, SynthSpec};
        use crate::models::{ModelConfig, ModelSet};
        use crate::mr::schema_from_corpus;
        let (ds, _) = synth_benchmark(&SynthSpec {
            n_slots: 3,
            values_per_slot: 3,
            n_clean: 10,
            n_unlabeled_mrs: 4,
            seed: 3,
        })
        .unwrap();
        let vocab = build_vocab(&ds, 1).unwrap();
        let schema = schema_from_corpus(ds.all_mrs(), 1000).unwrap();
        let model = ModelSet::new(
            ModelConfig {
                embed_dim: 8,
                hidden_dim: 8,
                latent_dim: 6,
                encoder_layers: 1,
                max_decode_len: 20,
            },
            vocab,
            schema,
            9,
        );
        let rep = evaluate_model(&model, &ds.pairs, DecodeMode::Greedy).unwrap();
        assert_eq!(rep.n, ds.pairs.len());
        assert!(rep.bleu.bleu.is_finite());
        assert!((0.0..=1.0).contains(&rep.nlu.joint_accuracy));
    }
}
