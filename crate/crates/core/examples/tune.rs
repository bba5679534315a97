//! Scratch experiment driver for picking acceptance hyperparameters.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use dmiforge_core::corpus::{split, synth_benchmark, value_pools, Dataset, ParallelPair, SynthSpec};
use dmiforge_core::eval::evaluate_model;
use dmiforge_core::models::{DecodeMode, ModelConfig, ModelSet};
use dmiforge_core::mr::slot_fscore;
use dmiforge_core::pipeline::{
    corrupt_pairs, corruption_rate, run_seed, CleanBudget, DataSource, PipelineConfig, WeakSource,
};
use dmiforge_core::trainer::{TeacherSet, TrainConfig, TrainStats, Trainer, StudentSet};
use dmiforge_core::annotator::{filter_consistency, NoiseConfig};

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_slots: 5,
        values_per_slot: 4,
        n_clean: 300,
        n_unlabeled_mrs: 2000,
        seed,
    }
}

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: env_or("LR", 0.005),
        batch: env_or("BATCH", 8),
        max_steps: env_or("STEPS", 600),
        patience: env_or("PATIENCE", 8),
        eval_every: env_or("EVAL_EVERY", 25),
        lambda_sup: 1.0,
        lambda_dtd: env_or("L_DTD", 1.0),
        lambda_tdt: env_or("L_TDT", 1.0),
        lambda_ae: env_or("L_AE", 1.0),
        seed,
        rank_normalize: env_or("RANK", 1u8) == 1,
        length_normalize: env_or("LNORM", 0u8) == 1,
        ..TrainConfig::default()
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: env_or("EMB", 12),
        hidden_dim: env_or("HID", 16),
        latent_dim: env_or("LAT", 12),
        encoder_layers: 1,
        max_decode_len: 26,
    }
}

fn dummy_stats() -> TrainStats {
    TrainStats {
        steps: 0,
        evals: 0,
        best_dev_loss: f64::INFINITY,
        stopped_early: false,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(101);
    let out: PathBuf = PathBuf::from(std::env::var("OUT").unwrap_or_else(|_| "/tmp/tune-out".into()));

    let cfg = PipelineConfig {
        data: DataSource::Synth { spec: spec(0) },
        clean_budget: CleanBudget::Count(10),
        augment_per_mr: 1,
        weak: WeakSource::Annotate {
            noise: NoiseConfig {
                p_drop: 0.15,
                p_hallucinate: 0.15,
                p_lexical: 0.1,
                seed: 0,
            },
        },
        filter_threshold: 0.7,
        train: train_cfg(seed),
        model: model_cfg(),
        out_dir: out.clone(),
        seeds: vec![seed],
        baselines: vec!["step1".into(), "decoupled".into()],
        eval_beam: 1,
    };

    let t0 = Instant::now();
    let outcome = run_seed(&cfg, seed).unwrap();
    println!("== pipeline seed {} in {:.1}s ==", seed, t0.elapsed().as_secs_f64());
    for (k, v) in &outcome.timings {
        println!("  phase {:<18} {:>7.1}s", k, v);
    }
    let mut bleu: BTreeMap<String, f64> = BTreeMap::new();
    for r in &outcome.reports {
        println!(
            "  run {:<10} bleu {:.4} joint {:.4} f1 {:.4}",
            r.run_id, r.eval.bleu.bleu, r.eval.nlu.joint_accuracy, r.eval.nlu.f1
        );
        bleu.insert(r.run_id.clone(), r.eval.bleu.bleu);
    }
    println!(
        "  c2: step1+2 - step1 = {:+.4}, step1+2 - decoupled = {:+.4}",
        bleu["step1+2"] - bleu["step1"],
        bleu["step1+2"] - bleu["decoupled"]
    );

    // shared artifacts for criteria 3-5
    let dir = out.join(format!("seed{}", seed));
    let teacher = TeacherSet {
        model: ModelSet::load(&dir.join("teacher.ckpt")).unwrap(),
        stats: dummy_stats(),
    };
    let student = StudentSet {
        model: ModelSet::load(&dir.join("student.ckpt")).unwrap(),
        stats: dummy_stats(),
    };
    let (ds, grammar) = synth_benchmark(&spec(seed)).unwrap();
    let (train, dev, test) = split(&ds, (0.8, 0.1, 0.1), seed).unwrap();
    let clean10: Vec<ParallelPair> = train.pairs[..10].to_vec();

    // criterion 3/4 corpus: exact realizations of the unlabeled MRs, then 30%
    // value corruption
    let t3 = Instant::now();
    let mut weak: Vec<ParallelPair> = ds
        .unlabeled_mrs
        .iter()
        .enumerate()
        .map(|(i, m)| ParallelPair {
            id: 10_000 + i as u64,
            mr: m.clone(),
            text: grammar.realize(m),
            provenance: dmiforge_core::corpus::Provenance::Weak,
            source: "exact".into(),
        })
        .collect();
    let pools = value_pools(ds.unlabeled_mrs.iter());
    let corrupted_idx = corrupt_pairs(&mut weak, 0.3, &pools, seed.wrapping_add(17)).unwrap();
    println!(
        "corrupted {}/{} pairs, measured rate {:.3}",
        corrupted_idx.len(),
        weak.len(),
        corruption_rate(&weak, |t| grammar.invert(t))
    );

    // criterion 4: DMI separation on that set
    let tc = cfg.train.clone();
    let scores = Trainer::score_dataset(&teacher, &weak, &tc).unwrap();
    let (mut gap_clean, mut n_clean) = (0.0, 0usize);
    let (mut gap_bad, mut n_bad) = (0.0, 0usize);
    let (mut c_clean, mut c_bad) = (0.0, 0.0);
    for (p, s) in weak.iter().zip(&scores) {
        let f1 = slot_fscore(&grammar.invert(&p.text), &p.mr).f1;
        if f1 < 1.0 {
            gap_bad += (s.mi_xy - s.mi_yx).abs();
            c_bad += s.c;
            n_bad += 1;
        } else {
            gap_clean += (s.mi_xy - s.mi_yx).abs();
            c_clean += s.c;
            n_clean += 1;
        }
    }
    println!(
        "c4: mean|gap| clean {:.4} (n={}) corrupted {:.4} (n={}); mean c clean {:.4} corrupted {:.4}",
        gap_clean / n_clean as f64,
        n_clean,
        gap_bad / n_bad as f64,
        n_bad,
        c_clean / n_clean as f64,
        c_bad / n_bad as f64,
    );

    // criterion 3: weighted vs unweighted step-2 on a small corrupted weak set,
    // scored by a dedicated teacher trained on a larger clean slice
    let n3: usize = env_or("N3", 60);
    let k3: usize = env_or("K3", 50);
    let n3_bad = (n3 as f64 * 0.3).round() as usize;
    let trainer = Trainer::new(
        student.model.vocab.clone(),
        student.model.schema.clone(),
        student.model.config.clone(),
    );
    let t3t = Instant::now();
    let mut clean3 = Dataset::from_pairs(train.pairs[..k3].to_vec());
    clean3.unlabeled_mrs = train.unlabeled_mrs.clone();
    clean3.unlabeled_texts = train.pairs[k3..].iter().map(|p| p.text.clone()).collect();
    let t3cfg = TrainConfig {
        seed: seed.wrapping_add(900),
        ..tc.clone()
    };
    let teacher3 = trainer.train_teacher(&clean3, &dev.pairs, &t3cfg).unwrap();
    println!("c3: dedicated teacher on {} clean pairs ({:.1}s)", k3, t3t.elapsed().as_secs_f64());
    let is_swapped: Vec<bool> = {
        let mut v = vec![false; weak.len()];
        for &i in &corrupted_idx {
            v[i] = true;
        }
        v
    };
    let untouched: Vec<usize> = (0..weak.len()).filter(|&i| !is_swapped[i]).collect();
    let mut weak3: Vec<ParallelPair> = untouched[..n3 - n3_bad]
        .iter()
        .map(|&i| weak[i].clone())
        .collect();
    if env_or("MISALIGN", 1u8) == 1 {
        let js = &untouched[n3 - n3_bad..n3];
        for (a, &j) in js.iter().enumerate() {
            let mut p = weak[j].clone();
            p.text = weak[js[(a + 1) % js.len()]].text.clone();
            weak3.push(p);
        }
    } else {
        weak3.extend(corrupted_idx.iter().take(n3_bad).map(|&i| weak[i].clone()));
    }
    let bad3: Vec<bool> = weak3
        .iter()
        .map(|p| slot_fscore(&grammar.invert(&p.text), &p.mr).f1 < 1.0)
        .collect();
    println!(
        "c3: weak set {} pairs, measured rate {:.3}",
        weak3.len(),
        corruption_rate(&weak3, |t| grammar.invert(t))
    );
    let combined = Dataset::from_pairs(
        clean10.iter().chain(weak3.iter()).cloned().collect(),
    );
    let sc_cfg = TrainConfig {
        rank_normalize: env_or("C3RANK", 0u8) == 1,
        length_normalize: env_or("C3LNORM", 1u8) == 1,
        ..tc.clone()
    };
    let cscores = Trainer::score_dataset(&teacher3, &combined.pairs, &sc_cfg).unwrap();
    let weights: Vec<f64> = cscores.iter().map(|s| s.c).collect();
    let oracle: Vec<f64> = (0..combined.pairs.len())
        .map(|j| if j >= 10 && bad3[j - 10] { 0.0 } else { 1.0 })
        .collect();
    let (mut cc, mut nc, mut cb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (j, w) in weights.iter().enumerate() {
        if j >= 10 && bad3[j - 10] {
            cb += w;
            nb += 1;
        } else {
            cc += w;
            nc += 1;
        }
    }
    println!(
        "c3: mean c clean {:.4} (n={}) corrupted {:.4} (n={})",
        cc / nc as f64,
        nc,
        cb / nb as f64,
        nb
    );
    let ones = vec![1.0; combined.pairs.len()];
    let replicas: u64 = env_or("R", 3);
    let want_oracle = env_or("ORACLE", 0u8) == 1;
    let (mut sum_w, mut sum_u, mut sum_o) = (0.0, 0.0, 0.0);
    let tw = Instant::now();
    for r in 0..replicas {
        let fcfg = TrainConfig {
            seed: seed.wrapping_add(500 + 1000 * r),
            max_steps: env_or("FT3", cfg.train.max_steps),
            base_lr: env_or("LR3", cfg.train.base_lr),
            ..cfg.train.clone()
        };
        let fdev: &[ParallelPair] = if env_or("NODEV", 0u8) == 1 { &[] } else { &dev.pairs };
        let tuned_w = trainer
            .finetune_with_weights(student.clone(), &combined, &weights, fdev, &fcfg)
            .unwrap();
        let ew = evaluate_model(&tuned_w.model, &test.pairs, DecodeMode::Greedy).unwrap();
        let tuned_u = trainer
            .finetune_with_weights(student.clone(), &combined, &ones, fdev, &fcfg)
            .unwrap();
        let eu = evaluate_model(&tuned_u.model, &test.pairs, DecodeMode::Greedy).unwrap();
        let mut oracle_note = String::new();
        if want_oracle {
            let tuned_o = trainer
                .finetune_with_weights(student.clone(), &combined, &oracle, fdev, &fcfg)
                .unwrap();
            let eo = evaluate_model(&tuned_o.model, &test.pairs, DecodeMode::Greedy).unwrap();
            sum_o += eo.bleu.bleu;
            oracle_note = format!(" oracle {:.4}", eo.bleu.bleu);
        }
        println!(
            "c3: replica {} weighted {:.4} unweighted {:.4} diff {:+.4}{}",
            r,
            ew.bleu.bleu,
            eu.bleu.bleu,
            ew.bleu.bleu - eu.bleu.bleu,
            oracle_note
        );
        sum_w += ew.bleu.bleu;
        sum_u += eu.bleu.bleu;
    }
    let rr = replicas as f64;
    println!(
        "c3: weighted bleu {:.4} unweighted bleu {:.4} diff {:+.4}{} ({:.1}s)",
        sum_w / rr,
        sum_u / rr,
        (sum_w - sum_u) / rr,
        if want_oracle {
            format!(" oracle {:.4}", sum_o / rr)
        } else {
            String::new()
        },
        tw.elapsed().as_secs_f64()
    );
    println!("  (c3+c4 block {:.1}s)", t3.elapsed().as_secs_f64());

    // criterion 5: filter efficacy on the template-noise weak set
    let t5 = Instant::now();
    let weak_noisy =
        dmiforge_core::corpus::load_weak_jsonl(&dir.join("weak_raw.jsonl")).unwrap();
    let unfiltered = corruption_rate(&weak_noisy, |t| grammar.invert(t));
    let tm = &teacher.model;
    let predict = |text: &[String]| {
        tm.nlu_predict(text)
            .unwrap_or_else(|_| dmiforge_core::mr::MeaningRepresentation::empty())
    };
    for thr in [0.3, 0.5, 0.7, 0.9] {
        let out = filter_consistency(weak_noisy.clone(), &predict, thr).unwrap();
        let rate = corruption_rate(&out.kept, |t| grammar.invert(t));
        println!(
            "c5: thr {:.1} kept {:>4} corruption {:.3} (unfiltered {:.3})",
            thr,
            out.kept.len(),
            rate,
            unfiltered
        );
    }
    println!("  (c5 block {:.1}s)", t5.elapsed().as_secs_f64());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
