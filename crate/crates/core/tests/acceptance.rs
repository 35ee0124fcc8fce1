//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use find_core::bench::{generate_corpus, Corpus, CorpusConfig, MockClient};
use find_core::interface::build_masks;
use find_core::tasks::{builtin_task, names, Model};
use find_core::trainer::{
    evaluate, predict, split_corpus, MetricsReport, StepReport, TrainConfig, Trainer,
};

use common::{
    all_tasks, fuzz, mask_faithfulness, model_gradient_errors, op_gradient_errors,
    oracle_disagreements,
};
use common::{round_trip_failures, GRAD_TOL};

const TRAIN_SCENES: usize = 64;
const HELD_OUT_SCENES: usize = 16;
const RETRIEVAL_SCENES: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Run {
    log: Vec<u8>,
    reports: Vec<StepReport>,
    trainer: Trainer,
    elapsed: Duration,
}

fn corpus(model: &Model) -> Corpus {
    let cfg = CorpusConfig {
        scenes: TRAIN_SCENES + HELD_OUT_SCENES,
        ..Default::default()
    };
    assert_eq!((cfg.height, cfg.width), (8, 8));
    assert_eq!((cfg.min_segments, cfg.max_segments), (3, 5));
    assert_eq!(cfg.p_replace, 0.5);
    generate_corpus(&cfg, &MockClient, &model.encoders, &model.params).unwrap()
}

fn train(config: TrainConfig, data: &Corpus) -> Run {
    let start = Instant::now();
    let mut trainer = Trainer::new(config).unwrap();
    let mut log = Vec::new();
    let reports = trainer.run(data, &mut log).unwrap();
    Run {
        log,
        reports,
        trainer,
        elapsed: start.elapsed(),
    }
}

fn smoothed_loss(reports: &[StepReport], at: usize, window: usize) -> f64 {
    let end = (at + window).min(reports.len());
    reports[at..end].iter().map(|r| r.loss).sum::<f64>() / (end - at) as f64
}

fn mask_fidelity() -> Outcome {
    let task = builtin_task(names::INTERLEAVE_GROUNDING).unwrap();
    let (content, condition) = build_masks(&task).unwrap();
    let (t, f) = (true, false);
    let want_content = vec![
        vec![f, f, f, f],
        vec![f, f, f, f],
        vec![t, f, f, f],
        vec![f, t, f, f],
    ];
    let want_condition = vec![
        vec![f, f, f, f],
        vec![f, t, f, f],
        vec![t, f, t, f],
        vec![f, t, f, t],
    ];
    let order = ["p.image", "p.interleave", "q.entity", "q.interleave"];
    let pass = content.order == order
        && condition.order == order
        && content.n_prompts == 2
        && content.to_vecs() == want_content
        && condition.to_vecs() == want_condition;
    outcome(pass, format!("4x4 blocks over {:?}", content.order))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut errors = op_gradient_errors();
    errors.extend(model_gradient_errors());
    let elapsed = start.elapsed();
    let (worst_name, worst) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let pass = errors.iter().all(|(_, e)| *e < GRAD_TOL) && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} checks, worst {worst:.2e} ({worst_name}), {:.1}s",
            errors.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn faithfulness() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, task) in all_tasks().iter().enumerate() {
        let r = mask_faithfulness(task, 200, 1000 + i as u64);
        pass &= r.violations == 0 && r.trials == 200 && r.effective > 0;
        parts.push(format!(
            "{}: {} violations in {} trials ({} non-vacuous)",
            r.task, r.violations, r.trials, r.effective
        ));
    }
    outcome(pass, parts.join("; "))
}

fn oracles() -> Outcome {
    let counts = oracle_disagreements(2000, 7);
    let pass = counts.iter().all(|(_, n)| *n == 0);
    let detail = counts
        .iter()
        .map(|(k, n)| format!("{k} {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("disagreements over 2000 instances: {detail}"))
}

fn parser_and_format() -> Outcome {
    let (captions, records) = round_trip_failures(10_000, 11);
    let f = fuzz(1000, 13);
    let pass =
        captions == 0 && records == 0 && f.crashes == 0 && f.unpositioned == 0 && f.inputs == 1000;
    outcome(
        pass,
        format!(
            "round-trip failures {captions}/{records} of 10000; fuzz {} inputs, {} crashes, {} errors, {} unpositioned",
            f.inputs, f.crashes, f.errors, f.unpositioned
        ),
    )
}

fn cli_smoke(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_find");
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let (d, c) = (data.to_str().unwrap(), ckpt.to_str().unwrap());
    let steps: [&[&str]; 5] = [
        &["gen-data", "--out", d, "--scenes", "10", "--client", "mock"],
        &["train", "--data", d, "--out", c, "--steps", "50"],
        &["eval", "--ckpt", c, "--data", d],
        &[
            "retrieve",
            "--ckpt",
            c,
            "--data",
            d,
            "--query",
            "a red star",
        ],
        &[
            "ground",
            "--ckpt",
            c,
            "--data",
            d,
            "--scene",
            "0",
            "--query",
            "a blue circle",
        ],
    ];
    let start = Instant::now();
    for args in steps {
        let out = Command::new(bin).args(args).output().unwrap();
        if !out.status.success() {
            return outcome(
                false,
                format!(
                    "`find {}` exited {}: {}",
                    args[0],
                    out.status,
                    String::from_utf8_lossy(&out.stderr)
                ),
            );
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(60),
        format!("5 commands in {:.1}s", elapsed.as_secs_f64()),
    )
}

fn check(results: &mut Vec<(usize, bool)>, n: usize, f: impl FnOnce() -> Outcome) {
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {n}: {} {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    results.push((n, o.pass));
}

fn metrics_bytes(run: &Run, r: &MetricsReport) -> Vec<u8> {
    let mut out = run.log.clone();
    out.extend(serde_json::to_vec(r).unwrap());
    out
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    check(&mut results, 1, mask_fidelity);
    check(&mut results, 2, gradients);
    check(&mut results, 3, faithfulness);
    check(&mut results, 4, oracles);

    let config = TrainConfig::default();
    let data = corpus(&Model::new(config.model.clone(), 0).unwrap());
    let (train_set, held_out) = split_corpus(&data, TRAIN_SCENES);
    let (retrieval_set, _) = split_corpus(&train_set, RETRIEVAL_SCENES);

    let joint = train(config.clone(), &train_set);
    let joint_retrieval = evaluate(&joint.trainer.model, &retrieval_set);

    check(&mut results, 5, || {
        let fit = evaluate(&joint.trainer.model, &train_set)
            .unwrap()
            .interleave_grounding;
        let held = evaluate(&joint.trainer.model, &held_out)
            .unwrap()
            .interleave_grounding;
        let secs = joint.elapsed.as_secs_f64();
        outcome(
            fit.ciou >= 0.90 && fit.miou >= 0.85 && held.ciou >= 0.70 && secs < 600.0,
            format!(
                "train cIoU {:.4} mIoU {:.4}, held-out cIoU {:.4} ({} records), {} steps in {secs:.1}s",
                fit.ciou,
                fit.miou,
                held.ciou,
                held_out.records.len(),
                joint.reports.len()
            ),
        )
    });

    check(&mut results, 6, || {
        let m = joint_retrieval.as_ref().unwrap();
        let out = predict(&joint.trainer.model, &retrieval_set).unwrap();
        let mut leaked = 0;
        for (r, ranking) in retrieval_set.records.iter().zip(&out.interleave_rankings) {
            let excluded = r.to_entry().referenced_scenes();
            leaked += ranking
                .iter()
                .filter(|&&id| excluded.contains(&(id as u64)))
                .count();
        }
        let text = m.image_text_retrieval.ir_at_1;
        let inter = m.interleave_retrieval.ir_at_5;
        outcome(
            text >= 0.9 && inter == 1.0 && leaked == 0,
            format!(
                "{} scenes: text IR@1 {text:.4}, interleave IR@5 {inter:.4}, excluded scenes ranked {leaked}",
                m.scenes
            ),
        )
    });

    check(&mut results, 7, || {
        let mut ablated = config.clone();
        ablated.weights.theta = 0.0;
        let run = train(ablated, &train_set);
        let without = evaluate(&run.trainer.model, &retrieval_set)
            .unwrap()
            .interleave_retrieval
            .ir_at_1;
        let with = joint_retrieval
            .as_ref()
            .unwrap()
            .interleave_retrieval
            .ir_at_1;
        outcome(
            without <= with,
            format!("interleave IR@1 without retrieval loss {without:.4}, joint {with:.4}"),
        )
    });

    check(&mut results, 8, parser_and_format);

    check(&mut results, 9, || {
        let again = train(config.clone(), &train_set);
        let a = metrics_bytes(&joint, joint_retrieval.as_ref().unwrap());
        let b = metrics_bytes(
            &again,
            &evaluate(&again.trainer.model, &retrieval_set).unwrap(),
        );
        outcome(a == b, format!("{} vs {} log bytes", a.len(), b.len()))
    });

    let dir = tempfile::tempdir().unwrap();
    check(&mut results, 10, || cli_smoke(dir.path()));

    let start = smoothed_loss(&joint.reports, 0, 50);
    let mid = smoothed_loss(&joint.reports, 1000, 50);
    println!("loss trend: window-50 mean {start:.4} at step 0, {mid:.4} at step 1000");

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, p)| !p)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
