use std::path::Path;

use serde_json::{json, Value};

use confkit::features::FeatureStats;
use confkit::net::{ModelKind, TrainData};
use confkit::pipeline::{
    fit_model, render_summary, run_ablation, run_experiment, train_cell, ExperimentData, ExperimentPlan, LabeledSet,
    ReferenceSource, Toggles,
};
use confkit::simulate::Scenario;

fn error_model(p_sub: f64) -> Value {
    json!({
        "p_sub": p_sub, "p_ins": p_sub / 4.0, "p_del": p_sub / 4.0,
        "confusion_temperature": 3.0, "augmentation_strength": 1.0,
        "feature_params": {
            "correct": {"a": 6.0, "b": 1.2},
            "error": {"a": 2.0, "b": 2.5},
            "runner_up_correct": {"a": 2.5, "b": 3.0},
            "runner_up_error": {"a": 3.0, "b": 2.5}
        }
    })
}

fn write_scenario(dir: &Path, in_sub: f64, ood_sub: f64) {
    let sc: Scenario = serde_json::from_value(json!({
        "seed": 4,
        "vocab": {"size": 80, "continuation_period": 4},
        "topk": 3,
        "domains": [
            {"name": "news", "unigram": {"zipf": {"exponent": 1.0, "shift": 0}},
             "min_len": 3, "max_len": 8, "error_model": error_model(in_sub)},
            {"name": "chat", "unigram": {"zipf": {"exponent": 1.0, "shift": 40}},
             "min_len": 3, "max_len": 6, "error_model": error_model(ood_sub)}
        ],
        "splits": [
            {"name": "in_train", "domain": "news", "kind": "labeled", "sentences": 80, "n": 3},
            {"name": "in_dev", "domain": "news", "kind": "labeled", "sentences": 40, "n": 1, "strength": 0.0},
            {"name": "in_test", "domain": "news", "kind": "labeled", "sentences": 40, "n": 1, "strength": 0.0},
            {"name": "in_text", "domain": "news", "kind": "text", "sentences": 200},
            {"name": "ood_unlabeled", "domain": "chat", "kind": "unlabeled", "sentences": 60, "n": 3},
            {"name": "ood_dev", "domain": "chat", "kind": "labeled", "sentences": 40, "n": 1, "strength": 0.0},
            {"name": "ood_test", "domain": "chat", "kind": "labeled", "sentences": 40, "n": 1, "strength": 0.0},
            {"name": "ood_text", "domain": "chat", "kind": "text", "sentences": 200}
        ]
    }))
    .unwrap();
    sc.write(dir).unwrap();
}

fn write_plan(dir: &Path, use_pseudo: bool, use_ood_lm: bool) -> ExperimentPlan {
    let net = json!({"layers": 1, "hidden": 3, "epochs": 2, "batch_size": 16});
    let plan = json!({
        "corpora": {
            "in_train": "in_train.jsonl", "in_dev": "in_dev.jsonl", "in_test": "in_test.jsonl",
            "in_text": "in_text.txt", "ood_unlabeled": "ood_unlabeled.jsonl", "ood_dev": "ood_dev.jsonl",
            "ood_test": "ood_test.jsonl", "ood_text": "ood_text.txt"
        },
        "use_pseudo": use_pseudo, "use_ood_lm": use_ood_lm,
        "cem": net, "rebm": net, "select_k": 10, "seed": 12
    });
    let path = dir.join(format!("plan-{use_pseudo}-{use_ood_lm}.json"));
    std::fs::write(&path, plan.to_string()).unwrap();
    ExperimentPlan::load(&path).unwrap()
}

const OFF: Toggles = Toggles {
    use_pseudo: false,
    use_ood_lm: false,
};

#[test]
fn grid_has_one_cell_per_enabled_toggle_combination() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.1, 0.2);
    assert_eq!(write_plan(dir.path(), true, true).cells().len(), 4);
    assert_eq!(write_plan(dir.path(), true, false).cells().len(), 2);
    assert_eq!(write_plan(dir.path(), false, false).cells(), vec![OFF]);
}

#[test]
fn off_cell_is_plain_in_domain_training() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.1, 0.2);
    let full = write_plan(dir.path(), true, true);
    let plain = write_plan(dir.path(), false, false);
    let full_data = ExperimentData::load(&full).unwrap();
    let plain_data = ExperimentData::load(&plain).unwrap();

    let a = train_cell(&full, &full_data, OFF).unwrap();
    let b = train_cell(&plain, &plain_data, OFF).unwrap();
    assert_eq!(a.cem.params, b.cem.params);
    assert_eq!(a.rebm.params, b.rebm.params);
    assert_eq!(a.cem_training.ood_seen, 0);

    let fz = plain_data.featurizer(OFF);
    let set = LabeledSet::build(&plain_data.in_train.utterances, ReferenceSource::Gold, &fz).unwrap();
    let stats = FeatureStats::compute(fz.schema.width(), &set.matrices).unwrap();
    let pools = TrainData {
        in_domain: set.examples(ModelKind::Cem),
        ood: Vec::new(),
    };
    let (direct, _) = fit_model(ModelKind::Cem, &plain.cem, fz.schema, stats, &pools, plain.seed).unwrap();
    assert_eq!(direct.params, a.cem.params);

    let pseudo = train_cell(&full, &full_data, Toggles { use_pseudo: true, use_ood_lm: false }).unwrap();
    assert!(pseudo.cem_training.ood_seen > 0);
    assert_ne!(pseudo.cem.params, a.cem.params);
}

#[test]
fn ood_lm_adds_a_feature_column() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.1, 0.2);
    let plan = write_plan(dir.path(), false, true);
    let data = ExperimentData::load(&plan).unwrap();
    let off = data.featurizer(OFF).schema.width();
    let on = data.featurizer(Toggles { use_pseudo: false, use_ood_lm: true }).schema.width();
    assert_eq!(on, off + 1);
}

#[test]
fn single_class_sets_report_undefined_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.0, 0.2);
    let plan = write_plan(dir.path(), false, false);
    let data = ExperimentData::load(&plan).unwrap();
    let run = run_ablation(&plan, &data).unwrap();
    let in_domain = &run.grid.cells[0].evals["in_domain"];
    assert!(in_domain.word.raw.single_class());
    assert_eq!(in_domain.word.raw.auc, None);
    assert_eq!(in_domain.word.raw.eer, None);
    assert_eq!(in_domain.word.raw.nce, None);
    assert!(in_domain.word.raw.ece.is_some());
    let ood = &run.grid.cells[0].evals["ood"];
    assert!(ood.word.raw.auc.is_some());
    let summary = render_summary(&run.grid);
    assert!(summary.contains("pseudo0-lm0"));
}

#[test]
fn plan_requirements_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.1, 0.2);
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        json!({
            "corpora": {"in_train": "in_train.jsonl", "in_test": "in_test.jsonl"},
            "use_pseudo": true, "use_ood_lm": false, "seed": 1
        })
        .to_string(),
    )
    .unwrap();
    let plan = ExperimentPlan::load(&path);
    assert!(plan.is_err() || ExperimentData::load(&plan.unwrap()).is_err());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), 0.1, 0.2);
    let plan = write_plan(dir.path(), true, true);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&plan, &a).unwrap();
    run_experiment(&plan, &b).unwrap();
    for rel in ["grid.json", "cells/pseudo1-lm1.json", "models/pseudo1-lm1-cem.json", "summary.md"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}
