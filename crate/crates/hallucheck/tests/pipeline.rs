mod common;

use std::collections::HashSet;

use hallucheck::io::{read_json, read_jsonl};
use hallucheck::pipeline::{self, Context, Profile};
use hallucheck::records::{EvalReport, FeatureRecord, Manifest, Mode, RelevanceRecord, Role};
use hallucheck::Error;
use hallucheck_core::perturb::{ContrastivePair, GenerationReport, PairLabel};

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(common::tiny_config(), Some(dir.path().to_path_buf()), false);

    pipeline::train_model(&ctx).unwrap();
    assert!(matches!(pipeline::train_model(&ctx), Err(Error::Exists { .. })));
    let manifest: Manifest = read_json(&dir.path().join("model/manifest.json")).unwrap();
    assert_eq!(manifest.master_seed, 7);
    assert_eq!(manifest.outputs.len(), 2);

    // Counts in the report match a recount of the written pairs.
    let summary = pipeline::generate_data(&ctx, Profile::Detector).unwrap();
    let data = dir.path().join("data");
    let all: Vec<ContrastivePair> = read_jsonl(&data.join("all_pairs.jsonl")).unwrap();
    let report: GenerationReport = read_json(&data.join("report.json")).unwrap();
    let count = |l: PairLabel| all.iter().filter(|p| p.label == l).count();
    assert_eq!(report.pairs, all.len());
    assert_eq!(report.hallucinated, count(PairLabel::Hallucinated));
    assert_eq!(report.kept_negative, count(PairLabel::KeptNegative));
    assert_eq!(report.discarded, count(PairLabel::Discarded));
    assert_eq!(report.degenerated, all.iter().filter(|p| p.is_hallucinated() && p.degenerated).count());
    for (name, n) in [("train.jsonl", summary.train), ("val.jsonl", summary.val)] {
        let split: Vec<ContrastivePair> = read_jsonl(&data.join(name)).unwrap();
        assert_eq!(split.len(), n);
        let pos = split.iter().filter(|p| p.is_hallucinated()).count();
        assert!(pos.abs_diff(n - pos) <= 1, "{name}: {pos} of {n}");
        assert!(pos > 0, "{name} has no hallucinations");
    }

    for mode in [Mode::Lrp, Mode::Attention] {
        let s = pipeline::contributions(&ctx, Profile::Detector, mode).unwrap();
        assert_eq!(s.exported + s.skipped, s.samples);
    }
    let cdir = dir.path().join("contributions/lrp");
    let relevance: Vec<RelevanceRecord> = read_jsonl(&cdir.join("relevance.jsonl")).unwrap();
    for r in &relevance {
        for s in &r.steps {
            let total: f64 = s.source.iter().chain(&s.prefix).sum();
            assert!((total - 1.0).abs() < 1e-6, "sample {} step {}: {total}", r.sample, s.step);
        }
    }
    let features: Vec<FeatureRecord> = read_jsonl(&cdir.join("features.jsonl")).unwrap();
    for f in &features {
        let mean = f.features.normalized.iter().sum::<f64>() / f.features.normalized.len() as f64;
        assert!((mean - 1.0).abs() < 1e-6);
    }

    // Curve tables have one row per step up to the clip.
    let analysis = pipeline::analyze(&ctx, Profile::Detector).unwrap();
    assert!(analysis.pairs >= 2);
    let clip = ctx.cfg.analysis.output_clip;
    let analysed: HashSet<u64> = relevance.iter().filter(|r| r.role == Role::Original).map(|r| r.sample).collect();
    let max_t = relevance
        .iter()
        .filter(|r| analysed.contains(&r.sample))
        .map(|r| r.steps.len().min(clip))
        .max()
        .unwrap();
    let steps = std::fs::read_to_string(dir.path().join("analysis/curves_step.csv")).unwrap();
    assert!(steps.lines().count() - 1 <= max_t);

    pipeline::train_detector(&ctx).unwrap();
    let eval = pipeline::eval(&ctx).unwrap();
    check_means(&eval);
    let stored: EvalReport = read_json(&dir.path().join("eval/report.json")).unwrap();
    assert_eq!(stored, eval);

    let report = pipeline::detect(&ctx, &ctx.detector_path(1, "lrp-mlp"), hallucheck_core::perturb::Split::Val).unwrap();
    assert_eq!(report, eval.runs[1][0]);

    // Stress test on the held-out sources.
    let sources: Vec<String> = all.iter().take(40).map(|p| p.perturbed_source.clone()).collect();
    let input = dir.path().join("unlabeled.txt");
    std::fs::write(&input, sources.join("\n")).unwrap();
    let stress = pipeline::stress(&ctx, &input, 0).unwrap();
    let n = stress.samples;
    for l in &stress.listings {
        assert!(l.top.windows(2).all(|w| w[0].score >= w[1].score), "{} listing not sorted", l.detector);
        if l.detector != "degeneration" {
            let cap = (ctx.cfg.stress.rate * n as f64).ceil() as usize;
            assert!(l.positives.len() <= cap, "{}: {} > {cap}", l.detector, l.positives.len());
        }
    }
    for (members, e) in ctx.cfg.detector.ensembles.iter().zip(&stress.ensembles) {
        for m in members {
            let l = stress.listings.iter().find(|l| &l.detector == m).unwrap();
            assert!(e.samples.iter().all(|s| l.positives.contains(s)));
        }
    }
}

/// Mean rows equal a manual average over runs.
fn check_means(eval: &EvalReport) {
    for (i, m) in eval.means.iter().enumerate() {
        let runs: Vec<_> = eval.runs.iter().map(|r| &r[i]).collect();
        assert!(runs.iter().all(|r| r.detector == m.detector));
        let avg = |f: &dyn Fn(&hallucheck_core::detector::DetectionReport) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / runs.len() as f64;
        assert!((m.f1 - avg(&|r| r.prf.f1)).abs() < 1e-12);
        assert!((m.precision - avg(&|r| r.prf.precision)).abs() < 1e-12);
        assert!((m.recall - avg(&|r| r.prf.recall)).abs() < 1e-12);
        if let Some(a) = m.auc {
            assert!((a - avg(&|r| r.auc.unwrap())).abs() < 1e-12);
        }
    }
}

#[test]
fn smd_of_known_groups() {
    // Paired differences 1, 2, 3: mean 2, sample sd 1.
    let c = pipeline::compare(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]);
    assert_eq!(c.smd.unwrap().value, 2.0);
    assert_eq!(c.means.hallucinated, 4.0);
    // Identical groups have zero-variance differences.
    let same = pipeline::compare(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
    assert!(same.smd.is_none());
    assert!(same.note.unwrap().contains("variance"));
}
