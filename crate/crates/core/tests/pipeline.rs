use std::path::Path;

use litforge::pipeline::{
    ablation_csv, emit_run_report, run_pipeline, PipelineConfig, PipelineError, EVAL_REPORT_FILE, RUN_REPORT_FILE,
};

fn config(out: &Path, warmup: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        out_dir: out.to_path_buf(),
        record_wall_time: false,
        ..PipelineConfig::default()
    };
    cfg.train.warmup_steps = warmup;
    cfg.eval.per_epoch = false;
    cfg
}

#[test]
fn completed_run_report_has_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&config(dir.path(), 100)).unwrap();
    assert_eq!(report.warmup_steps, 100);
    assert_eq!(report.peak_lr, 0.05);
    assert_eq!(report.manifests.keys().collect::<Vec<_>>(), ["holdout", "train"]);
    assert!(report.shard_digests.values().all(|d| !d.is_empty()));
    assert!(report.caption_set_digest.is_some() && report.checkpoint_digest.is_some());
    assert!(report.final_loss.unwrap() < report.initial_loss);
    assert!(report.top1.is_some() && report.top5.is_some());
    assert!(report.diverged.is_none());

    let on_disk: litforge::pipeline::RunReport =
        serde_json::from_slice(&std::fs::read(dir.path().join(RUN_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    assert_eq!(emit_run_report(dir.path()).unwrap(), report);
}

#[test]
fn missing_eval_is_named() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config(dir.path(), 100)).unwrap();
    std::fs::remove_file(dir.path().join(EVAL_REPORT_FILE)).unwrap();
    match emit_run_report(dir.path()) {
        Err(PipelineError::MissingArtifact(path)) => assert!(path.ends_with(EVAL_REPORT_FILE)),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn three_warmups_make_one_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    // 2000/1000/500 scaled down tenfold
    let rows: Vec<(String, _)> = [200u64, 100, 50]
        .into_iter()
        .map(|w| {
            let out = dir.path().join(format!("w{w}"));
            run_pipeline(&config(&out, w)).unwrap();
            (format!("w{w}"), emit_run_report(&out).unwrap())
        })
        .collect();
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,warmup_steps,peak_lr,initial_loss,final_loss,top1,top5,diverged_at");
    assert_eq!(lines.len(), 4);
    for (line, w) in lines[1..].iter().zip(["200", "100", "50"]) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[1], w);
        assert!(fields[4..7].iter().all(|f| !f.is_empty()), "{line}");
    }
    // same data, so only the schedule differs
    assert!(rows.iter().all(|(_, r)| r.manifests == rows[0].1.manifests));
}
