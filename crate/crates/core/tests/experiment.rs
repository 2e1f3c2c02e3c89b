use laq_core::experiment::{run_latency, toy_prompt, AblationAxes};
use laq_core::{
    run_ablation, run_experiment, write_trace, CellStatus, ExperimentConfig, ExperimentMode, ModelConfig, PolicyId,
    SynthParams,
};

fn trace_cfg() -> ExperimentConfig {
    ExperimentConfig {
        policies: vec![PolicyId::SnapKv, PolicyId::Laq, PolicyId::LaqPp],
        budgets: vec![8, 16, 32],
        synthetic: SynthParams { t_input: 128, t_response: 16, ..Default::default() },
        synthetic_count: 2,
        ..Default::default()
    }
}

fn toy_cfg() -> ExperimentConfig {
    ExperimentConfig {
        mode: ExperimentMode::ToyModel,
        policies: vec![PolicyId::Streaming, PolicyId::SnapKv, PolicyId::LaqPp, PolicyId::Full],
        budgets: vec![16, 32],
        model: ModelConfig { vocab: 64, head_dim: 8, max_pos: 256, ..Default::default() },
        prompt_len: 96,
        response_len: 12,
        ..Default::default()
    }
}

#[test]
fn grid_is_complete() {
    let cfg = trace_cfg();
    let rec = run_experiment(&cfg).unwrap();
    assert_eq!(rec.cells.len(), 3 * 3 * 2);
    assert!(rec.all_ok());
    for subject in ["synthetic:0", "synthetic:1"] {
        for p in &cfg.policies {
            for b in &cfg.budgets {
                assert!(rec.cells.iter().any(|c| c.subject == subject && c.policy == *p && c.budget == *b));
            }
        }
    }
}

#[test]
fn trace_files_and_synthetic_traces_mix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.kvtr");
    let t = laq_core::gen_synthetic_trace(&SynthParams { t_input: 64, t_response: 8, seed: 9, ..Default::default() }).unwrap();
    write_trace(&t, &path).unwrap();
    let cfg = ExperimentConfig { traces: vec![path.clone()], synthetic_count: 1, ..trace_cfg() };
    let rec = run_experiment(&cfg).unwrap();
    assert_eq!(rec.cells.len(), 3 * 3 * 2);
    assert!(rec.cells.iter().any(|c| c.subject == path.display().to_string()));
}

#[test]
fn replay_is_reproducible() {
    let a = run_experiment(&trace_cfg()).unwrap();
    let b = run_experiment(&trace_cfg()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn toy_mode_is_reproducible_modulo_timing() {
    let a = run_experiment(&toy_cfg()).unwrap();
    let b = run_experiment(&toy_cfg()).unwrap();
    assert!(a.all_ok(), "{:?}", a.cells.iter().find(|c| !c.is_ok()));
    assert_eq!(a.without_timing().to_json().unwrap(), b.without_timing().to_json().unwrap());
    let full = a.cells.iter().find(|c| c.policy == PolicyId::Full).unwrap();
    assert_eq!(full.token_agreement, Some(1.0));
    assert_eq!(full.recall.as_ref().unwrap().mean, 1.0);
    for c in &a.cells {
        assert_eq!(c.transcript.as_ref().unwrap().len(), 12);
        let s: f64 = c.latency.as_ref().unwrap().fractions().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&trace_cfg()).unwrap();
    rec.write(dir.path()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["cells"].as_array().unwrap().len(), 18);
    let csv = std::fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);
    assert!(csv.starts_with("subject,policy,budget,status"));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = toy_cfg();
    let s = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"policies":["h2o","laq_pp"],"budgets":[8]}"#).unwrap();
    assert_eq!(partial.policies, vec![PolicyId::H2o, PolicyId::LaqPp]);
    assert_eq!(partial.policy.window_len, 8);
}

#[test]
fn failed_cells_carry_reasons() {
    let mut cfg = trace_cfg();
    cfg.policies = vec![PolicyId::Streaming];
    cfg.budgets = vec![3, 16];
    let rec = run_experiment(&cfg).unwrap();
    let bad: Vec<_> = rec.cells.iter().filter(|c| !c.is_ok()).collect();
    assert_eq!(bad.len(), 2);
    assert!(bad.iter().all(|c| matches!(&c.status, CellStatus::Failed { reason } if reason.contains("sinks"))));
}

#[test]
fn ablation_over_steps_is_monotone_on_constructed_traces() {
    let mut cfg = trace_cfg();
    cfg.policies = vec![PolicyId::Laq, PolicyId::SnapKv];
    cfg.budgets = vec![8];
    cfg.policy.pool_kernel = 1;
    cfg.policy.keep_window = false;
    let rep = run_ablation(&cfg, &AblationAxes::default()).unwrap();
    assert!(rep.all_ok());
    assert_eq!(rep.rows.len(), 4 * 2);
    let curve: Vec<f64> = [1, 2, 4, 8].iter().map(|&s| rep.mean_recall(PolicyId::Laq, 8, s).unwrap()).collect();
    assert_eq!(curve, vec![0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn toy_ablation_varies_lookahead_quality() {
    let mut cfg = toy_cfg();
    cfg.policies = vec![PolicyId::LaqPp];
    cfg.budgets = vec![32];
    let axes = AblationAxes {
        steps: vec![1, 8],
        lookahead_policies: vec![PolicyId::Streaming, PolicyId::SnapKv],
        lookahead_budgets: vec![16, 32],
    };
    let rep = run_ablation(&cfg, &axes).unwrap();
    assert_eq!(rep.rows.len(), 2 * 2 * 2);
    assert!(rep.all_ok());
    assert_eq!(rep.to_csv().unwrap().lines().count(), 9);
}

#[test]
fn latency_rows_cover_the_grid() {
    let mut cfg = toy_cfg();
    cfg.policies = vec![PolicyId::SnapKv, PolicyId::Laq];
    cfg.budgets = vec![32];
    let rows = run_latency(&cfg, &[2, 8], &[4, 16]).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        let s: f64 = r.report.fractions().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        if r.policy == PolicyId::SnapKv {
            assert!(r.report.lookahead.seconds < r.report.total_seconds);
        }
    }
}

#[test]
fn toy_prompt_is_seeded() {
    assert_eq!(toy_prompt(50, 20, 3), toy_prompt(50, 20, 3));
    assert_ne!(toy_prompt(50, 20, 3), toy_prompt(50, 20, 4));
    assert!(toy_prompt(50, 200, 3).iter().all(|&t| t < 50));
}
