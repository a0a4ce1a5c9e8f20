mod common;

use common::{manifest, world_in};
use expert_cfg::scenario::WorldConfig;
use expert_cfg_cli::ablate::ABLATION_CSV_HEADER;
use expert_cfg_cli::eval::{run_eval, EvalContext};
use expert_cfg_cli::{commands, run_ablation, Overrides};

#[test]
fn default_grid_has_27_cells_with_one_default() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(&world_in(dir.path(), WorldConfig::default()));
    let t = run_ablation(&EvalContext::load(&m).unwrap()).unwrap();
    assert_eq!(t.cells.len(), 27);
    let defaults: Vec<_> = t.cells.iter().filter(|c| c.default).collect();
    assert_eq!(defaults.len(), 1);
    assert_eq!((defaults[0].alpha, defaults[0].beta, defaults[0].gamma), (0.01, 3.0, 1.3));
    for c in &t.cells {
        assert!((c.delta - (c.beta.ln() + 2.0)).abs() < 1e-12);
    }
}

#[test]
fn singleton_grid_equals_the_eval_arm() {
    let dir = tempfile::tempdir().unwrap();
    let path = world_in(dir.path(), WorldConfig { steering: 9, ..Default::default() });
    for policy in ["top:5", "top:50", "threshold:0.05"] {
        let mut m = manifest(&path);
        m.apply(&Overrides {
            grid: Some("alpha=0.01;beta=3;gamma=1.3".into()),
            policy: Some(policy.into()),
            ..Default::default()
        })
        .unwrap();
        let ctx = EvalContext::load(&m).unwrap();
        let t = run_ablation(&ctx).unwrap();
        let b = run_eval(&ctx).unwrap();
        assert_eq!(t.cells.len(), 1);
        let arm = b.arm("expert_cfg_5pct").unwrap();
        let c = &t.cells[0];
        assert_eq!((c.open, c.closed, c.overall), (arm.open, arm.closed, arm.overall), "{policy}");
    }
}

#[test]
fn guidance_strength_helps_on_the_steering_world() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest(&world_in(dir.path(), WorldConfig { steering: 12, ..Default::default() }));
    m.apply(&Overrides { policy: Some("top:100".into()), ..Default::default() }).unwrap();
    let t = run_ablation(&EvalContext::load(&m).unwrap()).unwrap();
    for &a in &m.grid.alpha {
        for &b in &m.grid.beta {
            let low = t.cell(a, b, 1.0).unwrap().overall;
            let mid = t.cell(a, b, 1.3).unwrap().overall;
            assert!(mid >= low, "alpha {a} beta {b}: {mid} < {low}");
        }
    }
    // Without an attention bias, only the guidance term can overturn the prior.
    assert!(t.cell(0.01, 1.0, 1.3).unwrap().overall > t.cell(0.01, 1.0, 1.0).unwrap().overall);
    assert!(t.cell(0.01, 1.0, 1.5).unwrap().overall > t.cell(0.01, 1.0, 1.3).unwrap().overall);
}

#[test]
fn ablation_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = world_in(dir.path(), WorldConfig::default());
    let out = dir.path().join("abl");
    let written = commands::ablate(
        &path,
        &Overrides {
            grid: Some("alpha=0.01;beta=1,3".into()),
            out: Some(out.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(written.len(), 2);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), ABLATION_CSV_HEADER);
    assert_eq!(lines.count(), 2 * 3);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["format"], "expert-cfg-ablation");
    assert_eq!(json["cells"].as_array().unwrap().len(), 6);
}
