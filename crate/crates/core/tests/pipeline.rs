use std::fs;
use std::path::Path;

use hjbfl::experiment::{Experiment, RunConfig};
use hjbfl::Error;

fn tiny_config(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 4
output_dir = "{}"
threads = 1

[problem]
kind = "bilinear"
n_modes = 3
horizon = 1.0
beta = 0.1
alpha = 0.25

[grid]
n_steps = 20

[model]
family = "residual_net"
hidden = [4]

[[penalties]]
gamma1 = 0.0
gamma2 = 0.0

[[penalties]]
gamma1 = 0.1
gamma2 = 0.1

[ensemble]
total = 6
train_count = 3
radius = 0.5

[training]
max_iters = 5

[oracle]
max_iters = 300
grad_tol = 1e-5
"#,
        out.display()
    );
    RunConfig::from_toml_str(&text).unwrap()
}

#[test]
fn stages_require_their_producers() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny_config(dir.path())).unwrap();
    match exp.ensemble() {
        Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "assemble"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    exp.assemble().unwrap();
    assert!(matches!(exp.train(), Err(Error::MissingArtifact { producer, .. }) if producer == "ensemble"));
    exp.ensemble().unwrap();
    assert!(matches!(exp.validate(), Err(Error::MissingArtifact { .. })));
}

#[test]
fn training_twice_reuses_the_cached_model() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny_config(dir.path())).unwrap();
    exp.assemble().unwrap();
    exp.ensemble().unwrap();
    let first = exp.train().unwrap();
    let path = exp.model_path(&exp.config.penalties[0]);
    let stamp = fs::metadata(&path).unwrap().modified().unwrap();
    let bytes = fs::read(&path).unwrap();
    let second = exp.train().unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::metadata(&path).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(&path).unwrap(), bytes);

    // a different penalty list only trains the new entry
    let mut cfg = exp.config.clone();
    cfg.penalties.push(hjbfl::problem::PenaltyConfig::new(1.0, 0.0, 0.0).unwrap());
    let exp2 = Experiment::new(cfg).unwrap();
    exp2.train().unwrap();
    assert_eq!(fs::metadata(&path).unwrap().modified().unwrap(), stamp);
    assert!(exp2.model_path(&exp2.config.penalties[2]).exists());
}

#[test]
fn full_pipeline_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny_config(dir.path())).unwrap();
    exp.assemble().unwrap();
    exp.ensemble().unwrap();
    exp.train().unwrap();
    assert_eq!(exp.oracle().unwrap(), 6);
    assert_eq!(exp.oracle().unwrap(), 0);
    let reports = exp.validate().unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.metrics.values().iter().all(|v| v.is_finite())));
    let out = exp.report().unwrap();
    let md = fs::read_to_string(&out.markdown).unwrap();
    assert!(md.contains("Err_calJ"));
    assert_eq!(md.matches("| gamma1 = ").count(), 4);
}

#[test]
fn gradcheck_reports_every_direction() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny_config(dir.path())).unwrap();
    exp.assemble().unwrap();
    exp.ensemble().unwrap();
    let report = exp.gradcheck(Some(2)).unwrap();
    assert_eq!(report.rows.len(), 2 * exp.config.penalties.len());
    assert!(report.worst < 0.1, "{}", report.worst);
}
