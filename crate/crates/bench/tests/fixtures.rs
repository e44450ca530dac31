use htrpo::agent::AgentConfig;
use htrpo::trustregion::conjugate_gradient;
use htrpo_bench::{fixture, spd_system};

#[test]
fn spd_system_is_symmetric_and_solvable() {
    let (a, b) = spd_system(30, 1);
    assert_eq!(a, a.t());
    let cg = conjugate_gradient(|v: &[f64]| Ok(a.dot(&ndarray::arr1(v)).to_vec()), &b, 30, 0.0).unwrap();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r: f64 = a.dot(&ndarray::arr1(&cg.x)).iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(r.sqrt() / b_norm <= 1e-6);
}

#[test]
fn fixture_is_deterministic() {
    let cfg = AgentConfig {
        batchsize: 200,
        ..AgentConfig::default()
    };
    let a = fixture("bitflip:6", cfg.clone(), 3);
    let b = fixture("bitflip:6", cfg, 3);
    assert!(!a.batch.samples.is_empty());
    assert_eq!(a.batch.len(), b.batch.len());
    assert!(a.batch.samples.iter().zip(&b.batch.samples).all(|(x, y)| x.log_weight == y.log_weight));
}
