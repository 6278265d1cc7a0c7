mod common;

use common::*;
use maxcovar::brt::GrowthMode;
use maxcovar::config::ExperimentConfig;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_json() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(config_path("desk2d.json")).unwrap()).unwrap()
}

#[test]
fn shipped_configs_load() {
    let six = ExperimentConfig::load(&config_path("sixdof.json")).unwrap();
    assert_eq!((six.system.n(), six.system.m()), (6, 2));
    assert_eq!(six.tree.horizon, 20);
    assert_eq!(six.tree.radii, vec![5.0, 5.0, 2.5, 2.5, 1.25, 1.25]);
    assert_eq!(six.goal.covariance(), &(nalgebra::DMatrix::identity(6, 6) * 0.1));
    let desk = desk_config();
    assert_eq!(desk.mode(), GrowthMode::Maxcovar);
    assert_eq!(desk.growth_options().radii.len(), 4);
}

#[test]
fn query_section_defaults() {
    let mut doc = desk_json();
    doc.as_object_mut().unwrap().remove("query");
    let cfg = ExperimentConfig::from_json(&doc.to_string()).unwrap();
    assert_eq!(cfg.query.m, 10);
    assert_eq!(cfg.query.intervals.len(), 4);
}

#[test]
fn invalid_configs_rejected() {
    let damage: [fn(&mut serde_json::Value); 5] = [
        |d| d["tree"]["radii"] = serde_json::json!([1.0]),
        |d| d["tree"]["horizon"] = serde_json::json!(0),
        |d| d["query"]["position_dims"] = serde_json::json!([7]),
        |d| d["query"]["annulus_inner"] = serde_json::json!(30.0),
        |d| d["query"]["intervals"] = serde_json::json!([[0.5, 0.1]]),
    ];
    for f in damage {
        let mut d = desk_json();
        f(&mut d);
        assert!(ExperimentConfig::from_json(&d.to_string()).is_err());
    }
    let mut d = desk_json();
    d["tree"]["mode"] = serde_json::json!("bogus");
    assert!(ExperimentConfig::from_json(&d.to_string()).is_err());
}

#[test]
fn coverage_queries_follow_the_annulus() {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let count = 4000;
    let mut inner_half = 0;
    let mid = ((cfg.query.annulus_inner.powi(2) + cfg.query.annulus_outer.powi(2)) / 2.0).sqrt();
    for _ in 0..count {
        let q = cfg.sample_coverage_query([0.25, 0.5], &mut rng).unwrap();
        let r = (q.mean()[0].powi(2) + q.mean()[1].powi(2)).sqrt();
        assert!(r >= cfg.query.annulus_inner - 1e-12 && r <= cfg.query.annulus_outer + 1e-12);
        assert_eq!((q.mean()[2], q.mean()[3]), (0.0, 0.0));
        let c = q.covariance();
        assert!((0..4).all(|i| (0.25..=0.5).contains(&c[(i, i)])));
        assert_eq!(c.clone() - nalgebra::DMatrix::from_diagonal(&c.diagonal()), nalgebra::DMatrix::zeros(4, 4));
        if r < mid {
            inner_half += 1;
        }
    }
    // the radius splitting the annulus area in half
    let frac = inner_half as f64 / count as f64;
    assert!((frac - 0.5).abs() < 3.0 * (0.25 / count as f64).sqrt() + 1e-3, "{frac}");
}
