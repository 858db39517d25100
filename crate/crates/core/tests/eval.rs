use std::sync::OnceLock;

use ihid::detector::Mode;
use ihid::eval::{sweep, ExperimentConfig, Session, SweepParam, WorldKind};
use ihid::traj::Label;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.kind = WorldKind::Default;
    cfg.world.n_train = 150;
    cfg.world.n_val = 60;
    cfg.world.n_pool = 100;
    cfg.diffusion.epochs = 4;
    cfg.thresholds.val_anomalies = 15;
    cfg.runner.repeats = 2;
    cfg.runner.test_size = 50;
    cfg.runner.anomaly_types = vec![Label::BigDetour, Label::SmallDetour];
    cfg
}

fn session() -> &'static Session {
    static S: OnceLock<Session> = OnceLock::new();
    S.get_or_init(|| Session::new(&small_config(), None).unwrap())
}

#[test]
fn gamma_floor_leaves_everything_to_stage_two() {
    let s = session();
    let r = sweep(s, SweepParam::GammaQ, &[-1e9]).unwrap();
    let th = r.points[0].thresholds;
    assert_eq!(th.gamma_q, -1e9);
    let full = s.variant(&s.cache, &th, Mode::Full).unwrap();
    let low = s.variant(&s.cache, &th, Mode::LowOnly).unwrap();
    for (f, l) in full.repeats.iter().zip(&low.repeats) {
        for hist in f.stage_histogram.values() {
            assert!(!hist.contains_key(&ihid::detector::Stage::HighLevelReject), "stage 1 rejected at gamma -1e9");
        }
        assert_eq!(f.outcomes, l.outcomes);
    }
}

#[test]
fn zero_beta_flags_everything() {
    let s = session();
    let r = sweep(s, SweepParam::BetaE, &[0.0]).unwrap();
    for (kind, summary) in &r.points[0].summary {
        assert_eq!(summary.recall, Some(1.0), "{kind}");
    }
    let th = r.points[0].thresholds;
    let v = s.variant(&s.cache, &th, Mode::Full).unwrap();
    for rep in &v.repeats {
        assert!(rep.outcomes.iter().all(|o| o.is_anomaly));
    }
}

#[test]
fn threshold_sweeps_are_monotone_in_recall() {
    let s = session();
    let r = sweep(s, SweepParam::BetaE, &[0.0, 0.01, 0.05, 0.2, 1e9]).unwrap();
    for kind in [Label::BigDetour, Label::SmallDetour] {
        let recalls: Vec<f64> = r.points.iter().map(|p| p.summary[&kind].recall.unwrap()).collect();
        assert!(recalls.windows(2).all(|w| w[0] >= w[1]), "{kind}: {recalls:?}");
    }
}

#[test]
fn rho_values_train_distinct_models() {
    let s = session();
    let r = sweep(s, SweepParam::Rho, &[0.2, 0.4, 0.8]).unwrap();
    let digests: Vec<&str> = r.points.iter().map(|p| p.model_digest.as_deref().unwrap()).collect();
    assert!(digests[0] != digests[1] && digests[1] != digests[2] && digests[0] != digests[2], "{digests:?}");
    let summaries: Vec<_> = r.points.iter().map(|p| serde_json::to_string(&p.summary).unwrap()).collect();
    assert!(summaries[0] != summaries[1] || summaries[1] != summaries[2], "all rho values scored identically");
    assert!(r.points.iter().all(|p| p.summary[&Label::SmallDetour].f1.is_some()));
}

#[test]
fn t_inf_sweep_rescores() {
    let s = session();
    let r = sweep(s, SweepParam::TInf, &[5.0, 25.0]).unwrap();
    assert_ne!(r.points[0].thresholds.beta_e, r.points[1].thresholds.beta_e);
    assert!(sweep(s, SweepParam::TInf, &[2.5]).is_err());
    assert!(sweep(s, SweepParam::BetaE, &[]).is_err());
}

#[test]
fn ablation_union_and_stage_one_blindness() {
    let s = session();
    let r = s.report(&[Mode::HighOnly, Mode::LowOnly, Mode::Full]).unwrap();
    let high = &r.variants[&Mode::HighOnly];
    assert_eq!(high.summary[&Label::SmallDetour].recall, Some(0.0));
    for i in 0..high.repeats.len() {
        let ids = |m: Mode| -> std::collections::BTreeSet<String> {
            r.variants[&m].repeats[i].outcomes.iter().filter(|o| o.is_anomaly).map(|o| o.id.clone()).collect()
        };
        let union: std::collections::BTreeSet<String> = ids(Mode::HighOnly).union(&ids(Mode::LowOnly)).cloned().collect();
        assert_eq!(ids(Mode::Full), union);
    }
}

#[test]
fn repeats_use_disjoint_seeds_and_unique_ids() {
    let s = session();
    let seeds: std::collections::BTreeSet<u64> = s.tests.iter().map(|t| t.seed).collect();
    assert_eq!(seeds.len(), s.tests.len());
    for t in &s.tests {
        let ids: std::collections::BTreeSet<&str> = t.normals.iter().chain(t.anomalies.values().flatten()).map(|t| t.id.as_str()).collect();
        assert_eq!(ids.len(), t.normals.len() + t.anomalies.values().map(Vec::len).sum::<usize>());
        assert_eq!(t.normals.len(), 40);
        assert!(t.anomalies.values().all(|v| v.len() == 10));
    }
}
