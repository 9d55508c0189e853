use std::time::Instant;

use spear::backend::corpus::{generate, CorpusSpec};
use spear::bench::*;
use spear::config::Config;
use spear::planner::{apply_fusion, check_gain_table, CostModel, PlanStats};

fn small() -> Config {
    Config { corpus: CorpusSpec { size: 10, ..CorpusSpec::default() }, ..Config::default() }
}

#[test]
fn default_cost_model_is_the_calibrated_one() {
    assert_eq!(calibrate_default(&Config::default()).unwrap(), CostModel::default());
}

#[test]
fn fusion_sweep_reproduces_the_gain_pattern() {
    let suite = fusion_suite(&Config::default()).unwrap();
    assert!(suite.violations.is_empty(), "{:?}", suite.violations);
    assert_eq!(suite.rows.len(), 5 * 4);
    assert!(suite.to_csv().unwrap().starts_with("order,selectivity,plan,"));
    assert!(suite.to_table().contains("filter→map"));
}

#[test]
fn estimates_match_simulated_gains() {
    let cfg = Config::default();
    let est = gain_table(&fusion_profiles(&cfg).unwrap(), &cfg.cost).unwrap();
    let sim = fusion_suite(&cfg).unwrap().gains;
    for (e, s) in est.rows.iter().zip(&sim.rows) {
        assert!((e.map_filter - s.map_filter).abs() < 1e-9);
        assert!((e.filter_map - s.filter_map).abs() < 1e-9);
    }
    assert!(check_gain_table(&est).is_empty());
}

#[test]
fn fused_and_sequential_plans_keep_the_same_items() {
    let cfg = small();
    for s in [0.1, 0.5, 1.0] {
        let corpus = generate(&CorpusSpec { negative_fraction: s, ..cfg.corpus });
        for order in [FusionOrder::MapFilter, FusionOrder::FilterMap] {
            let (seq, fused) = fusion_pipelines(order, "negative");
            let a = run_fusion_plan(&cfg, &corpus, &seq).unwrap();
            let b = run_fusion_plan(&cfg, &corpus, &fused).unwrap();
            assert_eq!(a.state.context.get(FILTER_LABEL), b.state.context.get(FILTER_LABEL), "{order:?} at {s}");
            assert_eq!(a.state.context.get(MAP_LABEL), b.state.context.get(MAP_LABEL), "{order:?} at {s}");
        }
    }
}

#[test]
fn optimizer_output_preserves_results() {
    let cfg = small();
    let corpus = generate(&cfg.corpus);
    for order in [FusionOrder::MapFilter, FusionOrder::FilterMap] {
        let (seq, _) = fusion_pipelines(order, "negative");
        let mut stats = PlanStats { n_items: corpus.len() as f64, ..PlanStats::default() };
        stats.observe(&[run_fusion_plan(&cfg, &corpus, &seq).unwrap()]);
        let plan = apply_fusion(&seq, &stats, &cfg.cost).unwrap();
        let a = run_fusion_plan(&cfg, &corpus, &seq).unwrap();
        let b = run_fusion_plan(&cfg, &corpus, &plan.pipeline).unwrap();
        assert_eq!(a.state.context.get(FILTER_LABEL), b.state.context.get(FILTER_LABEL));
    }
}

#[test]
fn refinement_strategies_beat_static_through_caching() {
    let suite = refinement_suite(&small()).unwrap();
    let stat = suite.row(Strategy::Static).unwrap();
    assert_eq!(stat.cache_hit, 0.0);
    for s in [Strategy::Manual, Strategy::Assisted, Strategy::Auto] {
        let r = suite.row(s).unwrap();
        assert!(r.speedup > 1.0, "{s:?}: {}", r.speedup);
        assert!(r.cache_hit > 0.5, "{s:?}: {}", r.cache_hit);
    }
    assert!(suite.to_table().contains("Assisted"));
    assert!(suite.to_csv().unwrap().lines().count() == 6);
}

#[test]
fn ten_item_smoke_run_is_fast() {
    let t = Instant::now();
    let cfg = small();
    fusion_suite(&cfg).unwrap();
    refinement_suite(&cfg).unwrap();
    assert!(t.elapsed().as_secs_f64() < 5.0, "{:?}", t.elapsed());
}

#[test]
fn fusion_accuracy_is_reported_only_on_request() {
    let mut config = Config::default();
    config.corpus.size = 20;
    config.fusion.selectivities = vec![0.5];
    let plain = fusion_suite(&config).unwrap();
    assert!(plain.rows.iter().all(|r| r.accuracy.is_none()));
    config.fusion.report_accuracy = true;
    let scored = fusion_suite(&config).unwrap();
    for r in &scored.rows {
        let a = r.accuracy.expect("requested");
        assert!((0.0..=1.0).contains(&a), "{a}");
    }
    let seq = scored.rows.iter().find(|r| r.plan == "sequential").unwrap();
    assert_eq!(seq.accuracy, Some(1.0), "the mock labels every synthetic tweet as intended");
}
