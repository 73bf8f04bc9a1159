use scalekv::analysis::RolePlan;
use scalekv::budget::{scalekv_plan, ScaleKvParams};
use scalekv::cache::{CacheAudit, CachePolicy, WindowSpec};
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate, Model, ModelConfig};
use scalekv::Error;

fn setup() -> (Model, ScaleSchedule) {
    (
        Model::new(ModelConfig::toy(0)).unwrap(),
        ScaleSchedule::square_linear(8).unwrap(),
    )
}

fn counts(audit: &CacheAudit) -> Vec<Vec<usize>> {
    audit
        .steps
        .iter()
        .map(|s| s.layers.iter().map(|l| l.retained.len()).collect())
        .collect()
}

#[test]
fn snapkv_equals_all_refiner_scalekv_without_decay() {
    let (model, schedule) = setup();
    let b = 40;
    let params = ScaleKvParams {
        b_uniform: b,
        refiner_base: b,
        decay: 0,
        min_budget: 16,
        prefix_tokens: 16,
    };
    let roles = RolePlan::all_refiners(8, schedule.num_scales());
    let plan = scalekv_plan(&roles, &params, &schedule).unwrap();
    let scalekv = CachePolicy::ScaleKv {
        roles,
        plan,
        window: WindowSpec::default(),
    };
    let snapkv = CachePolicy::SnapKv {
        budget: b,
        window: WindowSpec::default(),
    };
    let a = generate(&model, &snapkv, &schedule, 2).unwrap();
    let c = generate(&model, &scalekv, &schedule, 2).unwrap();
    assert_eq!(counts(&a.audit), counts(&c.audit));
    let retained = |t: &scalekv::model::GenerationTrace| -> Vec<Vec<Vec<usize>>> {
        t.audit
            .steps
            .iter()
            .map(|s| s.layers.iter().map(|l| l.retained.clone()).collect())
            .collect()
    };
    assert_eq!(retained(&a), retained(&c));
    assert_eq!(a.token_maps, c.token_maps);
}

#[test]
fn window_tokens_survive_compression() {
    let (model, schedule) = setup();
    let policy = CachePolicy::SnapKv {
        budget: 20,
        window: WindowSpec::default(),
    };
    let trace = generate(&model, &policy, &schedule, 0).unwrap();
    for k in 0..schedule.num_scales() - 1 {
        let (h, w) = schedule.dims(k);
        let start = schedule.history_len(k, 16);
        let window: Vec<usize> = WindowSpec::default()
            .for_map(h, w)
            .unwrap()
            .into_iter()
            .map(|i| start + i)
            .collect();
        for layer in &trace.audit.steps[k + 1].layers {
            for p in &window {
                assert!(layer.retained.contains(p), "scale {k} window token {p} evicted");
            }
        }
    }
}

#[test]
fn baselines_keep_their_shapes() {
    let (model, schedule) = setup();
    let sliding = generate(&model, &CachePolicy::SlidingWindow { tokens: 30 }, &schedule, 0).unwrap();
    let streaming = generate(&model, &CachePolicy::Streaming { sinks: 4, recent: 26 }, &schedule, 0).unwrap();
    for k in 1..schedule.num_scales() {
        let hist = schedule.history_len(k, 16);
        let want: Vec<usize> = (hist.saturating_sub(30)..hist).collect();
        assert_eq!(sliding.audit.steps[k].layers[0].retained, want);
        let s = &streaming.audit.steps[k].layers[3].retained;
        if hist > 30 {
            assert_eq!(&s[..4], &[0, 1, 2, 3]);
            assert_eq!(s.len(), 30);
            assert_eq!(*s.last().unwrap(), hist - 1);
        } else {
            assert_eq!(s.len(), hist);
        }
    }
}

#[test]
fn compression_is_deterministic() {
    let (model, schedule) = setup();
    let policy = CachePolicy::SnapKv {
        budget: 24,
        window: WindowSpec::Grid([2, 2]),
    };
    let a = generate(&model, &policy, &schedule, 6).unwrap();
    let b = generate(&model, &policy, &schedule, 6).unwrap();
    assert_eq!(a.audit, b.audit);
    assert!(a.audit.violations().is_empty());
}

#[test]
fn audit_round_trips_and_flags_tampering() {
    let (model, schedule) = setup();
    let trace = generate(&model, &CachePolicy::SlidingWindow { tokens: 20 }, &schedule, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.json");
    trace.audit.save(&path).unwrap();
    let mut loaded = CacheAudit::load(&path).unwrap();
    assert_eq!(loaded, trace.audit);
    assert!(loaded.violations().is_empty());

    loaded.steps[5].layers[2].retained.push(10_000);
    let v = loaded.violations();
    assert!(!v.is_empty());
}

#[test]
fn bytes_follow_element_width() {
    let (model, schedule) = setup();
    let wide = scalekv::model::generate_with(&model, &CachePolicy::Full, &schedule, 0, 4).unwrap();
    let half = scalekv::model::generate_with(&model, &CachePolicy::Full, &schedule, 0, 2).unwrap();
    assert_eq!(wide.peak_bytes(), 2 * half.peak_bytes());
    // entering the last scale: 8 layers * 156 history tokens * 2 * 64 * 4 bytes
    let hist = schedule.history_len(7, 16) as u64;
    assert_eq!(wide.end_bytes(), 8 * hist * 2 * 64 * 4);
}

#[test]
fn budget_below_window_is_rejected() {
    let (model, schedule) = setup();
    let policy = CachePolicy::SnapKv {
        budget: 8,
        window: WindowSpec::default(),
    };
    assert!(matches!(generate(&model, &policy, &schedule, 0), Err(Error::Budget(_))));
}
