use scalekv::cache::{CachePolicy, KvCache};
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate, Model, ModelConfig, TokenMap};
use scalekv::Error;

fn max_diff(a: &[Vec<f32>], b: &[Vec<f32>]) -> f32 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn cached_matches_uncached_for_every_scale() {
    let model = Model::new(ModelConfig::toy(3)).unwrap();
    let schedule = ScaleSchedule::square_linear(8).unwrap();
    for seed in [0, 17] {
        let trace = generate(&model, &CachePolicy::Full, &schedule, seed).unwrap();
        let reference = model.forward_reference(seed, &schedule, &trace.token_maps).unwrap();
        assert_eq!(reference.len(), 8);
        for (k, logits) in reference.iter().enumerate() {
            assert_eq!(logits.len(), schedule.tokens_in(k) * 256);
        }
        assert!(max_diff(&trace.scale_logits, &reference) <= 1e-5);
    }
}

#[test]
fn oracle_on_explicit_non_square_schedule() {
    let cfg = ModelConfig {
        layers: 3,
        heads: 2,
        d_model: 32,
        vocab: 64,
        seed: 9,
        cond_tokens: 4,
    };
    let model = Model::new(cfg).unwrap();
    let schedule = ScaleSchedule::from_explicit(vec![(1, 2), (2, 3), (3, 5), (4, 6)]).unwrap();
    let trace = generate(&model, &CachePolicy::Full, &schedule, 1).unwrap();
    let reference = model.forward_reference(1, &schedule, &trace.token_maps).unwrap();
    assert!(max_diff(&trace.scale_logits, &reference) <= 1e-5);
    assert_eq!(trace.token_maps[3].rows, 4);
    assert_eq!(trace.token_maps[3].cols, 6);
}

#[test]
fn generation_is_deterministic() {
    let model = Model::new(ModelConfig::toy(0)).unwrap();
    let schedule = ScaleSchedule::square_linear(6).unwrap();
    let a = generate(&model, &CachePolicy::Full, &schedule, 4).unwrap();
    let b = generate(&model, &CachePolicy::Full, &schedule, 4).unwrap();
    assert_eq!(a.token_maps, b.token_maps);
    assert_eq!(a.scale_logits, b.scale_logits);
    let other = generate(&model, &CachePolicy::Full, &schedule, 5).unwrap();
    assert_ne!(a.scale_logits, other.scale_logits);
}

#[test]
fn weight_checksum_is_pinned() {
    let model = Model::new(ModelConfig::toy(0)).unwrap();
    assert_eq!(
        model.weight_checksum(),
        "bebdf80ee446567c21b1efc304706af55ff0dbc9c66afa4ffcb13f187d44d8d5"
    );
    assert_eq!(
        Model::new(ModelConfig::toy(0)).unwrap().weight_checksum(),
        model.weight_checksum()
    );
}

#[test]
fn forward_scale_rejects_bad_sequencing() {
    let cfg = ModelConfig::toy(0);
    let model = Model::new(cfg.clone()).unwrap();
    let schedule = ScaleSchedule::square_linear(4).unwrap();

    let empty = KvCache::new(&cfg, CachePolicy::Full);
    assert!(matches!(
        model.forward_scale(&empty, &schedule, 0, None, None),
        Err(Error::Sequencing(_))
    ));

    let mut cache = KvCache::new(&cfg, CachePolicy::Full);
    cache.prefill(&model.prefill(0)).unwrap();
    assert!(matches!(
        model.forward_scale(&cache, &schedule, 1, None, None),
        Err(Error::Sequencing(_))
    ));
    let bogus = TokenMap {
        rows: 1,
        cols: 1,
        tokens: vec![0],
    };
    assert!(matches!(
        model.forward_scale(&cache, &schedule, 0, Some(&bogus), None),
        Err(Error::Sequencing(_))
    ));
    assert!(matches!(
        model.forward_scale(&cache, &schedule, 9, None, None),
        Err(Error::Index { .. })
    ));

    let out = model.forward_scale(&cache, &schedule, 0, None, None).unwrap();
    assert_eq!(out.logits.len(), 256);
    // once scale 0 is compressed the cache expects scale 1
    cache.end_of_scale_compress(&schedule, 0, &out.states).unwrap();
    assert!(matches!(
        model.forward_scale(&cache, &schedule, 0, None, None),
        Err(Error::Sequencing(_))
    ));
}

#[test]
fn invalid_model_configs() {
    let mut cfg = ModelConfig::toy(0);
    cfg.heads = 3;
    assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    let mut cfg = ModelConfig::toy(0);
    cfg.layers = 1;
    assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
}
