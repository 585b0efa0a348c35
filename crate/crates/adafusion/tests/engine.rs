//! The batched f32 inference engine against the f64 reference forward pass.

use adafusion::throughput::{
    bench_model, random_features, throughput_bench, InferenceEngine, ThroughputConfig,
};
use adafusion_core::{CompoundEmbedding, Variant};

fn compound(x: &[f32], n: usize, d: usize) -> CompoundEmbedding {
    CompoundEmbedding::from_flat(n, d, x.iter().map(|&v| v as f64).collect())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn fused_tiles_match_reference() {
    let (n, d, tiles) = (4, 16, 9);
    let x = random_features(tiles, n * d, 3);
    for v in [
        Variant::Fine,
        Variant::Coarse,
        Variant::SelfAttn,
        Variant::Ensemble,
    ] {
        let model = bench_model(v.clone(), n, d, 7).unwrap();
        let e = InferenceEngine::from_model(&model).unwrap();
        let fused = e.fuse(&x, tiles);
        for t in 0..tiles {
            let reference = model
                .fuse(&compound(&x[t * n * d..(t + 1) * n * d], n, d), None)
                .unwrap()
                .0;
            for (k, r) in reference.iter().enumerate() {
                let got = fused[t * n * d + k] as f64;
                assert!(close(got, *r, 1e-4), "{v} tile {t} [{k}]: {got} vs {r}");
            }
        }
    }
}

#[test]
fn bag_logits_match_reference_across_chunks() {
    let (n, d, tiles) = (3, 8, 37);
    let x = random_features(tiles, n * d, 4);
    let bag: Vec<CompoundEmbedding> = (0..tiles)
        .map(|t| compound(&x[t * n * d..(t + 1) * n * d], n, d))
        .collect();
    for v in [Variant::Fine, Variant::SelfAttn] {
        let model = bench_model(v.clone(), n, d, 2).unwrap();
        let reference = model.predict_bag(&bag).unwrap().outputs;
        for chunk in [1, 5, 64] {
            let mut e = InferenceEngine::from_model(&model).unwrap();
            e.chunk = chunk;
            let got = e.bag_logits(&x);
            for (g, r) in got.iter().zip(&reference) {
                assert!(close(*g as f64, *r, 1e-4), "{v} chunk {chunk}: {g} vs {r}");
            }
        }
    }
}

#[test]
fn unsupported_variants_are_rejected() {
    let m = bench_model(Variant::MoeTop3, 3, 8, 0).unwrap();
    assert!(InferenceEngine::from_model(&m).is_err());
}

#[test]
fn small_protocol_reports_every_size() {
    let cfg = ThroughputConfig {
        sources: 3,
        d: 16,
        bag_sizes: vec![50, 100, 200],
        repeats: 3,
        methods: vec![Variant::Fine, Variant::SelfAttn],
        seed: 1,
        budget_secs: None,
    };
    let run = throughput_bench(&cfg).unwrap();
    assert!(run.complete);
    assert_eq!(run.samples.len(), 3 * 3 * 2);
    for r in &run.reports {
        assert_eq!(r.bag_sizes, vec![50, 100, 200]);
        assert_eq!(r.repeats, vec![3, 3, 3]);
        assert!(r.fps.iter().all(|&f| f > 0.0));
        assert!(r.mean_fps > 0.0);
    }
}

#[test]
fn zero_budget_stops_before_measuring() {
    let cfg = ThroughputConfig {
        sources: 3,
        d: 16,
        bag_sizes: vec![10],
        repeats: 2,
        methods: vec![Variant::Fine],
        seed: 1,
        budget_secs: Some(0.0),
    };
    let run = throughput_bench(&cfg).unwrap();
    assert!(!run.complete);
    assert!(run.samples.is_empty());
    assert!(run.reports[0].bag_sizes.is_empty());
}
