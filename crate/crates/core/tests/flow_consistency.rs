use flowmc_core::coupling::TransformKind;
use flowmc_core::encoding::{InputEncoding, OneBlobConfig};
use flowmc_core::flow::{
    build_flow, flow_pdf, flow_sample, minimum_layers, ConditioningFeature, ConditioningSpec,
    FlowConfig, NormalizingFlow, PartitionScheme,
};
use flowmc_core::nnet::NetShape;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind(i: usize) -> TransformKind {
    [
        TransformKind::Additive,
        TransformKind::Affine,
        TransformKind::PiecewiseLinear { bins: 8 },
        TransformKind::PiecewiseQuadratic { bins: 8 },
    ][i]
}

fn random_flow(cfg: &FlowConfig, seed: u64, scale: f64) -> NormalizingFlow {
    let mut flow = build_flow(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in flow.parameters_mut() {
        *p += scale * (rng.random::<f64>() - 0.5);
    }
    flow
}

fn small_config(dim: usize, layers: usize, kind: TransformKind) -> FlowConfig {
    FlowConfig {
        dim,
        layers,
        kind,
        partition: PartitionScheme::EvenOdd,
        encoding: InputEncoding::OneBlob(OneBlobConfig::new(8).unwrap()),
        net: NetShape {
            outer_width: 8,
            levels: 1,
            skips: true,
        },
        ..FlowConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_agrees_with_density(k in 0usize..4, dim in 2usize..6, extra in 0usize..2, seed in 0u64..1000) {
        let layers = minimum_layers(dim) + extra;
        let flow = random_flow(&small_config(dim, layers, kind(k)), seed, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_simple_fn((64, dim), || 0.02 + 0.96 * rng.random::<f64>());
        let cond = Array2::zeros((64, 0));
        let (x, log_q) = flow.sample_batch(u.view(), cond.view()).unwrap();
        prop_assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
        let log_q2 = flow.log_pdf_batch(x.view(), cond.view()).unwrap();
        for (a, b) in log_q.iter().zip(&log_q2) {
            prop_assert!((a - b).abs() < 1e-7, "{} vs {}", a, b);
        }
        if kind(k) != TransformKind::Affine {
            let back = flow.to_latent(x.view(), cond.view()).unwrap();
            let err = (&back - &u).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err < 1e-8, "latent error {}", err);
        }
    }
}

#[test]
fn conditioning_changes_the_density() {
    let mut cfg = small_config(2, 2, TransformKind::PiecewiseQuadratic { bins: 16 });
    cfg.conditioning = ConditioningSpec::new(vec![ConditioningFeature {
        name: "t".into(),
        lo: 0.0,
        hi: 10.0,
    }])
    .unwrap();
    let flow = random_flow(&cfg, 7, 0.6);
    let x = [0.3, 0.8];
    let (a, b) = (
        flow_pdf(&flow, &x, &[1.0]).unwrap(),
        flow_pdf(&flow, &x, &[9.0]).unwrap(),
    );
    assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    let (y, q) = flow_sample(&flow, &[0.4, 0.6], &[9.0]).unwrap();
    assert!((flow_pdf(&flow, &y, &[9.0]).unwrap() - q).abs() < 1e-9 * q.max(1.0));
}

#[test]
fn build_rejects_too_few_layers() {
    let cfg = small_config(4, 1, TransformKind::Affine);
    assert!(build_flow(&cfg, 0).is_err());
}

#[test]
fn fresh_flows_are_uniform() {
    for k in 0..4 {
        let flow = build_flow(&small_config(3, minimum_layers(3), kind(k)), 1).unwrap();
        for x in [[0.1, 0.5, 0.9], [0.7, 0.2, 0.4]] {
            assert!((flow_pdf(&flow, &x, &[]).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
