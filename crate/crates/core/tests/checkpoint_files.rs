use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use flowmc_core::bench::step_wedge;
use flowmc_core::coupling::TransformKind;
use flowmc_core::flow::{build_flow, FlowConfig, NormalizingFlow};
use flowmc_core::nnet::NetShape;
use flowmc_core::training::{train_uniform, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn trained_flow_survives_a_file_round_trip() {
    let cfg = FlowConfig {
        kind: TransformKind::PiecewiseQuadratic { bins: 16 },
        net: NetShape {
            outer_width: 8,
            levels: 1,
            skips: true,
        },
        ..FlowConfig::default()
    };
    let mut flow = build_flow(&cfg, 3).unwrap();
    let mut target = step_wedge().unwrap();
    let train = TrainConfig {
        batch_size: 512,
        ..TrainConfig::default()
    };
    train_uniform(&mut flow, &mut target, &train, 20, |_, _, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.ckpt");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    flow.save(&mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    let loaded = NormalizingFlow::load(BufReader::new(File::open(&path).unwrap())).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_simple_fn((256, 2), || rng.random::<f64>());
    let cond = Array2::zeros((256, 0));
    assert_eq!(
        flow.log_pdf_batch(x.view(), cond.view()).unwrap(),
        loaded.log_pdf_batch(x.view(), cond.view()).unwrap()
    );
    assert_eq!(loaded.parameter_count(), flow.parameter_count());
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let flow = build_flow(&FlowConfig::default(), 0).unwrap();
    let mut bytes = Vec::new();
    flow.save(&mut bytes).unwrap();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            NormalizingFlow::load(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
}
