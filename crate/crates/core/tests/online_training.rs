use approx::assert_relative_eq;
use flowmc_core::bench::{GaussianMixture, MixtureComponent};
use flowmc_core::coupling::TransformKind;
use flowmc_core::flow::{build_flow, FlowConfig};
use flowmc_core::mis::{run_guiding, MisScenario, MisVariant};
use flowmc_core::nnet::NetShape;
use flowmc_core::training::{
    online_loop, online_loop_with, LossKind, Proposal, Schedule, TrainConfig,
};

fn mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        MixtureComponent {
            weight: 1.0,
            mean: vec![0.3, 0.7],
            sigma: vec![0.05, 0.08],
        },
        MixtureComponent {
            weight: 0.5,
            mean: vec![0.75, 0.25],
            sigma: vec![0.1, 0.04],
        },
    ])
    .unwrap()
}

fn config() -> FlowConfig {
    FlowConfig {
        kind: TransformKind::PiecewiseQuadratic { bins: 16 },
        net: NetShape {
            outer_width: 16,
            levels: 1,
            skips: true,
        },
        ..FlowConfig::default()
    }
}

fn schedule() -> Schedule {
    Schedule {
        total_passes: 127,
        pass_size: 1024,
        training: true,
    }
}

#[test]
fn online_learning_reduces_variance_and_stays_unbiased() {
    for loss in [LossKind::Kl, LossKind::Chi2] {
        let mut target = mixture();
        let mut flow = build_flow(&config(), 1).unwrap();
        let train = TrainConfig {
            batch_size: 1024,
            ..TrainConfig::for_loss(loss)
        };
        let report = online_loop(&mut flow, &mut target, &schedule(), &train, &[]).unwrap();
        let first = &report.iterations[0];
        let last = report.iterations.last().unwrap();
        assert!(
            last.variance < 0.2 * first.variance,
            "{loss:?}: {} vs {}",
            last.variance,
            first.variance
        );
        let truth = target.integral();
        let se = (last.variance / last.samples as f64).sqrt();
        assert!(
            (last.estimate - truth).abs() < 4.0 * se,
            "{loss:?}: {} vs {truth}",
            last.estimate
        );
        assert_relative_eq!(
            report.combined_estimate().unwrap(),
            truth,
            max_relative = 0.02
        );
        assert_eq!(report.rejected_steps, 0);
    }
}

#[test]
fn online_runs_repeat_exactly() {
    let run = || {
        let mut flow = build_flow(&config(), 4).unwrap();
        let train = TrainConfig {
            batch_size: 512,
            seed: 9,
            ..TrainConfig::default()
        };
        let s = Schedule {
            total_passes: 15,
            pass_size: 512,
            training: true,
        };
        let mut report = online_loop_with(
            &mut flow,
            &mut mixture(),
            &s,
            &train,
            &[],
            Proposal::Uniform,
            |_, _| Ok(()),
        )
        .unwrap();
        report
            .iterations
            .iter_mut()
            .for_each(|r| r.wallclock_ms = 0.0);
        report
    };
    assert_eq!(run().iterations, run().iterations);
}

#[test]
fn frozen_schedules_leave_the_flow_alone() {
    let mut flow = build_flow(&config(), 2).unwrap();
    let before: Vec<f64> = flow.parameters_mut().map(|p| *p).collect();
    let s = Schedule {
        total_passes: 3,
        pass_size: 256,
        training: false,
    };
    let report = online_loop(&mut flow, &mut mixture(), &s, &TrainConfig::default(), &[]).unwrap();
    assert_eq!(report.train_steps, 0);
    assert_eq!(
        before,
        flow.parameters_mut().map(|p| *p).collect::<Vec<_>>()
    );
    assert!(report.iterations.iter().all(|r| r.loss.is_nan()));
}

#[test]
fn guiding_estimates_match_quadrature() {
    let scenario = MisScenario::environment_dominated();
    let f = scenario.integrand().unwrap();
    let n = 1000;
    let h = 1.0 / n as f64;
    let truth: f64 = scenario
        .lobes
        .iter()
        .map(|l| {
            let c = scenario.raw_conditioning(l);
            (0..n * n)
                .map(|k| {
                    f(
                        &[((k % n) as f64 + 0.5) * h, ((k / n) as f64 + 0.5) * h],
                        &c,
                    )
                })
                .sum::<f64>()
                * h
                * h
        })
        .sum::<f64>()
        / scenario.lobes.len() as f64;
    for variant in MisVariant::ALL {
        let report = run_guiding(&scenario, variant, 3).unwrap();
        let last = report.iterations.last().unwrap();
        let se = (last.variance / last.samples as f64).sqrt();
        assert!(
            (last.estimate - truth).abs() < 4.0 * se,
            "{variant:?}: {} vs {truth} (se {se})",
            last.estimate
        );
    }
}
