use lhc_core::data::synthetic_samples;
use lhc_core::train::{dataset_loss, fit, run_protocol, OptimizerConfig, StageConfig};
use lhc_core::{BackboneSpec, TinyNet};

fn toy_net(seed: u64) -> TinyNet {
    TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, seed)).unwrap()
}

#[test]
fn loss_drops_below_a_tenth_within_200_epochs() {
    let data = synthetic_samples(200, [8, 8, 1], 7, 0.35, 11);
    let mut net = toy_net(12);
    let initial = dataset_loss(&net, &data).unwrap();
    let report = fit(&mut net, &data, &OptimizerConfig::Adam { lr: 1e-2 }, 32, 200, 0.1 * initial, 13).unwrap();
    let last = *report.losses.last().unwrap();
    assert!(
        last < 0.1 * initial,
        "loss {last} after {} epochs, initial {initial}",
        report.epochs
    );
    assert!(report.epochs <= 200);
}

#[test]
fn fixed_seeds_reproduce_training_exactly() {
    let data = synthetic_samples(60, [8, 8, 1], 7, 0.35, 21);
    let run = || {
        let mut net = toy_net(22);
        let report = fit(&mut net, &data, &OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9 }, 16, 5, 0.0, 23).unwrap();
        (net, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.bit_eq(y)));

    let mut other = toy_net(22);
    let rc = fit(&mut other, &data, &OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9 }, 16, 5, 0.0, 24).unwrap();
    assert_ne!(ra.losses, rc.losses);
}

#[test]
fn protocol_histories_are_reproducible() {
    let data = synthetic_samples(42, [8, 8, 1], 7, 0.2, 31);
    let (train, val) = (
        data.subset(&(0..28).collect::<Vec<_>>()),
        data.subset(&(28..42).collect::<Vec<_>>()),
    );
    let stages: Vec<StageConfig> = lhc_core::train::default_stages()
        .into_iter()
        .map(|mut s| {
            s.max_epochs = 4;
            s.batch_size = 14;
            s
        })
        .collect();
    let run = || {
        let mut net = toy_net(32);
        let report = run_protocol(&mut net, &train, &val, &stages, 33).unwrap();
        let mut csv = Vec::new();
        for h in &report.stages {
            h.write_csv(&mut csv).unwrap();
        }
        (csv, report.final_loss.to_bits())
    };
    assert_eq!(run(), run());
}
