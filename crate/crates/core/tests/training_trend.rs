use ibnseg::data::{gen_dataset, SampleSet, SceneSpec};
use ibnseg::loss::LossConfig;
use ibnseg::nn::{NetConfig, ToyNet};
use ibnseg::train::{train, OptimConfig, TrainOptions};

/// Default scene, network and schedule with Dice and Lovász both on.
#[test]
fn loss_falls_over_the_default_schedule() {
    let data = SampleSet::collect(&gen_dataset(&SceneSpec::default(), 512, 1).unwrap()).unwrap();
    let loss = LossConfig::new(1.0, 1.0).unwrap();
    let mut drops = Vec::new();
    for seed in 0..5u64 {
        let mut net = ToyNet::build(NetConfig::default(), seed).unwrap();
        let optim = OptimConfig {
            seed,
            ..Default::default()
        };
        let log = train(&mut net, &data, &loss, &optim, &TrainOptions::default(), None).unwrap();
        assert_eq!(log.steps.len(), 2000);
        let ema = log.loss_ema(100);
        let (first, last) = (ema[0], *ema.last().unwrap());
        assert!(last < first, "seed {seed}: smoothed loss {first} -> {last}");
        drops.push(log.steps[10].loss - log.steps.last().unwrap().loss);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median drop {drops:?}");
}
