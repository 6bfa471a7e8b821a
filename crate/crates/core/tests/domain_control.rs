use gridda::data::{synth_sample, DomainSpec, Sample, ScenePrior, SynthConfig};
use gridda::gridmap::GridSpec;
use gridda::losses::{DomainTag, LossConfig};
use gridda::model::{init_model, ModelConfig};
use gridda::train::{domain_patch_accuracy, TrainConfig, Trainer};

fn pool(domain: DomainTag, n: usize, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig {
        n,
        seed,
        grid: GridSpec::new(0.5, 16.0).unwrap(),
        prior: ScenePrior::default(),
        // both "domains" come from the same sensor
        sensor: DomainSpec::source(),
        domain,
        split: "control".into(),
    };
    (0..n).map(|i| synth_sample(&cfg, i).unwrap().0).collect()
}

#[test]
fn identical_sensors_leave_the_classifier_at_chance() {
    let mc = ModelConfig {
        widths: [8, 8, 8, 8],
        blocks: [1, 1, 1, 1],
        fpn_width: 8,
        head_convs: 1,
        input_scale: vec![0.05, 1.0, 1.0, 0.002, 1.0],
        ..ModelConfig::default()
    };
    // no reversal: the classifier is free to pick up any difference there is
    let tc = TrainConfig {
        lr2: 1e-2,
        lr_boundary: Some(0),
        da_width: 8,
        da_lr_mult: 10.0,
        grl_lambda: 0.0,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(init_model(&mc, 0).unwrap(), tc, LossConfig::default()).unwrap();
    tr.adapt_domains(&pool(DomainTag::Source, 24, 1), &pool(DomainTag::Target, 24, 2), 80).unwrap();
    let (s, t) = (pool(DomainTag::Source, 8, 3), pool(DomainTag::Target, 8, 4));
    let acc = domain_patch_accuracy(&tr.model, &s.iter().collect::<Vec<_>>(), &t.iter().collect::<Vec<_>>()).unwrap();
    assert!(acc <= 0.55, "held-out domain accuracy {acc}");
}
