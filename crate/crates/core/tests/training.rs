use svaclr_core::datagen::Generator;
use svaclr_core::eval::{affinity_report, linear_probe, ProbeConfig};
use svaclr_core::train::{pretrain, Trainer};
use svaclr_core::augment::make_views;
use svaclr_core::{AudioFeaturizer, DatasetSpec, SpeedFactor, MappingKind, MetricsRecord, Model, Rng, Split, TrainConfig, Variant};

fn corpus() -> (DatasetSpec, svaclr_core::Dataset, svaclr_core::Dataset) {
    let spec = DatasetSpec::default();
    let gen = Generator::new(&spec).unwrap();
    (spec.clone(), gen.dataset(Split::Train).unwrap(), gen.dataset(Split::Test).unwrap())
}

fn mean(xs: &[MetricsRecord]) -> f64 {
    xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64
}

#[test]
fn every_variant_lowers_the_loss() {
    let (_, train, _) = corpus();
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut log: Vec<MetricsRecord> = Vec::new();
        pretrain(&train, &cfg, &mut log).unwrap();
        let k = 8;
        let (first, last) = (mean(&log[..k]), mean(&log[log.len() - k..]));
        assert!(last < first - 0.5, "{variant}: {first} -> {last}");
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn affinity_starts_near_uniform() {
    let (_, train, _) = corpus();
    let cfg = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let mut log: Vec<MetricsRecord> = Vec::new();
    pretrain(&train, &cfg, &mut log).unwrap();
    let lam = log[0].lambda.expect("soft variant records λ");
    for row in lam {
        for x in row {
            assert!((x - 0.25).abs() < 0.02, "{lam:?}");
        }
    }
}

#[test]
fn unit_speed_rows_differ_only_by_crop() {
    let (spec, train, test) = corpus();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let model = Trainer::new(&train, &cfg).unwrap().into_model();
    let speeds: Vec<_> = cfg.augment.speeds().collect();
    let report = affinity_report(&model, &test, &spec, &cfg.augment, &speeds, 0).unwrap();
    assert_eq!(report.rows.len(), 8 * 4);
    for row in report.rows.iter().filter(|r| r.speed == 1) {
        assert!((row.mean_lambda_sped - row.mean_lambda_orig).abs() < 0.05, "{row:?}");
        assert!(!row.aliased);
    }
}

#[test]
fn identical_clips_embed_identically() {
    let (_, train, _) = corpus();
    let cfg = TrainConfig::default();
    let model = Model::init(&cfg.model, MappingKind::Identity, &mut Rng::new(3)).unwrap();
    let featurizer = AudioFeaturizer::new(cfg.augment.audio_window).unwrap();
    let clip = &train.clips[5];
    let mut rng = Rng::new(1);
    let one = make_views(clip, 0, SpeedFactor::ONE, SpeedFactor::ONE, &mut rng, &cfg.augment).unwrap();
    let batch = model.forward_batch(&[one.clone(), one], &featurizer).unwrap();
    let half = batch.z_a.len() / 2;
    assert_eq!(batch.z_a.data()[..half], batch.z_a.data()[half..]);
    assert_eq!(batch.y_v.data()[..batch.y_v.len() / 2], batch.y_v.data()[batch.y_v.len() / 2..]);
}

/// On this corpus both modalities are linearly separable by class straight
/// from the input features, so a random encoder already probes at 1.0 and
/// pre-training has nothing left to add.
#[test]
#[ignore = "probe saturates at 1.0 before training on the synthetic corpus"]
fn pretraining_beats_random_init_on_probes() {
    let (_, train, test) = corpus();
    let cfg = TrainConfig::default();
    let probe = ProbeConfig::default();
    let random = Model::init(&cfg.model, MappingKind::Identity, &mut Rng::new(0)).unwrap();
    let trained = pretrain(&train, &cfg, &mut svaclr_core::train::NoObserver).unwrap();
    let before = linear_probe(&random, &train, &test, &cfg.augment, &probe, 0).unwrap();
    let after = linear_probe(&trained, &train, &test, &cfg.augment, &probe, 0).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert!(a.accuracy > b.accuracy, "{:?}: {} vs {}", a.modality, b.accuracy, a.accuracy);
    }
}
