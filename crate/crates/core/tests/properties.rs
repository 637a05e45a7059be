use proptest::prelude::*;
use svaclr_core::augment::make_views;
use svaclr_core::datagen::{generate_dataset, Generator};
use svaclr_core::io::{decode_dataset, encode_dataset};
use svaclr_core::{AudioFeaturizer, AugmentConfig, DatasetSpec, MappingKind, Model, ModelConfig, SpeedFactor, Split, ViewSet};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        clips_per_class_train: 1,
        clips_per_class_test: 1,
        seed,
        ..DatasetSpec::default()
    }
}

fn viewsets(seed: u64, tau: (u32, u32)) -> Vec<ViewSet> {
    let aug = AugmentConfig::default();
    let ds = Generator::new(&small_spec(seed)).unwrap().dataset(Split::Train).unwrap();
    let mut rng = svaclr_core::Rng::new(seed);
    ds.clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (a, b) = (SpeedFactor::new(tau.0).unwrap(), SpeedFactor::new(tau.1).unwrap());
            make_views(c, i, a, b, &mut rng, &aug).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_batch_commutes_with_clip_order(seed in 0u64..1000, rot in 1usize..8, t1 in 1u32..=4, t2 in 1u32..=4) {
        let vs = viewsets(seed, (t1, t2));
        let featurizer = AudioFeaturizer::new(AugmentConfig::default().audio_window).unwrap();
        let cfg = ModelConfig::default();
        let model = Model::init(&cfg, MappingKind::Linear, &mut svaclr_core::Rng::new(seed)).unwrap();
        let mut rotated = vs.clone();
        rotated.rotate_left(rot);
        let a = model.forward_batch(&vs, &featurizer).unwrap();
        let b = model.forward_batch(&rotated, &featurizer).unwrap();
        let n = vs.len();
        let row = |t: &svaclr_core::Tensor, i: usize| {
            let w = t.len() / n;
            t.data()[i * w..(i + 1) * w].to_vec()
        };
        for i in 0..n {
            let j = (i + n - rot) % n;
            prop_assert_eq!(row(&a.z_a, i), row(&b.z_a, j));
            prop_assert_eq!(row(&a.y_v, i), row(&b.y_v, j));
        }
    }

    #[test]
    fn dataset_files_round_trip(seed in 0u64..u64::MAX) {
        let ds = generate_dataset(&small_spec(seed), Split::Test).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
