//! Training, checkpointing and dataset files end to end on small synthetic data.

use issf::checkpoint;
use issf::config::RunConfig;
use issf::dataset::{generate_synthetic, load_dataset, write_dataset, Split, SyntheticSpec};
use issf::eval::evaluate;
use issf::params::BoundParams;
use issf::tensor::Graph;
use issf::train::{train, video_loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(noise_sigma: f64) -> SyntheticSpec {
    SyntheticSpec {
        train_videos_per_class: 8,
        test_videos_per_class: 4,
        noise_sigma,
        seed: 3,
        ..SyntheticSpec::default()
    }
}

fn short_run() -> RunConfig {
    RunConfig {
        epochs: 12,
        memory_slots: 4,
        ..RunConfig::toy()
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = generate_synthetic(&small_spec(1.0)).unwrap().dataset;
    let (model, _) = train(&data, &short_run()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded), checkpoint::to_bytes(&model));
    let (a, pa) = evaluate(&model, &data, Split::Test).unwrap();
    let (b, pb) = evaluate(&loaded, &data, Split::Test).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn same_seed_gives_identical_models_and_reports() {
    let data = generate_synthetic(&small_spec(1.0)).unwrap().dataset;
    let (m1, log1) = train(&data, &short_run()).unwrap();
    let (m2, log2) = train(&data, &short_run()).unwrap();
    assert_eq!(checkpoint::to_bytes(&m1), checkpoint::to_bytes(&m2));
    assert_eq!(log1, log2);
    assert_eq!(
        evaluate(&m1, &data, Split::Test).unwrap().0,
        evaluate(&m2, &data, Split::Test).unwrap().0
    );
    let other = RunConfig { seed: 1, ..short_run() };
    let (m3, _) = train(&data, &other).unwrap();
    assert_ne!(checkpoint::to_bytes(&m1), checkpoint::to_bytes(&m3));
}

#[test]
fn pseudo_label_names_the_planted_class_on_clean_data() {
    let synthetic = generate_synthetic(&SyntheticSpec {
        noise_sigma: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (model, _) = train(&synthetic.dataset, &RunConfig::toy()).unwrap();
    let (mut right, mut total) = (0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, video) in synthetic.dataset.videos.iter().enumerate() {
        if video.split != Split::Train {
            continue;
        }
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &model.params, false);
        let loss = video_loss(&mut g, &p, &model, video, true, &mut rng).unwrap();
        let target = loss.pseudo.unwrap().target;
        for (s, class) in synthetic.snippet_classes(i).into_iter().enumerate() {
            let Some(class) = class else { continue };
            let argmax = (0..target.cols())
                .max_by(|&a, &b| target.at(s, a).total_cmp(&target.at(s, b)).then(b.cmp(&a)))
                .unwrap();
            total += 1;
            right += usize::from(argmax == class);
        }
    }
    let rate = right as f64 / total as f64;
    assert!(rate >= 0.9, "pseudo label accuracy {rate}");
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let data = generate_synthetic(&small_spec(1.0)).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded, data);
}
