//! Stagewise training on the bundled MNIST digits.

use std::path::PathBuf;

use c2f_core::data::{load_mnist, split_dataset, Dataset, Split};
use c2f_core::train::{train_feature_transformers, train_intermediate_classifiers, TrainConfig};
use c2f_core::{tensor, ArchConfig, C2FArchitecture, WeightStore};

fn mnist() -> Dataset<f64> {
    let root = std::env::var_os("C2F_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")));
    load_mnist(root).unwrap()
}

fn accuracy(arch: &C2FArchitecture, store: &WeightStore<f64>, data: &Dataset<f64>, level: usize) -> f64 {
    let hits = data
        .inputs
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| tensor::argmax(&store.forward_to_level(arch, x, level).unwrap().1) == y)
        .count();
    hits as f64 / data.len() as f64
}

#[test]
fn ten_digits_are_memorized() {
    let all = mnist();
    let few = all.subset(&(0..10).collect::<Vec<_>>(), Split::Train);
    let arch = C2FArchitecture::from_config(&ArchConfig::desk_mnist()).unwrap();
    let mut store = WeightStore::<f64>::build(&arch, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 10,
        epochs: 200,
        ..TrainConfig::default()
    };
    let log = train_feature_transformers(&arch, &mut store, &few, &cfg).unwrap();
    assert_eq!(log.epochs.last().unwrap().accuracy, 1.0);
    assert_eq!(accuracy(&arch, &store, &few, 2), 1.0);
}

#[test]
fn desk_subset_trains_to_useful_accuracy() {
    let all = mnist();
    let (train, val, test) = split_dataset(&all, [4, 1, 1], 0).unwrap();
    let train = train.subset(&(0..6000).collect::<Vec<_>>(), Split::Train);
    let val = val.subset(&(0..1500).collect::<Vec<_>>(), Split::Val);
    let test = test.subset(&(0..1500).collect::<Vec<_>>(), Split::Test);
    let arch = C2FArchitecture::from_config(&ArchConfig::desk_mnist()).unwrap();
    let mut store = WeightStore::<f64>::build(&arch, 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        epochs: 5,
        seed: 2,
        ..TrainConfig::default()
    };
    train_feature_transformers(&arch, &mut store, &train, &cfg).unwrap();
    let finest = arch.num_levels() - 1;
    let test_acc = accuracy(&arch, &store, &test, finest);
    assert!(test_acc >= 0.90, "finest test accuracy {test_acc}");

    let alpha = store.alpha.clone();
    let finest_head = store.beta[finest].clone();
    train_intermediate_classifiers(&arch, &mut store, &train, &cfg).unwrap();
    assert_eq!(store.alpha, alpha);
    assert_eq!(store.beta[finest], finest_head);

    let first = accuracy(&arch, &store, &val, 0);
    let last = accuracy(&arch, &store, &val, finest);
    assert!(first >= 0.85, "level-1 validation accuracy {first}");
    assert!(last >= 0.90, "finest validation accuracy {last}");
}
