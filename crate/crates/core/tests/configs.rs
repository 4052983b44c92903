use std::path::Path;

use c2f_core::pipeline::{DatasetKind, Experiment};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_experiments_load() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if !text.contains("\"dataset\"") {
            continue;
        }
        let exp = Experiment::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(exp.arch.num_levels() >= 2, "{}", path.display());
        assert!(exp.data_root().unwrap().starts_with(configs_dir()));
        seen += 1;
    }
    assert_eq!(seen, 3);
}

#[test]
fn desk_and_net_a_shapes() {
    let desk = Experiment::load(configs_dir().join("desk_mnist.json")).unwrap();
    assert_eq!(desk.config.dataset.kind, DatasetKind::Mnist);
    assert_eq!(desk.arch.input_shape, [32, 32, 1]);
    assert_eq!(desk.arch.num_levels(), 3);
    assert_eq!(Experiment::load(configs_dir().join("desk_mnist_4level.json")).unwrap().arch.num_levels(), 4);
    let net_a = Experiment::load(configs_dir().join("net_a_cifar10.json")).unwrap();
    assert_eq!(net_a.config.dataset.kind, DatasetKind::Cifar10);
    assert_eq!(net_a.arch.input_shape, [32, 32, 3]);
    assert_eq!(net_a.config.train.epochs, 200);
}
