use std::fs;

use leafwood::config::PipelineConfig;
use leafwood::store::{read_sample_store, write_sample_store};
use leafwood::weights::{decode_weights, load_model, save_weights};
use leafwood::Error;
use leafwood_core::model::{Model, NetworkConfig};
use leafwood_core::preprocess::{make_samples, PreprocessConfig};
use leafwood_core::synth::{generate_plot, PlotSpec};

fn small_plot() -> leafwood_core::PointCloud {
    let spec = PlotSpec {
        trees: 1,
        ..PlotSpec::default()
    };
    generate_plot(&spec, 3).unwrap().cloud
}

#[test]
fn sample_store_round_trips() {
    let cloud = small_plot();
    let cfg = PreprocessConfig {
        max_points: 2048,
        ..PreprocessConfig::default()
    };
    let samples = make_samples(&cloud, &cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sample_store(dir.path(), &samples, "plot.ply", 9, "abc").unwrap();
    let (back, manifest) = read_sample_store(dir.path()).unwrap();
    assert_eq!(back, samples);
    assert_eq!(manifest.records.len(), samples.len());
    assert_eq!((manifest.seed, manifest.source.as_str()), (9, "plot.ply"));
}

#[test]
fn unlabeled_samples_round_trip() {
    let mut cloud = small_plot();
    cloud.labels = None;
    let samples = make_samples(&cloud, &PreprocessConfig::default(), 1).unwrap();
    assert!(samples.iter().all(|s| s.labels.is_none()));
    let dir = tempfile::tempdir().unwrap();
    write_sample_store(dir.path(), &samples, "x", 1, "d").unwrap();
    assert_eq!(read_sample_store(dir.path()).unwrap().0, samples);
}

#[test]
fn corrupt_store_is_a_format_error() {
    let cloud = small_plot();
    let samples = make_samples(&cloud, &PreprocessConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sample_store(dir.path(), &samples, "x", 1, "d").unwrap();
    let data = dir.path().join("samples.bin");
    let bytes = fs::read(&data).unwrap();
    fs::write(&data, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_sample_store(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn weights_round_trip_bitwise() {
    let cfg = NetworkConfig::reduced();
    let model: Model<f32> = Model::new(cfg.clone(), 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lwt");
    save_weights(&path, &cfg, model.weights()).unwrap();
    let back = load_model(&path, &cfg).unwrap();
    assert_eq!(back.weights(), model.weights());
    let first = fs::read(&path).unwrap();
    save_weights(&path, &cfg, back.weights()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn weights_for_another_config_are_rejected() {
    let cfg = NetworkConfig::reduced();
    let model: Model<f32> = Model::new(cfg.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lwt");
    save_weights(&path, &cfg, model.weights()).unwrap();
    let other = NetworkConfig {
        head_hidden: cfg.head_hidden + 1,
        ..cfg
    };
    assert!(matches!(
        load_model(&path, &other),
        Err(Error::Core(leafwood_core::Error::WeightsMismatch(_)))
    ));
}

#[test]
fn truncated_weights_are_rejected() {
    let cfg = NetworkConfig::reduced();
    let model: Model<f32> = Model::new(cfg.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lwt");
    save_weights(&path, &cfg, model.weights()).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_weights(b"NOTWEIGHTS").is_err());
}

#[test]
fn pipeline_config_round_trips_and_rejects_unknown_keys() {
    let cfg = PipelineConfig::default();
    let text = cfg.to_toml().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, &text).unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    fs::write(&path, "[train]\nepochs = 3\n").unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap().train.epochs, 3);
    fs::write(&path, "[train]\nepoch = 3\n").unwrap();
    assert!(PipelineConfig::load(&path).is_err());
}
