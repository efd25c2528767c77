use leafwood_core::infer::{segment_cloud, ConsolidationConfig, SegmentOptions};
use leafwood_core::metrics::{evaluate, per_tree_path_lengths};
use leafwood_core::model::{Model, NetworkConfig};
use leafwood_core::preprocess::{make_samples, PreprocessConfig, Scale};
use leafwood_core::synth::{generate_plot, PlotSpec, TreeSpec};
use leafwood_core::train::{fit, AugmentConfig, LossConfig, TrainConfig};

fn small_spec() -> PlotSpec {
    PlotSpec {
        extent: [6.0, 6.0],
        trees: 1,
        tree: TreeSpec {
            leaf_density: 300.0,
            point_spacing: 0.1,
            ..TreeSpec::default()
        },
        height_range: [5.0, 6.0],
        ground_spacing: 0.3,
        ..PlotSpec::default()
    }
}

fn small_net() -> NetworkConfig {
    let mut net = NetworkConfig::reduced();
    net.stages[0].channels = 8;
    net.stages[1].channels = 8;
    net.fp_channels = vec![8, 8];
    net.head_hidden = 8;
    net.gate_hidden = 4;
    net
}

#[test]
fn generate_train_segment_evaluate() {
    let plot = generate_plot(&small_spec(), 1).unwrap();
    let cloud = plot.cloud;
    let pre = PreprocessConfig {
        max_points: 512,
        ..PreprocessConfig::default()
    };
    let samples = make_samples(&cloud, &pre, 0).unwrap();
    assert!(samples.iter().any(|s| s.scale == Scale::Fine));
    assert!(samples.iter().any(|s| s.scale == Scale::Coarse));
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut epochs = Vec::new();
    let result = fit(&samples, &samples, &small_net(), &cfg, &LossConfig::default(), &AugmentConfig::default(), |row, _| {
        epochs.push(row.epoch)
    })
    .unwrap();
    assert_eq!(epochs, vec![1, 2]);
    let model = Model::from_weights(small_net(), result.best).unwrap();

    let seg = segment_cloud(&cloud, &model, &pre, &ConsolidationConfig::default(), &SegmentOptions::default()).unwrap();
    assert_eq!(seg.kept.len() + seg.excluded_indices.len(), cloud.len());
    let predicted = seg.cloud.labels.as_ref().unwrap();
    assert_eq!(predicted.len(), seg.kept.len());
    assert!(seg.cloud.wood_probability.as_ref().unwrap().iter().all(|p| (0.0..=1.0).contains(p)));

    let paths = per_tree_path_lengths(&cloud, 8).unwrap();
    let truth: Vec<_> = seg.kept.iter().map(|&i| cloud.labels.as_ref().unwrap()[i]).collect();
    let kept_paths = leafwood_core::metrics::TreePaths {
        lengths: seg.kept.iter().map(|&i| paths.lengths[i]).collect(),
        reachable: seg.kept.iter().map(|&i| paths.reachable[i]).collect(),
    };
    let report = evaluate(predicted, &truth, Some(&kept_paths), 0.0).unwrap();
    assert_eq!(report.points, truth.len());
    assert!((0.0..=1.0).contains(&report.ba));
    assert!(report.bap.is_some_and(|b| (0.0..=1.0).contains(&b)));
    assert_eq!(report.decile_rows.len(), 10);

    let again = segment_cloud(&cloud, &model, &pre, &ConsolidationConfig::default(), &SegmentOptions::default()).unwrap();
    assert_eq!(again.cloud, seg.cloud);
}

#[test]
fn unlabeled_cloud_can_be_segmented() {
    let mut cloud = generate_plot(&small_spec(), 2).unwrap().cloud;
    cloud.labels = None;
    let model: Model<f32> = Model::new(small_net(), 0).unwrap();
    let seg = segment_cloud(&cloud, &model, &PreprocessConfig::default(), &ConsolidationConfig::default(), &SegmentOptions::default())
        .unwrap();
    assert_eq!(seg.cloud.labels.unwrap().len(), seg.kept.len());
}
