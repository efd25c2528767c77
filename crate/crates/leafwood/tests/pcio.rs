use std::fs;
use std::path::Path;

use leafwood::pcio::{read_point_file, write_point_file, WriteFormat};
use leafwood::Error;
use leafwood_core::{ClassLabel, PointCloud};
use proptest::prelude::*;

fn full_cloud(n: usize) -> PointCloud {
    let mut c = PointCloud::from_positions(
        (0..n)
            .map(|i| [i as f64 * 0.123_456_789_012_3, -(i as f64) / 7.0, 1e3 + i as f64 / 3.0])
            .collect(),
    );
    c.reflectance = Some((0..n).map(|i| i as f32 * 0.25 - 3.0).collect());
    c.deviation = Some((0..n).map(|i| (i % 17) as f32 / 3.0).collect());
    c.labels = Some((0..n).map(|i| ClassLabel::from_u8((i % 3 == 0) as u8).unwrap()).collect());
    c.wood_probability = Some((0..n).map(|i| (i % 11) as f32 / 10.0).collect());
    c.tree_id = Some((0..n).map(|i| (i % 5) as u32).collect());
    c.ground = Some((0..n).map(|i| i % 4 == 0).collect());
    c
}

fn round_trip(c: &PointCloud, name: &str, format: WriteFormat) -> PointCloud {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    write_point_file(c, &path, format).unwrap();
    read_point_file(&path).unwrap().cloud
}

#[test]
fn every_format_round_trips_all_columns() {
    let c = full_cloud(50);
    for (name, format) in [
        ("a.ply", WriteFormat::PlyBinary),
        ("b.ply", WriteFormat::PlyAscii),
        ("c.csv", WriteFormat::Csv),
    ] {
        let back = round_trip(&c, name, format);
        assert_eq!(back, c, "{name}");
    }
}

#[test]
fn absent_columns_stay_absent() {
    let c = PointCloud::from_positions(vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]);
    for (name, format) in [("a.ply", WriteFormat::PlyBinary), ("b.csv", WriteFormat::Csv)] {
        let back = round_trip(&c, name, format);
        assert_eq!(back, c);
        assert!(back.reflectance.is_none() && back.labels.is_none() && back.ground.is_none());
    }
}

#[test]
fn normalized_flag_survives_ply() {
    let mut c = full_cloud(5);
    c.reflectance = Some(vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    c.reflectance_normalized = true;
    assert!(round_trip(&c, "n.ply", WriteFormat::PlyBinary).reflectance_normalized);
    assert!(round_trip(&c, "n.ply", WriteFormat::PlyAscii).reflectance_normalized);
}

#[test]
fn empty_cloud_is_refused_without_creating_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ply");
    assert!(write_point_file(&PointCloud::default(), &path, WriteFormat::PlyBinary).is_err());
    assert!(!path.exists());
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn bad_label_names_its_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.csv", "x,y,z,label\n0,0,0,1\n1,1,1,2\n");
    match read_point_file(&p) {
        Err(Error::Parse { location, column, .. }) => {
            assert_eq!(location, "line 3");
            assert_eq!(column, "label");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn bad_probability_and_tree_id_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "p.csv", "x,y,z,p_wood\n0,0,0,1.5\n");
    assert!(matches!(read_point_file(&p), Err(Error::Parse { .. })));
    let t = write(dir.path(), "t.csv", "x,y,z,tree_id\n0,0,0,-1\n");
    assert!(matches!(read_point_file(&t), Err(Error::Parse { .. })));
}

#[test]
fn missing_coordinates_and_unknown_extensions_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "noz.csv", "x,y\n0,0\n");
    assert!(read_point_file(&p).is_err());
    let q = write(dir.path(), "cloud.las", "");
    assert!(matches!(read_point_file(&q), Err(Error::Format { .. })));
}

#[test]
fn unknown_columns_are_reported_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "extra.csv", "x,y,z,intensity_raw,label\n0,0,0,17,1\n1,2,3,4,0\n");
    let loaded = read_point_file(&p).unwrap();
    assert_eq!(loaded.ignored_columns, vec!["intensity_raw".to_string()]);
    assert_eq!(loaded.cloud.labels, Some(vec![ClassLabel::Wood, ClassLabel::Leaf]));
}

#[test]
fn truncated_binary_ply_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ply");
    write_point_file(&full_cloud(10), &path, WriteFormat::PlyBinary).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(read_point_file(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_ply_is_exact(
        pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e3f64..1e3, -50f32..50.0, any::<bool>()), 1..200)
    ) {
        let mut c = PointCloud::from_positions(pts.iter().map(|p| [p.0, p.1, p.2]).collect());
        c.reflectance = Some(pts.iter().map(|p| p.3).collect());
        c.labels = Some(pts.iter().map(|p| if p.4 { ClassLabel::Wood } else { ClassLabel::Leaf }).collect());
        prop_assert_eq!(round_trip(&c, "p.ply", WriteFormat::PlyBinary), c.clone());
        let csv = round_trip(&c, "p.csv", WriteFormat::Csv);
        prop_assert_eq!(&csv.labels, &c.labels);
        for (a, b) in csv.positions.iter().zip(&c.positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6);
            }
        }
    }
}
