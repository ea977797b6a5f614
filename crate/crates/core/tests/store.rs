use std::collections::BTreeMap;

use vfm_guide::numerics::{BBox, FeatureMap};
use vfm_guide::store::dataset::{
    load_dataset, write_dataset, DatasetIndex, Detection, ImageEntry, Split, Splits,
};
use vfm_guide::store::vgfm::{decode, encode, file_size, HEADER_LEN};
use vfm_guide::store::{read_feature_map, write_feature_map};
use vfm_guide::Error;

fn map() -> FeatureMap<f64> {
    FeatureMap::new(
        2,
        3,
        2,
        8.0,
        (0..12).map(|v| v as f64 * 0.25 - 1.0).collect(),
    )
    .unwrap()
}

#[test]
fn vgfm_header_is_little_endian() {
    let bytes = encode(&map()).unwrap();
    assert_eq!(bytes.len() as u64, file_size(2, 3, 2));
    assert_eq!(&bytes[..4], b"VGFM");
    assert_eq!(bytes[4..8], 1u32.to_le_bytes());
    assert_eq!(bytes[8..12], 2u32.to_le_bytes());
    assert_eq!(bytes[12..16], 3u32.to_le_bytes());
    assert_eq!(bytes[16..20], 2u32.to_le_bytes());
    assert_eq!(bytes[20..24], 8.0f32.to_le_bytes());
    assert_eq!(bytes[HEADER_LEN..HEADER_LEN + 4], (-1.0f32).to_le_bytes());
    // channel-fastest: cell (0, 1), channel 1 is element 3
    assert_eq!(
        bytes[HEADER_LEN + 12..HEADER_LEN + 16],
        (-0.25f32).to_le_bytes()
    );
}

#[test]
fn vgfm_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vgfm");
    write_feature_map(&path, &map()).unwrap();
    let back: FeatureMap<f64> = read_feature_map(&path).unwrap();
    assert_eq!(back, map());
    let single: FeatureMap<f32> = read_feature_map(&path).unwrap();
    assert_eq!(single.data()[5], 0.25);
}

#[test]
fn vgfm_rejections_report_offsets() {
    let good = encode(&map()).unwrap();
    let offset = |bytes: &[u8]| match decode::<f64>(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(offset(&bad), 0);

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert_eq!(offset(&bad), 4);

    assert_eq!(offset(&good[..10]), 10);
    assert_eq!(offset(&good[..good.len() - 1]), good.len() as u64 - 1);

    let mut long = good.clone();
    long.push(0);
    assert_eq!(offset(&long), good.len() as u64);

    let mut bad = good.clone();
    bad[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset(&bad), 8);

    let mut bad = good.clone();
    bad[20..24].copy_from_slice(&(-1.0f32).to_le_bytes());
    assert_eq!(offset(&bad), 20);

    let mut bad = good.clone();
    bad[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(offset(&bad), HEADER_LEN as u64 + 8);
}

#[test]
fn vgfm_missing_file_is_io() {
    let err = read_feature_map::<f64>("/nonexistent/x.vgfm").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 2);
}

fn index_with(ids: &[&str]) -> DatasetIndex {
    let mut annotations = BTreeMap::new();
    annotations.insert(
        ids[0].to_string(),
        vec![Detection::annotation(
            BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            1,
        )],
    );
    DatasetIndex {
        schema_version: 1,
        num_classes: 2,
        images: ids
            .iter()
            .map(|id| ImageEntry {
                image_id: id.to_string(),
                feature_file: format!("{id}.vgfm"),
                input_file: None,
                width: 24,
                height: 16,
                stride: 8.0,
            })
            .collect(),
        annotations,
        proposals: BTreeMap::new(),
        splits: Splits {
            labeled: vec![ids[0].to_string()],
            unlabeled: ids[1..].iter().map(|s| s.to_string()).collect(),
            eval: vec![],
        },
        root: Default::default(),
    }
}

#[test]
fn index_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let idx = index_with(&["b", "a"]);
    for e in &idx.images {
        write_feature_map(dir.path().join(&e.feature_file), &map()).unwrap();
    }
    let path = dir.path().join("index.json");
    write_dataset(&path, &idx).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(
        back.images
            .iter()
            .map(|e| e.image_id.as_str())
            .collect::<Vec<_>>(),
        ["a", "b"]
    );
    assert_eq!(back.split_images(Split::Unlabeled)[0].image_id, "a");
    assert_eq!(back.annotations_of("b")[0].class_id, 1);
    assert_eq!(back.root, dir.path());
    let m: FeatureMap<f64> = read_feature_map(back.feature_path(back.image("a").unwrap())).unwrap();
    assert_eq!(m, map());
}

#[test]
fn index_json_uses_box_key_and_string_splits() {
    let v = serde_json::to_value(index_with(&["a", "b"])).unwrap();
    assert_eq!(
        v["annotations"]["a"][0]["box"],
        serde_json::json!([0.0, 0.0, 8.0, 8.0])
    );
    assert_eq!(v["splits"]["unlabeled"], serde_json::json!(["b"]));
    assert!(v.get("root").is_none());
    assert!(v.get("proposals").is_none());
}

#[test]
fn index_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.json");
    let check = |idx: &DatasetIndex| {
        write_dataset(&path, idx).unwrap();
        load_dataset(&path).unwrap_err()
    };

    // feature files absent
    assert!(matches!(check(&index_with(&["a"])), Error::Validation(_)));

    for f in ["a.vgfm", "b.vgfm"] {
        write_feature_map(dir.path().join(f), &map()).unwrap();
    }
    let mut idx = index_with(&["a", "b"]);
    idx.splits.eval.push("a".into());
    assert!(matches!(check(&idx), Error::Validation(m) if m.contains("more than one split")));

    let mut idx = index_with(&["a", "b"]);
    idx.annotations.get_mut("a").unwrap()[0].class_id = 2;
    assert!(matches!(check(&idx), Error::Validation(m) if m.contains("class")));

    let mut idx = index_with(&["a", "b"]);
    idx.splits.unlabeled.push("zzz".into());
    assert!(matches!(check(&idx), Error::Validation(m) if m.contains("unknown")));

    let mut idx = index_with(&["a", "b"]);
    idx.images.push(idx.images[0].clone());
    assert!(matches!(check(&idx), Error::Validation(m) if m.contains("duplicate")));

    std::fs::write(&path, "{not json").unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::Json { .. }));
    assert_eq!(err.exit_code(), 2);
}
