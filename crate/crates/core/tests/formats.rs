use std::io::Cursor;

use rise_core::synth::{read_ground_truth, write_ground_truth};
use rise_core::{
    generate_synthetic, Dataset, HeadMode, RiseError, StudentModel, SynthParams, SyntheticBenchmark,
    TeacherTable,
};

fn small() -> SyntheticBenchmark {
    generate_synthetic(&SynthParams {
        num_classes: 3,
        num_domains: 2,
        text_dim: 6,
        feature_dim: 5,
        samples_per_cell: 4,
        seed: 21,
        ..SynthParams::default()
    })
    .unwrap()
}

fn to_lines(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<String> {
    let mut buf = Vec::new();
    write(&mut buf).unwrap();
    String::from_utf8(buf).unwrap().lines().map(str::to_string).collect()
}

fn format_error(err: RiseError) -> (usize, String) {
    match err {
        RiseError::Format { line, key, .. } => (line, key),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let b = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    b.dataset.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, b.dataset);
    for (x, y) in back.samples.iter().zip(&b.dataset.samples) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.feature), bits(&y.feature));
        assert_eq!(bits(&x.teacher_emb), bits(&y.teacher_emb));
    }
}

#[test]
fn teacher_round_trip_is_exact() {
    let b = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.jsonl");
    b.teacher.save(&path).unwrap();
    assert_eq!(TeacherTable::load(&path).unwrap(), b.teacher);

    let mut without_single = b.teacher.clone();
    without_single.generic_single = None;
    let lines = to_lines(|w| without_single.write_to(w));
    assert_eq!(lines.len(), 1 + 3 + 2 * 3);
    let back = TeacherTable::read_from(Cursor::new(lines.join("\n"))).unwrap();
    assert_eq!(back, without_single);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let b = small();
    let dir = tempfile::tempdir().unwrap();
    for (hidden, head) in [(None, HeadMode::Fc), (Some(7), HeadMode::TextCosine)] {
        let model = StudentModel::init(5, hidden, 6, 3, head, 17).unwrap();
        let path = dir.path().join("model.jsonl");
        model.save(&path).unwrap();
        let back = StudentModel::load(&path).unwrap();
        assert_eq!(back, model);
        for s in &b.dataset.samples {
            let x = model.forward(&s.feature, &b.teacher).unwrap();
            let y = back.forward(&s.feature, &b.teacher).unwrap();
            assert_eq!(x, y);
        }
    }
}

#[test]
fn ground_truth_round_trip() {
    let b = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.jsonl");
    write_ground_truth(&path, &b.teacher.classes, &b.ground_truth).unwrap();
    let (classes, protos) = read_ground_truth(&path).unwrap();
    assert_eq!(classes, b.teacher.classes);
    assert_eq!(protos, b.ground_truth);
}

#[test]
fn dataset_feature_length_error_names_sample() {
    let b = small();
    let mut lines = to_lines(|w| b.dataset.write_to(w));
    let mut rec: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    let id = rec["id"].as_str().unwrap().to_string();
    rec["feature"].as_array_mut().unwrap().pop();
    lines[3] = rec.to_string();
    let err = Dataset::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    let (line, key) = format_error(err);
    assert_eq!(line, 4);
    assert!(key.contains(&id), "{key}");
}

#[test]
fn dataset_unknown_class_and_domain() {
    let b = small();
    for (field, value) in [("class", "giraffe"), ("domain", "x-ray")] {
        let mut lines = to_lines(|w| b.dataset.write_to(w));
        let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        rec[field] = value.into();
        lines[1] = rec.to_string();
        let err = Dataset::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
        let msg = err.to_string();
        assert_eq!(format_error(err).0, 2);
        assert!(msg.contains(value), "{msg}");
    }
}

#[test]
fn dataset_duplicate_id_and_bad_header() {
    let b = small();
    let mut lines = to_lines(|w| b.dataset.write_to(w));
    lines.push(lines[1].clone());
    let n = lines.len();
    let err = Dataset::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert_eq!(format_error(err).0, n);

    let mut lines = to_lines(|w| b.dataset.write_to(w));
    lines[0] = lines[0].replace("rise-data-v1", "rise-data-v0");
    let err = Dataset::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert_eq!(format_error(err), (1, "format".to_string()));

    assert!(matches!(
        Dataset::read_from(Cursor::new("")),
        Err(RiseError::Format { line: 1, .. })
    ));
}

#[test]
fn teacher_wrong_dim_names_record() {
    let b = small();
    let mut lines = to_lines(|w| b.teacher.write_to(w));
    let anchor_line = lines.iter().position(|l| l.contains("\"anchor\"")).unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[anchor_line]).unwrap();
    rec["vec"].as_array_mut().unwrap().push(0.5.into());
    let key = format!("({},{})", rec["domain"].as_str().unwrap(), rec["class"].as_str().unwrap());
    lines[anchor_line] = rec.to_string();
    let err = TeacherTable::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert_eq!(format_error(err), (anchor_line + 1, key));
}

#[test]
fn teacher_missing_and_zero_records() {
    let b = small();
    let lines = to_lines(|w| b.teacher.write_to(w));
    let last = lines.last().unwrap().clone();
    let rec: serde_json::Value = serde_json::from_str(&last).unwrap();
    let key = format!("({},{})", rec["domain"].as_str().unwrap(), rec["class"].as_str().unwrap());
    let truncated = lines[..lines.len() - 1].join("\n");
    let err = TeacherTable::read_from(Cursor::new(truncated)).unwrap_err();
    assert_eq!(format_error(err).1, key);

    let mut lines = lines;
    let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let n = rec["vec"].as_array().unwrap().len();
    rec["vec"] = serde_json::Value::Array(vec![0.0.into(); n]);
    lines[1] = rec.to_string();
    let err = TeacherTable::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    let (line, key) = format_error(err);
    assert_eq!(line, 2);
    assert!(key.starts_with("generic:"), "{key}");
}

#[test]
fn checkpoint_wrong_shape_names_tensor() {
    let model = StudentModel::init(5, Some(4), 6, 3, HeadMode::Fc, 1).unwrap();
    let mut lines = to_lines(|w| model.write_to(w));
    let pos = lines.iter().position(|l| l.contains("projection.weight")).unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[pos]).unwrap();
    rec["shape"] = serde_json::json!([6, 5]);
    lines[pos] = rec.to_string();
    let err = StudentModel::read_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert_eq!(format_error(err), (pos + 1, "projection.weight".to_string()));

    let lines = to_lines(|w| model.write_to(w));
    let truncated = lines[..lines.len() - 1].join("\n");
    let err = StudentModel::read_from(Cursor::new(truncated)).unwrap_err();
    assert_eq!(format_error(err).1, "classifier.bias");
}
