use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use krsvqg::dataset::{build_dataset, build_dataset_files, load_triplets, read_jsonl, Relation};
use krsvqg::error::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn text(name: &str) -> String {
    fs::read_to_string(fixture(name)).unwrap()
}

#[test]
fn malformed_lines_are_reported_not_fatal() {
    let load = load_triplets(&text("conceptnet_sample.tsv"), &Relation::ALL).unwrap();
    assert_eq!(load.triplets.len(), 47);
    let lines: Vec<usize> = load.warnings.iter().map(|w| w.line).collect();
    assert_eq!(lines, vec![11, 26, 41]);
}

#[test]
fn relation_filter_narrows_the_set() {
    let load = load_triplets(&text("conceptnet_sample.tsv"), &[Relation::UsedFor]).unwrap();
    assert!(!load.triplets.is_empty());
    assert!(load.triplets.iter().all(|t| t.relation == Relation::UsedFor));
    assert!(matches!(load_triplets("UsedFor\ta\tb\n", &[Relation::PartOf]), Err(Error::NoTriplets)));
}

#[test]
fn sample_build_is_valid_and_split() {
    let out = build_dataset(&text("captions_sample.tsv"), &text("conceptnet_sample.tsv"), &HashMap::new(), 1).unwrap();
    let s = &out.summary;
    assert_eq!(s.captions, 20);
    assert_eq!(s.triplets, 47);
    assert_eq!(s.malformed_triplet_lines.len(), 3);
    assert_eq!(s.records + s.skipped_images.len(), 20);
    assert!(s.skipped_images.contains(&"scene19.raw".to_string()));
    assert_eq!(s.val, s.records / 5);
    assert_eq!(s.train + s.val, s.records);
    assert_eq!(s.relation_histogram.values().sum::<usize>(), s.records);
    for r in out.train.iter().chain(&out.val) {
        r.validate().unwrap();
    }
}

#[test]
fn files_are_byte_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let build = |sub: &str, seed| {
        let (files, _) = build_dataset_files(
            &fixture("captions_sample.tsv"),
            &fixture("conceptnet_sample.tsv"),
            None,
            &dir.path().join(sub),
            seed,
        )
        .unwrap();
        (fs::read(&files.train).unwrap(), fs::read(&files.val).unwrap(), files)
    };
    let (t1, v1, files) = build("a", 4);
    let (t2, v2, _) = build("b", 4);
    let (t3, v3, _) = build("c", 5);
    assert_eq!((&t1, &v1), (&t2, &v2));
    assert_ne!((&t1, &v1), (&t3, &v3));
    let records = read_jsonl(&files.train).unwrap();
    assert!(records.iter().all(|r| r.validate().is_ok()));
}

#[test]
fn supplied_questions_replace_templates() {
    let dir = tempfile::tempdir().unwrap();
    let questions = dir.path().join("questions.tsv");
    fs::write(&questions, "scene00.raw\twhat sport is played on the tennis court?\n").unwrap();
    let (files, _) = build_dataset_files(
        &fixture("captions_sample.tsv"),
        &fixture("conceptnet_sample.tsv"),
        Some(&questions),
        &dir.path().join("out"),
        2,
    )
    .unwrap();
    let mut all = read_jsonl(&files.train).unwrap();
    all.extend(read_jsonl(&files.val).unwrap());
    let r = all.iter().find(|r| r.image == "scene00.raw").unwrap();
    assert_eq!(r.question, "what sport is played on the tennis court?");
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = build_dataset_files(&dir.path().join("nope.tsv"), &fixture("conceptnet_sample.tsv"), None, dir.path(), 1)
        .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
