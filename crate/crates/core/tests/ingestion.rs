use std::fs;
use std::path::Path;

use mmfl_core::data::{generate_synthetic, load_csv, write_csv, SyntheticSpec};
use mmfl_core::{Error, ErrorClass};

fn write_fixture(dir: &Path, skip: Option<(&str, &str)>) {
    let ids = ["a", "b", "c", "d", "e"];
    for (m, dim) in [("mrna", 3), ("image", 2), ("clinical", 1)] {
        let mut s = String::from("patient_id");
        for j in 0..dim {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for (i, id) in ids.iter().enumerate() {
            if skip == Some((m, id)) {
                continue;
            }
            s.push_str(id);
            for j in 0..dim {
                s.push_str(&format!(",{}", i as f64 + 0.1 * j as f64));
            }
            s.push('\n');
        }
        fs::write(dir.join(format!("{m}.csv")), s).unwrap();
    }
    let mut labels = String::from("patient_id,label,cohort\n");
    for (i, id) in ids.iter().enumerate() {
        labels.push_str(&format!("{id},{},{}\n", i % 2, if i < 3 { "X" } else { "Y" }));
    }
    fs::write(dir.join("labels.csv"), labels).unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"{"modalities": {"mrna": "mrna.csv", "image": "image.csv", "clinical": "clinical.csv"},
            "labels": "labels.csv", "num_classes": 2}"#,
    )
    .unwrap();
}

#[test]
fn five_shared_ids_load() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), None);
    let loaded = load_csv(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.dataset.len(), 5);
    assert_eq!(loaded.dropped, 0);
    assert_eq!(loaded.dataset.cohorts, vec!["X", "Y"]);
    loaded.dataset.validate().unwrap();
}

#[test]
fn missing_id_is_dropped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), Some(("image", "c")));
    let loaded = load_csv(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.dataset.len(), 4);
    assert_eq!(loaded.dropped, 1);
    assert!(loaded.dataset.points.iter().all(|p| p.id != "c"));
}

#[test]
fn header_row_disagreement_names_file() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), None);
    fs::write(dir.path().join("image.csv"), "patient_id,f0,f1\na,1,2\nb,1\n").unwrap();
    let err = load_csv(&dir.path().join("manifest.json")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("image.csv") && msg.contains("row 3"), "{msg}");
    assert_eq!(err.class(), ErrorClass::Data);
}

#[test]
fn malformed_values_and_duplicates_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), None);
    fs::write(dir.path().join("clinical.csv"), "patient_id,f0\na,1\nb,oops\n").unwrap();
    let msg = load_csv(&dir.path().join("manifest.json")).unwrap_err().to_string();
    assert!(msg.contains("clinical.csv") && msg.contains("row 3"), "{msg}");

    fs::write(dir.path().join("clinical.csv"), "patient_id,f0\na,1\na,2\n").unwrap();
    let err = load_csv(&dir.path().join("manifest.json")).unwrap_err();
    assert!(matches!(err, Error::Ingestion { .. }));
    assert!(err.to_string().contains("duplicate"));
}

#[test]
fn written_dataset_loads_back_identically() {
    let mut spec = SyntheticSpec::tcga_like(2, 1, 8).unwrap();
    for s in spec.modalities.values_mut() {
        s.dim = 5;
    }
    spec.counts = vec![vec![3, 4], vec![2, 2], vec![5, 1]];
    let ds = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_csv(&ds, dir.path()).unwrap();
    let back = load_csv(&manifest).unwrap();
    assert_eq!(back.dropped, 0);
    let mut a = ds.points.clone();
    let mut b = back.dataset.points.clone();
    a.sort_by(|x, y| x.id.cmp(&y.id));
    b.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(a, b);
}
