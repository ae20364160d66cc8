//! Files shaped the way the external embedding exporter writes them load
//! into the engine unchanged.

use std::fs;
use std::path::Path;

use aspectfuse_core::corpus::{load_corpus, validate_corpus, CorpusPaths};
use aspectfuse_core::embedstore::load_embeddings;
use aspectfuse_core::{monolithic_lf, EmbedError};

fn record(out: &mut Vec<u8>, id: &str, v: &[f32]) {
    out.extend((id.len() as u32).to_le_bytes());
    out.extend(id.as_bytes());
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

fn exporter_bytes(dim: u32, rows: &[(&str, Vec<f32>)]) -> Vec<u8> {
    let mut out = b"RIRE".to_vec();
    out.extend(1u16.to_le_bytes());
    out.extend(dim.to_le_bytes());
    out.extend((rows.len() as u64).to_le_bytes());
    for (id, v) in rows {
        record(&mut out, id, v);
    }
    out
}

fn write_corpus(dir: &Path) {
    fs::write(
        dir.join("items.jsonl"),
        concat!(
            r#"{"id":"soup","aspects":[{"id":"soup::a0","text":"vegetarian"},{"id":"soup::a1","text":"quick"}]}"#,
            "\n",
            r#"{"id":"stew","aspects":[{"id":"stew::a0","text":"beef"}]}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(
        dir.join("reviews.jsonl"),
        concat!(
            r#"{"id":"soup::r000","item_id":"soup","text":"No meat at all.","aspect_ids":["soup::a0"]}"#,
            "\n",
            r#"{"id":"soup::r001","item_id":"soup","text":"Done in ten minutes.","aspect_ids":["soup::a1"]}"#,
            "\n",
            r#"{"id":"stew::r000","item_id":"stew","text":"Tender beef.","aspect_ids":["stew::a0"]}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(
        dir.join("queries.jsonl"),
        concat!(
            r#"{"id":"q1","text":"vegetarian and quick","gt_aspects":[{"id":"q1::a0","text":"vegetarian"},{"id":"q1::a1","text":"quick"}],"correct_item_id":"soup"}"#,
            "\n"
        ),
    )
    .unwrap();
}

fn rows() -> Vec<(&'static str, Vec<f32>)> {
    vec![
        ("soup::r000", vec![1.0, 0.0, 0.0]),
        ("soup::r001", vec![0.0, 1.0, 0.0]),
        ("stew::r000", vec![0.0, 0.0, 1.0]),
        ("q1", vec![0.6, 0.6, 0.1]),
        ("q1::a0", vec![1.0, 0.0, 0.0]),
        ("q1::a1", vec![0.0, 1.0, 0.0]),
    ]
}

#[test]
fn exporter_binary_and_jsonl_load() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let paths = CorpusPaths::in_dir(dir.path());
    let corpus = load_corpus(&paths.items, &paths.reviews, &paths.queries).unwrap();
    assert!(validate_corpus(&corpus).is_empty());

    let bin = dir.path().join("emb.bin");
    fs::write(&bin, exporter_bytes(3, &rows())).unwrap();
    let store = load_embeddings(&bin, &corpus).unwrap();
    assert_eq!(store.dim(), 3);
    assert_eq!(store.len(), 6);

    let jsonl = dir.path().join("emb.jsonl");
    let text: String = rows()
        .iter()
        .map(|(id, v)| format!("{}\n", serde_json::json!({"id": id, "vector": v})))
        .collect();
    fs::write(&jsonl, text).unwrap();
    let from_jsonl = load_embeddings(&jsonl, &corpus).unwrap();
    for (id, v) in rows() {
        assert_eq!(from_jsonl.vector(id).unwrap(), v.as_slice());
        assert_eq!(store.vector(id).unwrap(), v.as_slice());
    }

    let (list, _) = monolithic_lf(&store, store.vector("q1").unwrap(), 1, 10).unwrap();
    assert_eq!(list.ids().collect::<Vec<_>>(), ["soup", "stew"]);
}

#[test]
fn exporter_file_missing_a_review_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let paths = CorpusPaths::in_dir(dir.path());
    let corpus = load_corpus(&paths.items, &paths.reviews, &paths.queries).unwrap();
    let mut partial = rows();
    partial.retain(|(id, _)| *id != "stew::r000");
    let bin = dir.path().join("emb.bin");
    fs::write(&bin, exporter_bytes(3, &partial)).unwrap();
    let err = load_embeddings(&bin, &corpus).unwrap_err();
    assert!(err.to_string().contains("stew::r000"), "{err}");
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let paths = CorpusPaths::in_dir(dir.path());
    let corpus = load_corpus(&paths.items, &paths.reviews, &paths.queries).unwrap();

    let mut bytes = exporter_bytes(3, &rows());
    bytes.truncate(bytes.len() - 4);
    let bin = dir.path().join("short.bin");
    fs::write(&bin, &bytes).unwrap();
    assert!(load_embeddings(&bin, &corpus).is_err());

    let mut foreign = exporter_bytes(3, &rows());
    foreign[..4].copy_from_slice(b"NPY\0");
    fs::write(&bin, &foreign).unwrap();
    assert!(matches!(
        load_embeddings(&bin, &corpus),
        Err(EmbedError::BadMagic { .. })
    ));

    let mut future = exporter_bytes(3, &rows());
    future[4..6].copy_from_slice(&2u16.to_le_bytes());
    fs::write(&bin, &future).unwrap();
    assert!(matches!(
        load_embeddings(&bin, &corpus),
        Err(EmbedError::BadVersion(2))
    ));
}
