use std::fs;

use hmgl::storage::{self, ManifestRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use hmgl::synth::{self, SynthSpec};
use hmgl::trainer::init_params;
use hmgl::{Config, Error};

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_group_ids: 6,
        dim: 8,
        seed: 4,
        ..SynthSpec::default()
    }
}

fn small_config(data: &[hmgl::GroupSample]) -> Config {
    Config {
        embed_dim: 8,
        out_dim: 4,
        num_classes: data.iter().flat_map(|s| s.member_labels()).max().unwrap() + 1,
        ..Config::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::generate(&small_spec()).unwrap();
    storage::save_dataset(dir.path(), &data).unwrap();
    let back = storage::load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.group_id, b.group_id);
        assert_eq!(a.view_id, b.view_id);
        assert_eq!(a.members(), b.members());
        assert_eq!(&storage::quantize(a.embeddings()), b.embeddings());
    }
}

#[test]
fn manifest_line_without_members_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    fs::write(
        &path,
        "{\"group_id\":0,\"view_id\":0,\"embedding_file\":\"a.gemb\",\"members\":[]}\n\n\
         {\"group_id\":1,\"view_id\":0,\"embedding_file\":\"b.gemb\"}\n",
    )
    .unwrap();
    match storage::read_manifest(&path) {
        Err(Error::Manifest { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("members"), "{message}");
        }
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn manifest_unknown_keys_survive_rewrite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    fs::write(
        &path,
        "{\"group_id\":2,\"view_id\":1,\"embedding_file\":\"x.gemb\",\"members\":[],\"camera\":\"c4\",\"tags\":[1,2]}\n",
    )
    .unwrap();
    let records = storage::read_manifest(&path).unwrap();
    assert_eq!(records[0].extra["camera"], "c4");
    let out = dir.path().join("copy.jsonl");
    storage::write_manifest(&out, &records).unwrap();
    let again: Vec<ManifestRecord> = storage::read_manifest(&out).unwrap();
    assert_eq!(again, records);
    let value: serde_json::Value = serde_json::from_str(fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(value["tags"], serde_json::json!([1, 2]));
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::generate(&small_spec()).unwrap();
    let config = small_config(&data);
    let params = init_params(&config, 9).unwrap();
    let path = dir.path().join("m.ckpt");
    storage::write_checkpoint(&path, &params, &config).unwrap();
    let (back, back_config) = storage::read_checkpoint(&path).unwrap();
    assert_eq!(back_config, config);
    for ((name, a), (_, b)) in params.tensors().into_iter().zip(back.tensors()) {
        let a = a.mapv(|v| v as f32 as f64);
        assert_eq!(a, b, "tensor {name}");
    }
}

#[test]
fn checkpoint_missing_classifier_is_named() {
    let data = synth::generate(&small_spec()).unwrap();
    let config = small_config(&data);
    let params = init_params(&config, 1).unwrap();
    let tensors: Vec<_> = params.tensors().into_iter().filter(|(n, _)| n != "classifier").collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&config).unwrap();
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let err = storage::decode_checkpoint("m.ckpt".as_ref(), &buf).unwrap_err();
    assert!(err.to_string().contains("missing tensor `classifier`"), "{err}");
}

#[test]
fn truncated_checkpoint_reports_position() {
    let data = synth::generate(&small_spec()).unwrap();
    let config = small_config(&data);
    let bytes = storage::encode_checkpoint(&init_params(&config, 1).unwrap(), &config);
    let err = storage::decode_checkpoint("m.ckpt".as_ref(), &bytes[..bytes.len() / 2]).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
}
