//! On-disk formats: JSONL manifests, `GEMB` embedding files and `HMGL`
//! checkpoints. All binary data is little-endian with 32-bit floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Config, GroupSample, Matrix, MemberBox, ModelParams};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GEMB";
pub const EMBEDDING_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMGL";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EMBEDDING_DIR: &str = "embeddings";

/// One manifest line. Keys other than the four known ones are kept in
/// `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub group_id: u32,
    pub view_id: u32,
    pub embedding_file: String,
    pub members: Vec<MemberBox>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        for m in &record.members {
            m.validate().map_err(|e| err(e.to_string()))?;
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn embedding_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Embedding {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_embeddings(x: &Matrix) -> Vec<u8> {
    let (n, d) = x.dim();
    let mut buf = Vec::with_capacity(16 + 4 * n * d);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in x.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(embedding_err(
            path,
            format!("truncated header: expected at least 16 bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(embedding_err(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != EMBEDDING_VERSION {
        return Err(embedding_err(
            path,
            format!("unsupported version {version}, expected {EMBEDDING_VERSION}"),
        ));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * n * d;
    if bytes.len() != expected {
        return Err(embedding_err(
            path,
            format!("expected {expected} bytes for {n}x{d}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(embedding_err(
            path,
            format!("non-finite value at row {}, column {}", pos / d.max(1), pos % d.max(1)),
        ));
    }
    Matrix::from_shape_vec((n, d), values).map_err(|e| embedding_err(path, e.to_string()))
}

pub fn write_embeddings(path: &Path, x: &Matrix) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || !(v.abs() <= f32::MAX as f64)) {
        return Err(embedding_err(path, "refusing to write non-finite values"));
    }
    fs::write(path, encode_embeddings(x))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    decode_embeddings(path, &fs::read(path)?)
}

fn embedding_name(group_id: u32, view_id: u32) -> String {
    format!("{EMBEDDING_DIR}/g{group_id:05}_v{view_id:02}.gemb")
}

/// Writes `dir/manifest.jsonl` plus one embedding file per sample.
pub fn save_dataset(dir: &Path, samples: &[GroupSample]) -> Result<()> {
    fs::create_dir_all(dir.join(EMBEDDING_DIR))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let file = embedding_name(s.group_id, s.view_id);
        write_embeddings(&dir.join(&file), s.embeddings())?;
        records.push(ManifestRecord {
            group_id: s.group_id,
            view_id: s.view_id,
            embedding_file: file,
            members: s.members().to_vec(),
            extra: Default::default(),
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)
}

/// Reads `dir/manifest.jsonl` and the embedding files it references, in
/// manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<GroupSample>> {
    let manifest = dir.join(MANIFEST_FILE);
    read_manifest(&manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let emb = read_embeddings(&dir.join(&r.embedding_file))?;
            GroupSample::new(r.group_id, r.view_id, r.members, emb).map_err(|e| Error::Manifest {
                path: manifest.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_checkpoint(params: &ModelParams, config: &Config) -> Vec<u8> {
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(config).expect("config serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(checkpoint_err(
                self.path,
                format!(
                    "truncated while reading {what} at byte {}: need {n} bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(ModelParams, Config)> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(checkpoint_err(path, "bad magic, not an HMGL checkpoint"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_err(
            path,
            format!(
                "checkpoint version {version} is not supported by this build (reads version \
                 {CHECKPOINT_VERSION}); upgrade hmgl to load it"
            ),
        ));
    }
    let count = cur.u32("tensor count")?;
    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "tensor name")?)
            .map_err(|_| checkpoint_err(path, format!("tensor name at byte {} is not UTF-8", cur.pos)))?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = cur.take(4 * numel, &format!("tensor `{name}` data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if loaded.insert(name.clone(), (dims, data)).is_some() {
            return Err(checkpoint_err(path, format!("duplicate tensor `{name}`")));
        }
    }
    let len = cur.u32("config length")? as usize;
    let config: Config = serde_json::from_slice(cur.take(len, "config record")?)
        .map_err(|e| checkpoint_err(path, format!("config record: {e}")))?;
    if cur.pos != bytes.len() {
        return Err(checkpoint_err(
            path,
            format!("{} trailing bytes after config record", bytes.len() - cur.pos),
        ));
    }
    config
        .validate()
        .map_err(|e| checkpoint_err(path, format!("config record: {e}")))?;

    let mut params = ModelParams::zeros(&config);
    let expected: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(unknown) = loaded.keys().find(|k| !expected.contains(k)) {
        return Err(checkpoint_err(path, format!("unknown tensor `{unknown}`")));
    }
    for (name, mut dst) in params.tensors_mut() {
        let (dims, data) = loaded
            .remove(&name)
            .ok_or_else(|| checkpoint_err(path, format!("missing tensor `{name}`")))?;
        if dims != dst.shape() {
            return Err(checkpoint_err(
                path,
                format!("tensor `{name}` has shape {dims:?}, config expects {:?}", dst.shape()),
            ));
        }
        dst.iter_mut().zip(data).for_each(|(d, v)| *d = v);
    }
    if !params.is_finite() {
        return Err(checkpoint_err(path, "non-finite parameter values"));
    }
    Ok((params, config))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, config: &Config) -> Result<()> {
    params.check_shapes(config)?;
    fs::write(path, encode_checkpoint(params, config))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Config)> {
    decode_checkpoint(path, &fs::read(path)?)
}

/// Rounds every value through `f32`, matching what a write/read cycle does.
pub fn quantize(x: &Matrix) -> Matrix {
    x.mapv(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn tiny_embedding_file_is_twenty_bytes() {
        let bytes = encode_embeddings(&array![[0.5]]);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[16..], &0.5f32.to_le_bytes());
        assert_eq!(decode_embeddings(&p(), &bytes).unwrap(), array![[0.5]]);
    }

    #[test]
    fn embedding_rejections() {
        let mut bytes = encode_embeddings(&array![[0.5, 1.0]]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&p(), &bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_embeddings(&p(), &v2).is_err());
        let msg = decode_embeddings(&p(), &bytes[..22]).unwrap_err().to_string();
        assert!(msg.contains("expected 24") && msg.contains("found 22"), "{msg}");
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_embeddings(&p(), &bytes).is_err());
    }

    #[test]
    fn checkpoint_round_trip_in_memory() {
        let config = Config {
            embed_dim: 3,
            out_dim: 2,
            num_classes: 4,
            ..Config::default()
        };
        let params = crate::trainer::init_params(&config, 5).unwrap();
        let q = {
            let mut q = params.clone();
            q.tensors_mut()
                .into_iter()
                .for_each(|(_, mut t)| t.mapv_inplace(|v| v as f32 as f64));
            q
        };
        let (back, cfg) = decode_checkpoint(&p(), &encode_checkpoint(&params, &config)).unwrap();
        assert_eq!(cfg, config);
        assert_eq!(back, q);
    }

    #[test]
    fn checkpoint_version_two_rejected() {
        let config = Config {
            embed_dim: 2,
            out_dim: 2,
            ..Config::default()
        };
        let mut bytes = encode_checkpoint(&ModelParams::zeros(&config), &config);
        bytes[4] = 2;
        let msg = decode_checkpoint(&p(), &bytes).unwrap_err().to_string();
        assert!(msg.contains("upgrade"), "{msg}");
    }
}
