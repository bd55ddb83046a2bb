//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            5 bytes   "INFL1"
//! version          u32       currently 1
//! echo length      u64       followed by that many bytes of JSON
//! segment count    u64
//! per segment:     u64 name length + name bytes,
//!                  u8 shape tag (0 matrix, 1 vector) + u64 dims,
//!                  u64 value offset, u64 value count
//! value count      u64       followed by count f64 values, little-endian
//! checksum         32 bytes  sha-256 over everything before it
//! ```
//!
//! The JSON echo records the model/lock structure, the data descriptor,
//! the federation settings, the run seed, and — for locked layers — the
//! expected key *fingerprints*. No key material of any form is ever
//! written; a checkpoint plus a key file is what authorizes inference,
//! and the checkpoint alone supports only stripped or wrong-key forwards.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::write_atomic;
use crate::data::DataDescriptor;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::inr_lock::{KeySet, PermutationKey};
use crate::model::params::{ParamVector, SegmentShape};
use crate::model::{build_model, LockConfig, Model, ModelSpec};
use crate::numerics::rng::derive_stream;

const MAGIC: &[u8; 5] = b"INFL1";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Experiment context stored alongside the parameters so a checkpoint is
/// self-contained: attack evaluation can regenerate the exact dataset and
/// rebuild the exact architecture from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub data: DataDescriptor,
    pub federation: FederationConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Echo {
    schema: String,
    model: ModelSpec,
    lock: LockConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    expected_key_fingerprints: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn checkpoint_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let echo = Echo {
        schema: "infl.checkpoint.v1".into(),
        model: model.spec().clone(),
        lock: model.lock_config().clone(),
        meta: meta.clone(),
        expected_key_fingerprints: model.expected_fingerprints(),
    };
    let echo_bytes = serde_json::to_vec(&echo)
        .map_err(|e| Error::decode("checkpoint", format!("spec echo: {e}")))?;

    let state = model.full_state();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    push_u64(&mut buf, echo_bytes.len() as u64);
    buf.extend_from_slice(&echo_bytes);

    push_u64(&mut buf, state.segments().len() as u64);
    let mut offset = 0u64;
    for seg in state.segments() {
        push_u64(&mut buf, seg.name.len() as u64);
        buf.extend_from_slice(seg.name.as_bytes());
        match seg.shape {
            SegmentShape::Matrix { rows, cols } => {
                buf.push(0);
                push_u64(&mut buf, rows as u64);
                push_u64(&mut buf, cols as u64);
            }
            SegmentShape::Vector { len } => {
                buf.push(1);
                push_u64(&mut buf, len as u64);
            }
        }
        push_u64(&mut buf, offset);
        push_u64(&mut buf, seg.values.len() as u64);
        offset += seg.values.len() as u64;
    }

    push_u64(&mut buf, offset);
    for seg in state.segments() {
        for v in &seg.values {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, meta)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::decode(
                "checkpoint",
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .map_err(|_| Error::decode("checkpoint", format!("length {v} overflows")))
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::decode("checkpoint", "file too short"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::decode("checkpoint", "checksum mismatch: file corrupted"));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::decode("checkpoint", "bad magic: not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::decode("checkpoint", format!("unsupported version {version}")));
    }
    let echo_len = r.usize()?;
    let echo: Echo = serde_json::from_slice(r.take(echo_len)?)
        .map_err(|e| Error::decode("checkpoint", format!("spec echo: {e}")))?;
    if echo.schema != "infl.checkpoint.v1" {
        return Err(Error::decode("checkpoint", format!("unknown echo schema {:?}", echo.schema)));
    }

    let n_segments = r.usize()?;
    let mut directory = Vec::with_capacity(n_segments);
    let mut expected_offset = 0usize;
    for _ in 0..n_segments {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::decode("checkpoint", "segment name is not utf-8"))?
            .to_string();
        let shape = match r.take(1)?[0] {
            0 => SegmentShape::Matrix { rows: r.usize()?, cols: r.usize()? },
            1 => SegmentShape::Vector { len: r.usize()? },
            t => return Err(Error::decode("checkpoint", format!("unknown shape tag {t}"))),
        };
        let offset = r.usize()?;
        let count = r.usize()?;
        if count != shape.count() {
            return Err(Error::decode(
                "checkpoint",
                format!("segment {name}: shape {shape} vs {count} values"),
            ));
        }
        if offset != expected_offset {
            return Err(Error::decode(
                "checkpoint",
                format!("segment {name}: offset {offset}, expected {expected_offset}"),
            ));
        }
        expected_offset += count;
        directory.push((name, shape, count));
    }

    let total = r.usize()?;
    if total != expected_offset {
        return Err(Error::decode(
            "checkpoint",
            format!("payload holds {total} values but directory sums to {expected_offset}"),
        ));
    }
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        let raw = u64::from_le_bytes(r.take(8)?.try_into().expect("length checked"));
        values.push(f64::from_bits(raw));
    }
    if r.pos != body.len() {
        return Err(Error::decode(
            "checkpoint",
            format!("{} trailing bytes after payload", body.len() - r.pos),
        ));
    }

    let mut pv = ParamVector::new();
    let mut used = 0;
    for (name, shape, count) in directory {
        pv.push(name, shape, values[used..used + count].to_vec())?;
        used += count;
    }

    // The stream only shapes the throwaway initialization; every value is
    // overwritten by the stored state right after.
    let mut model = build_model(&echo.model, &echo.lock, &derive_stream(0, &[0]))?;
    if echo.meta.federation.method.uses_lora() {
        for (li, name) in ["dec0", "dec1"].into_iter().enumerate() {
            let mut s = derive_stream(0, &[1, li as u64]);
            model.attach_lora(
                name,
                echo.meta.federation.lora_rank,
                echo.meta.federation.lora_scaling,
                &mut s,
            )?;
        }
    }
    model.load_full_state(&pv)?;
    model.bind_fingerprints(&echo.expected_key_fingerprints)?;
    Ok(LoadedCheckpoint { model, meta: echo.meta })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

/// Byte patterns a permutation could plausibly leak as: the two text
/// forms, a JSON array, and packed little-endian 64/32-bit integers.
pub fn permutation_encodings(key: &PermutationKey) -> Vec<(&'static str, Vec<u8>)> {
    let perm = key.as_slice();
    let decimal: Vec<String> = perm.iter().map(|p| p.to_string()).collect();
    let comma = decimal.join(",");
    let space = decimal.join(" ");
    let json = format!("[{comma}]");
    let mut le64 = Vec::with_capacity(perm.len() * 8);
    let mut le32 = Vec::with_capacity(perm.len() * 4);
    for &p in perm {
        le64.extend_from_slice(&(p as u64).to_le_bytes());
        le32.extend_from_slice(&(p as u32).to_le_bytes());
    }
    vec![
        ("text-comma", comma.into_bytes()),
        ("text-space", space.into_bytes()),
        ("json-array", json.into_bytes()),
        ("le-u64", le64),
        ("le-u32", le32),
    ]
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Scans arbitrary bytes for any encoding of any key in the set. Returns
/// the (layer, encoding) of the first hit, or None when the bytes are
/// clean — the confinement check run against checkpoints and uploaded
/// parameter serializations.
pub fn scan_bytes_for_keys(bytes: &[u8], keys: &KeySet) -> Option<(String, &'static str)> {
    for (layer, key) in keys.iter() {
        for (encoding, needle) in permutation_encodings(key) {
            if contains(bytes, &needle) {
                return Some((layer.clone(), encoding));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{Method, PartitionScheme};
    use crate::model::Task;
    use crate::numerics::matrix::Vector;

    fn locked_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_dim: 4,
            n_residual_blocks: 1,
            decoder_hidden: 5,
            output_dim: 3,
            locked_layers: vec!["dec0".into(), "dec1".into()],
            dropout_rate: 0.0,
            task: Task::Classification,
        }
    }

    fn meta(method: Method) -> CheckpointMeta {
        CheckpointMeta {
            data: DataDescriptor {
                kind: crate::data::DatasetKind::GaussianMixture {
                    n_classes: 3,
                    center_scale: 3.0,
                    noise_std: 1.0,
                },
                n_samples: 60,
                n_features: 3,
                eval_fraction: 0.2,
            },
            federation: FederationConfig {
                method,
                n_clients: 2,
                lora_rank: 2,
                partition: PartitionScheme::Iid,
                ..FederationConfig::default()
            },
            seed: 5,
        }
    }

    fn perturb(model: &mut Model, seed: u64) {
        let pv = model.full_state();
        let mut s = derive_stream(seed, &[9]);
        let flat: Vec<f64> = pv.flatten().iter().map(|v| v + 0.2 * s.next_normal()).collect();
        model.load_full_state(&pv.unflatten_like(&flat).unwrap()).unwrap();
        assert_eq!(model.full_state().flatten(), flat);
    }

    fn locked_model(seed: u64) -> (Model, KeySet) {
        let lock = LockConfig { levels: 2, inr_hidden: 3, inr_layers: 2, ..LockConfig::default() };
        let mut model = build_model(&locked_spec(), &lock, &derive_stream(seed, &[0])).unwrap();
        perturb(&mut model, seed);
        let mut keys = KeySet::new();
        for (i, name) in model.locked_layer_names().into_iter().enumerate() {
            let n = model.locked_layer(&name).unwrap().n_out();
            let mut ks = derive_stream(seed, &[2, i as u64]);
            keys.insert(name, PermutationKey::generate(n, &mut ks).unwrap());
        }
        model.bind_keys(&keys).unwrap();
        (model, keys)
    }

    fn batch(seed: u64, n: usize, dim: usize) -> Vec<Vector> {
        let mut s = derive_stream(seed, &[3]);
        (0..n).map(|_| Vector::from_vec((0..dim).map(|_| s.next_normal()).collect())).collect()
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, keys) = locked_model(11);
        let m = meta(Method::Infl);
        save_checkpoint(&model, &m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, m);
        assert_eq!(loaded.model.spec(), model.spec());
        assert_eq!(loaded.model.lock_config(), model.lock_config());
        assert_eq!(loaded.model.expected_fingerprints(), model.expected_fingerprints());
        assert_eq!(loaded.model.full_state().flatten(), model.full_state().flatten());
        let xs = batch(11, 6, 3);
        let want = model.forward_batch(&xs, &keys).unwrap();
        let got = loaded.model.forward_batch(&xs, &keys).unwrap();
        for (a, b) in want.iter().zip(&got) {
            for i in 0..a.len() {
                assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn adapter_models_round_trip_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        let spec = ModelSpec { locked_layers: vec![], ..locked_spec() };
        let mut model =
            build_model(&spec, &LockConfig::default(), &derive_stream(12, &[0])).unwrap();
        let mut s = derive_stream(12, &[1]);
        model.attach_lora("dec0", 2, 1.0, &mut s).unwrap();
        model.attach_lora("dec1", 2, 1.0, &mut s).unwrap();
        perturb(&mut model, 12);
        let m = meta(Method::FlLoraDp);
        save_checkpoint(&model, &m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.full_state().flatten(), model.full_state().flatten());
        let xs = batch(12, 4, 3);
        let want = model.forward_batch(&xs, &KeySet::new()).unwrap();
        let got = loaded.model.forward_batch(&xs, &KeySet::new()).unwrap();
        for (a, b) in want.iter().zip(&got) {
            for i in 0..a.len() {
                assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let (model, _) = locked_model(13);
        let bytes = checkpoint_bytes(&model, &meta(Method::Infl)).unwrap();

        let mut flipped = bytes.clone();
        let payload_byte = flipped.len() - CHECKSUM_LEN - 9;
        flipped[payload_byte] ^= 0x40;
        let err = load_checkpoint_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let err = load_checkpoint_bytes(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("short"), "{err}");

        let err = load_checkpoint_bytes(&bytes[..8]).unwrap_err().to_string();
        assert!(err.contains("short"), "{err}");
    }

    fn with_fixed_checksum(mut bytes: Vec<u8>) -> Vec<u8> {
        let body_len = bytes.len() - CHECKSUM_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        bytes
    }

    #[test]
    fn bad_magic_and_version_are_named() {
        let (model, _) = locked_model(14);
        let bytes = checkpoint_bytes(&model, &meta(Method::Infl)).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let err =
            load_checkpoint_bytes(&with_fixed_checksum(wrong_magic)).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut wrong_version = bytes;
        wrong_version[5] = 9;
        let err =
            load_checkpoint_bytes(&with_fixed_checksum(wrong_version)).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn checkpoints_hold_no_key_encoding() {
        let (model, keys) = locked_model(15);
        let bytes = checkpoint_bytes(&model, &meta(Method::Infl)).unwrap();
        assert_eq!(scan_bytes_for_keys(&bytes, &keys), None);

        // Positive controls: the scanner does find keys where they exist.
        let key_file = keys.to_text().into_bytes();
        let hit = scan_bytes_for_keys(&key_file, &keys).unwrap();
        assert_eq!(hit.1, "text-comma");
        let key = keys.iter().next().unwrap().1;
        let mut packed = vec![0xAA; 7];
        for &p in key.as_slice() {
            packed.extend_from_slice(&(p as u64).to_le_bytes());
        }
        packed.extend_from_slice(&[0x55; 3]);
        assert!(scan_bytes_for_keys(&packed, &keys).is_some());
    }

    #[test]
    fn keyless_load_supports_only_unauthorized_forwards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, keys) = locked_model(16);
        save_checkpoint(&model, &meta(Method::Infl), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let xs = batch(16, 4, 3);

        // Stripped evaluation needs no keys.
        loaded.model.forward_batch_stripped(&xs).unwrap();

        // A checked forward demands the bound key set.
        let mut wrong = KeySet::new();
        for (i, name) in loaded.model.locked_layer_names().into_iter().enumerate() {
            let n = loaded.model.locked_layer(&name).unwrap().n_out();
            let mut ks = derive_stream(99, &[4, i as u64]);
            wrong.insert(name, PermutationKey::generate(n, &mut ks).unwrap());
        }
        let err = loaded.model.forward_batch(&xs, &wrong).unwrap_err().to_string();
        assert!(err.contains("key mismatch"), "{err}");
        loaded.model.forward_batch(&xs, &keys).unwrap();
    }
}
