//! Secret permutation keys and their per-client key files.
//!
//! A key is a bijection over a locked layer's output indices. It never
//! appears inside model parameters or checkpoints; artifacts reference it
//! only through a one-way fingerprint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

const KEY_DOMAIN: &[u8] = b"inrlock-key-v1";
const KEY_FILE_HEADER: &str = "# locked-layer key set v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationKey {
    perm: Vec<usize>,
    fingerprint: String,
}

fn fingerprint_of(perm: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(KEY_DOMAIN);
    h.update((perm.len() as u64).to_le_bytes());
    for &p in perm {
        h.update((p as u64).to_le_bytes());
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

impl PermutationKey {
    /// Validates that `perm` is a bijection on `0..perm.len()`.
    pub fn new(perm: Vec<usize>) -> Result<PermutationKey> {
        if perm.is_empty() {
            return Err(Error::invalid("permutation", "must not be empty"));
        }
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n {
                return Err(Error::invalid("permutation", format!("entry {p} out of range 0..{n}")));
            }
            if seen[p] {
                return Err(Error::invalid("permutation", format!("entry {p} repeated")));
            }
            seen[p] = true;
        }
        let fingerprint = fingerprint_of(&perm);
        Ok(PermutationKey { perm, fingerprint })
    }

    pub fn identity(n_out: usize) -> Result<PermutationKey> {
        PermutationKey::new((0..n_out).collect())
    }

    /// Uniform random key via Fisher-Yates on the stream's documented
    /// shuffle; the draw sequence is part of the reproducibility contract.
    pub fn generate(n_out: usize, stream: &mut RngStream) -> Result<PermutationKey> {
        if n_out == 0 {
            return Err(Error::invalid("key size", "n_out must be nonzero"));
        }
        let mut perm: Vec<usize> = (0..n_out).collect();
        stream.shuffle(&mut perm);
        PermutationKey::new(perm)
    }

    pub fn n_out(&self) -> usize {
        self.perm.len()
    }

    /// `pi(i)`.
    pub fn map(&self, i: usize) -> usize {
        self.perm[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> PermutationKey {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        PermutationKey::new(inv).expect("inverse of a bijection is a bijection")
    }

    /// Content hash over the documented encoding (domain tag, n_out, then
    /// each entry as little-endian u64). Stable across versions.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Keys for every locked layer of one model, ordered by layer name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeySet {
    keys: BTreeMap<String, PermutationKey>,
}

impl KeySet {
    pub fn new() -> KeySet {
        KeySet::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, key: PermutationKey) {
        self.keys.insert(layer.into(), key);
    }

    pub fn get(&self, layer: &str) -> Option<&PermutationKey> {
        self.keys.get(layer)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PermutationKey)> {
        self.keys.iter()
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.keys
            .iter()
            .map(|(name, key)| (name.clone(), key.fingerprint().to_string()))
            .collect()
    }

    /// Self-describing text form: one record per layer, blank-line
    /// separated. Round-trips bit-exactly through `parse_text`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(KEY_FILE_HEADER);
        out.push('\n');
        for (name, key) in &self.keys {
            out.push('\n');
            let _ = writeln!(out, "layer = {name}");
            let _ = writeln!(out, "n_out = {}", key.n_out());
            let perm: Vec<String> = key.as_slice().iter().map(|p| p.to_string()).collect();
            let _ = writeln!(out, "perm = {}", perm.join(","));
            let _ = writeln!(out, "fingerprint = {}", key.fingerprint());
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<KeySet> {
        let mut set = KeySet::new();
        let mut record: Vec<(usize, String, String)> = Vec::new();
        let flush = |record: &mut Vec<(usize, String, String)>, set: &mut KeySet| -> Result<()> {
            if record.is_empty() {
                return Ok(());
            }
            let first_line = record[0].0;
            let mut layer = None;
            let mut n_out = None;
            let mut perm = None;
            let mut fp = None;
            for (line, k, v) in record.drain(..) {
                match k.as_str() {
                    "layer" => layer = Some(v),
                    "n_out" => {
                        n_out = Some(v.parse::<usize>().map_err(|_| Error::Config {
                            line,
                            detail: format!("bad n_out {v:?}"),
                        })?)
                    }
                    "perm" => {
                        let parsed: std::result::Result<Vec<usize>, _> =
                            v.split(',').map(|t| t.trim().parse::<usize>()).collect();
                        perm = Some(parsed.map_err(|_| Error::Config {
                            line,
                            detail: format!("bad permutation list {v:?}"),
                        })?);
                    }
                    "fingerprint" => fp = Some(v),
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("unknown key-file field {other:?}"),
                        })
                    }
                }
            }
            let missing = |what: &str| Error::Config {
                line: first_line,
                detail: format!("key record missing {what}"),
            };
            let layer = layer.ok_or_else(|| missing("layer"))?;
            let n_out = n_out.ok_or_else(|| missing("n_out"))?;
            let perm = perm.ok_or_else(|| missing("perm"))?;
            let fp = fp.ok_or_else(|| missing("fingerprint"))?;
            if perm.len() != n_out {
                return Err(Error::decode(
                    "key file",
                    format!("layer {layer}: n_out {n_out} but {} permutation entries", perm.len()),
                ));
            }
            let key = PermutationKey::new(perm)?;
            if key.fingerprint() != fp {
                return Err(Error::decode(
                    "key file",
                    format!("layer {layer}: fingerprint does not match permutation"),
                ));
            }
            if set.keys.contains_key(&layer) {
                return Err(Error::decode("key file", format!("layer {layer} appears twice")));
            }
            set.insert(layer, key);
            Ok(())
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                flush(&mut record, &mut set)?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            record.push((line_no, k.trim().to_string(), v.trim().to_string()));
        }
        flush(&mut record, &mut set)?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::artifacts::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<KeySet> {
        let text = std::fs::read_to_string(path)?;
        KeySet::parse_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::derive_stream;

    #[test]
    fn rejects_non_bijections() {
        assert!(PermutationKey::new(vec![]).is_err());
        assert!(PermutationKey::new(vec![0, 0]).is_err());
        assert!(PermutationKey::new(vec![0, 2]).is_err());
        assert!(PermutationKey::new(vec![1, 0, 2]).is_ok());
    }

    #[test]
    fn generate_matches_hand_executed_shuffle() {
        // Oracle: unroll the documented descending Fisher-Yates for n = 4
        // by drawing the three bounded indexes directly.
        let mut s = derive_stream(7, &[1]);
        let key = PermutationKey::generate(4, &mut s).unwrap();

        let mut oracle = derive_stream(7, &[1]);
        let mut perm = [0usize, 1, 2, 3];
        let j3 = oracle.next_index(4);
        perm.swap(3, j3);
        let j2 = oracle.next_index(3);
        perm.swap(2, j2);
        let j1 = oracle.next_index(2);
        perm.swap(1, j1);
        assert_eq!(key.as_slice(), &perm);
    }

    #[test]
    fn generated_keys_are_uniform_over_orders() {
        // 1000 keys at n_out = 3: each of the 6 orders has expectation
        // 166.7 and multinomial std ~11.8; use a 3 sigma band.
        let mut counts = BTreeMap::new();
        let mut s = derive_stream(123, &[9]);
        for _ in 0..1000 {
            let k = PermutationKey::generate(3, &mut s).unwrap();
            *counts.entry(k.as_slice().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (order, c) in counts {
            assert!((131..=202).contains(&c), "{order:?}: {c}");
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut s = derive_stream(5, &[2]);
        let k = PermutationKey::generate(12, &mut s).unwrap();
        let inv = k.inverse();
        for i in 0..12 {
            assert_eq!(inv.map(k.map(i)), i);
        }
    }

    #[test]
    fn fingerprint_depends_on_content_only() {
        let a = PermutationKey::new(vec![2, 0, 1]).unwrap();
        let b = PermutationKey::new(vec![2, 0, 1]).unwrap();
        let c = PermutationKey::new(vec![1, 0, 2]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn key_set_text_round_trip_is_exact() {
        let mut set = KeySet::new();
        let mut s = derive_stream(31, &[0]);
        set.insert("dec0", PermutationKey::generate(32, &mut s).unwrap());
        set.insert("dec1", PermutationKey::generate(4, &mut s).unwrap());
        let text = set.to_text();
        let parsed = KeySet::parse_text(&text).unwrap();
        assert_eq!(parsed, set);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn tampered_key_file_is_rejected() {
        let mut set = KeySet::new();
        let mut s = derive_stream(31, &[1]);
        set.insert("dec0", PermutationKey::generate(8, &mut s).unwrap());
        let text = set.to_text();
        let tampered = text.replace("perm = ", "perm = 0,"); // breaks bijection or fp
        assert!(KeySet::parse_text(&tampered).is_err());
        let unknown = text.replace("n_out", "size");
        assert!(KeySet::parse_text(&unknown).is_err());
    }
}
