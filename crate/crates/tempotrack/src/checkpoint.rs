//! Checkpoint format: a text manifest (one line per parameter: name, dtype,
//! shape, byte offset, trainable flag) next to one raw blob of little-endian
//! f32 values in manifest order. Loading validates every entry against the
//! model and fails closed.

use std::path::Path;

use sha2::{Digest, Sha256};
use tempotrack_tensor::{ParamStore, Scalar, Tensor};

use crate::error::{ModelError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * 4
    }
}

/// Parse manifest text. Pure and panic-free on arbitrary input.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestEntry>, String> {
    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(format!("line {lineno}: expected 'name dtype shape offset trainable'"));
        }
        let name = parts[0].to_string();
        if name.is_empty() || name.len() > 256 {
            return Err(format!("line {lineno}: bad parameter name"));
        }
        if parts[1] != "f32" {
            return Err(format!("line {lineno}: unsupported dtype '{}'", parts[1]));
        }
        let mut shape = Vec::new();
        for d in parts[2].split('x') {
            let v: usize = d.parse().map_err(|e| format!("line {lineno}: bad shape: {e}"))?;
            if v == 0 || v > 1 << 24 {
                return Err(format!("line {lineno}: dimension {v} out of range"));
            }
            shape.push(v);
        }
        if shape.is_empty() || shape.len() > 8 {
            return Err(format!("line {lineno}: bad shape rank"));
        }
        let numel: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("line {lineno}: shape overflows"))?;
        if numel > 1 << 28 {
            return Err(format!("line {lineno}: tensor too large"));
        }
        let offset: usize = parts[3]
            .parse()
            .map_err(|e| format!("line {lineno}: bad offset: {e}"))?;
        if offset != expected_offset {
            return Err(format!(
                "line {lineno}: offset {offset} breaks contiguity (expected {expected_offset})"
            ));
        }
        expected_offset = expected_offset
            .checked_add(numel * 4)
            .ok_or_else(|| format!("line {lineno}: offset overflows"))?;
        let trainable = match parts[4] {
            "1" => true,
            "0" => false,
            other => return Err(format!("line {lineno}: bad trainable flag '{other}'")),
        };
        if entries.iter().any(|e: &ManifestEntry| e.name == name) {
            return Err(format!("line {lineno}: duplicate parameter '{name}'"));
        }
        entries.push(ManifestEntry {
            name,
            shape,
            offset,
            trainable,
        });
    }
    Ok(entries)
}

fn render_manifest<F: Scalar>(store: &ParamStore<F>) -> String {
    let mut out = String::new();
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        let param = p.borrow();
        let shape: Vec<String> = param.value.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{} f32 {} {} {}\n",
            name,
            shape.join("x"),
            offset,
            if param.trainable { 1 } else { 0 }
        ));
        offset += param.value.numel() * 4;
    }
    out
}

/// Write manifest + weight blob into `dir` (created if needed).
pub fn save<F: Scalar>(store: &ParamStore<F>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir.display().to_string(), e))?;
    let manifest = render_manifest(store);
    let mut blob = Vec::with_capacity(store.total_elements() * 4);
    for (_, p) in store.iter() {
        for v in p.borrow().value.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| ModelError::io(mpath.display().to_string(), e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    std::fs::write(&wpath, blob).map_err(|e| ModelError::io(wpath.display().to_string(), e))?;
    Ok(())
}

fn read_checkpoint(dir: &Path) -> Result<(Vec<ManifestEntry>, Vec<u8>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| ModelError::io(mpath.display().to_string(), e))?;
    let entries =
        parse_manifest(&text).map_err(|e| ModelError::load(mpath.display().to_string(), e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath).map_err(|e| ModelError::io(wpath.display().to_string(), e))?;
    let expected: usize = entries.iter().map(|e| e.byte_len()).sum();
    if blob.len() != expected {
        return Err(ModelError::load(
            wpath.display().to_string(),
            format!("weight blob is {} bytes, manifest expects {}", blob.len(), expected),
        ));
    }
    Ok((entries, blob))
}

fn entry_tensor<F: Scalar>(entry: &ManifestEntry, blob: &[u8]) -> Result<Tensor<F>> {
    let data: Vec<F> = blob[entry.offset..entry.offset + entry.byte_len()]
        .chunks_exact(4)
        .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Ok(Tensor::new(entry.shape.clone(), data)?)
}

/// Load a checkpoint whose parameter set must match the store exactly.
/// Values and trainable flags are both restored.
pub fn load<F: Scalar>(store: &ParamStore<F>, dir: &Path) -> Result<()> {
    let (entries, blob) = read_checkpoint(dir)?;
    if entries.len() != store.len() {
        return Err(ModelError::load(
            dir.display().to_string(),
            format!("checkpoint has {} parameters, model has {}", entries.len(), store.len()),
        ));
    }
    for entry in &entries {
        let p = store.get(&entry.name).ok_or_else(|| {
            ModelError::load(
                dir.display().to_string(),
                format!("unknown parameter '{}'", entry.name),
            )
        })?;
        if p.shape() != entry.shape {
            return Err(ModelError::load(
                dir.display().to_string(),
                format!(
                    "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                    entry.name,
                    entry.shape,
                    p.shape()
                ),
            ));
        }
        p.set_value(entry_tensor(entry, &blob)?);
        p.set_trainable(entry.trainable);
    }
    Ok(())
}

/// Load a (possibly partial) base checkpoint: every checkpoint entry must
/// exist in the store with the right shape; loaded parameters are frozen,
/// everything else keeps its init and stays trainable. Returns the loaded
/// names.
pub fn load_base<F: Scalar>(store: &ParamStore<F>, dir: &Path) -> Result<Vec<String>> {
    let (entries, blob) = read_checkpoint(dir)?;
    let mut loaded = Vec::with_capacity(entries.len());
    for entry in &entries {
        let p = store.get(&entry.name).ok_or_else(|| {
            ModelError::load(
                dir.display().to_string(),
                format!("base parameter '{}' not present in this model", entry.name),
            )
        })?;
        if p.shape() != entry.shape {
            return Err(ModelError::load(
                dir.display().to_string(),
                format!(
                    "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                    entry.name,
                    entry.shape,
                    p.shape()
                ),
            ));
        }
        p.set_value(entry_tensor(entry, &blob)?);
        p.set_trainable(false);
        loaded.push(entry.name.clone());
    }
    Ok(loaded)
}

/// SHA-256 over the f32 little-endian bytes of every parameter whose name
/// passes the filter, in store order.
pub fn digest_params<F: Scalar>(store: &ParamStore<F>, filter: impl Fn(&str) -> bool) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, p) in store.iter() {
        if !filter(name) {
            continue;
        }
        hasher.update(name.as_bytes());
        for v in p.borrow().value.data() {
            hasher.update((v.to_f64() as f32).to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempotrack_tensor::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tempotrack_ckpt_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn sample_store(seed: u64) -> ParamStore<f32> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        store.register("a.w", rng.normal_tensor(&[3, 4], 1.0), true);
        store.register("a.b", rng.normal_tensor(&[4], 1.0), false);
        store.register("b.w", rng.normal_tensor(&[2, 2, 2], 1.0), true);
        store
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let store = sample_store(1);
        let dir = tmp("roundtrip");
        save(&store, &dir).unwrap();

        let target = sample_store(999); // different values, same structure
        load(&target, &dir).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(target.iter()) {
            let (a, b) = (a.borrow(), b.borrow());
            assert_eq!(a.trainable, b.trainable);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_fails_closed() {
        let store = sample_store(2);
        let dir = tmp("shape_mismatch");
        save(&store, &dir).unwrap();
        let mut rng = Rng::new(3);
        let mut other = ParamStore::<f32>::new();
        other.register("a.w", rng.normal_tensor(&[3, 5], 1.0), true); // wrong shape
        other.register("a.b", rng.normal_tensor(&[4], 1.0), false);
        other.register("b.w", rng.normal_tensor(&[2, 2, 2], 1.0), true);
        assert!(load(&other, &dir).is_err());
    }

    #[test]
    fn missing_and_extra_params_fail_closed() {
        let store = sample_store(4);
        let dir = tmp("extra");
        save(&store, &dir).unwrap();
        let mut rng = Rng::new(5);
        let mut fewer = ParamStore::<f32>::new();
        fewer.register("a.w", rng.normal_tensor(&[3, 4], 1.0), true);
        assert!(load(&fewer, &dir).is_err());
    }

    #[test]
    fn base_load_freezes_loaded_names_only() {
        let store = sample_store(6);
        let dir = tmp("base");
        save(&store, &dir).unwrap();
        let mut rng = Rng::new(7);
        let mut bigger = sample_store(8);
        let extra = bigger.register("prompt.w", rng.normal_tensor(&[4], 1.0), true);
        let loaded = load_base(&bigger, &dir).unwrap();
        assert_eq!(loaded.len(), 3);
        for name in &loaded {
            assert!(!bigger.get(name).unwrap().trainable());
        }
        assert!(extra.trainable());
    }

    #[test]
    fn manifest_parser_rejects_corruption() {
        assert!(parse_manifest("a f32 2x2 0 1\n").is_ok());
        assert!(parse_manifest("a f64 2x2 0 1\n").is_err()); // dtype
        assert!(parse_manifest("a f32 2x0 0 1\n").is_err()); // zero dim
        assert!(parse_manifest("a f32 2x2 4 1\n").is_err()); // offset gap
        assert!(parse_manifest("a f32 2x2 0 2\n").is_err()); // flag
        assert!(parse_manifest("a f32 2x2 0 1\na f32 2 16 0\n").is_err()); // duplicate
        assert!(parse_manifest("a f32 2x2 0 1\nb f32 3 17 0\n").is_err()); // contiguity
    }

    #[test]
    fn digest_tracks_content() {
        let store = sample_store(9);
        let before = digest_params(&store, |n| n.starts_with("a."));
        let unrelated = digest_params(&store, |n| n.starts_with("b."));
        // touching b.w must not change the a.* digest
        let p = store.get("b.w").unwrap();
        let mut v = p.value();
        v.data_mut()[0] += 1.0;
        p.set_value(v);
        assert_eq!(before, digest_params(&store, |n| n.starts_with("a.")));
        assert_ne!(unrelated, digest_params(&store, |n| n.starts_with("b.")));
    }
}
