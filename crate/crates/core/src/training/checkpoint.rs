//! Checkpoint serialization.
//!
//! Layout: the 8-byte magic `SRVAE01\0`, then a payload of
//!   - u64 LE metadata length, UTF-8 `key=value` lines (model config echo
//!     plus caller-supplied entries such as the epoch),
//!   - u64 LE tensor count, then per tensor: u64 LE name length, name bytes,
//!     u64 LE rank, u64 LE extents, f32 LE values,
//! and a trailing CRC32 of the payload. Values are stored at 32-bit
//! precision; in-memory parameters are 64-bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::AdaMaxState;
use crate::error::{Error, Result};
use crate::models::{build_srvae, build_vae, Model, ModelConfig};
use crate::numerics::DenseArray;
use crate::params::HasParams;

pub const MAGIC: &[u8; 8] = b"SRVAE01\0";

fn push_tensor(buf: &mut Vec<u8>, name: &str, tensor: &DenseArray) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn config_metadata(model: &Model) -> Vec<(String, String)> {
    let cfg = model.config();
    vec![
        ("model".into(), model.kind().into()),
        ("height".into(), cfg.height.to_string()),
        ("width".into(), cfg.width.to_string()),
        ("channels".into(), cfg.channels.to_string()),
        ("latent_k".into(), cfg.latent_k.to_string()),
        ("latent_m".into(), cfg.latent_m.to_string()),
        ("n_mix".into(), cfg.n_mix.to_string()),
        ("flow_depth".into(), cfg.flow_depth.to_string()),
        ("hidden_width".into(), cfg.hidden_width.to_string()),
        ("init_seed".into(), cfg.seed.to_string()),
        ("opt_t".into(), "0".into()),
    ]
}

/// Serialize model parameters and optimizer state; bit-exact given equal
/// inputs.
pub fn save_checkpoint(
    model: &Model,
    state: &AdaMaxState,
    path: &Path,
    extra_metadata: &[(String, String)],
) -> Result<()> {
    let mut meta = config_metadata(model);
    for slot in &mut meta {
        if slot.0 == "opt_t" {
            slot.1 = state.t.to_string();
        }
    }
    meta.extend(extra_metadata.iter().cloned());
    let mut meta_text = String::new();
    for (k, v) in &meta {
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }

    let mut tensors: Vec<(String, DenseArray)> = Vec::new();
    model.for_each_param("", &mut |name, arr| {
        tensors.push((name.to_string(), arr.clone()));
    });
    if state.m.len() != tensors.len() || state.u_inf.len() != tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state has {} slots for {} parameter tensors",
            state.m.len(),
            tensors.len()
        )));
    }

    let mut payload = Vec::new();
    payload.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
    payload.extend_from_slice(meta_text.as_bytes());
    let total = tensors.len() * 3;
    payload.extend_from_slice(&(total as u64).to_le_bytes());
    for (name, tensor) in &tensors {
        push_tensor(&mut payload, name, tensor);
    }
    for ((name, _), m) in tensors.iter().zip(&state.m) {
        push_tensor(&mut payload, &format!("opt.m.{name}"), m);
    }
    for ((name, _), u) in tensors.iter().zip(&state.u_inf) {
        push_tensor(&mut payload, &format!("opt.uinf.{name}"), u);
    }

    let crc = crc32fast::hash(&payload);
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&payload)?;
    file.write_all(&crc.to_le_bytes())?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn parse_config(meta: &BTreeMap<String, String>) -> Result<(String, ModelConfig)> {
    let get = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata missing {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata {key} is not a number")))
    };
    let config = ModelConfig {
        height: num("height")?,
        width: num("width")?,
        channels: num("channels")?,
        latent_k: num("latent_k")?,
        latent_m: num("latent_m")?,
        n_mix: num("n_mix")?,
        flow_depth: num("flow_depth")?,
        hidden_width: num("hidden_width")?,
        seed: get("init_seed")?
            .parse()
            .map_err(|_| Error::Format("checkpoint metadata init_seed is not a number".into()))?,
    };
    Ok((get("model")?.clone(), config))
}

/// Load a checkpoint back into a freshly built model and optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(Model, AdaMaxState, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let payload = &bytes[MAGIC.len()..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::Format(format!(
            "checksum mismatch: payload {crc:#010x} vs stored {stored_crc:#010x}"
        )));
    }

    let mut reader = Reader {
        bytes: payload,
        pos: 0,
    };
    let meta_len = reader.u64()? as usize;
    let meta_text = std::str::from_utf8(reader.take(meta_len)?)
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    let tensor_count = reader.u64()? as usize;
    let mut tensors: BTreeMap<String, DenseArray> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = reader.u64()? as usize;
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = reader.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = reader.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.insert(name, DenseArray::new(shape, data)?);
    }
    if reader.pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - reader.pos
        )));
    }

    let (kind, config) = parse_config(&meta)?;
    let mut model = match kind.as_str() {
        "vae" => Model::Vae(build_vae(&config)?),
        "srvae" => Model::Srvae(build_srvae(&config)?),
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };

    let mut fill_error = None;
    let mut fill = |prefix: &str, name: &str, arr: &mut DenseArray| {
        let key = if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}{name}")
        };
        match tensors.get(&key) {
            Some(stored) if stored.shape() == arr.shape() => {
                arr.data_mut().copy_from_slice(stored.data());
            }
            Some(stored) => {
                fill_error.get_or_insert(Error::ShapeMismatch(format!(
                    "tensor {key}: header {:?} vs model {:?}",
                    stored.shape(),
                    arr.shape()
                )));
            }
            None => {
                fill_error.get_or_insert(Error::Format(format!("checkpoint missing tensor {key}")));
            }
        }
    };
    model.for_each_param_mut("", &mut |name, arr| fill("", name, arr));
    let mut state = AdaMaxState::new(&model);
    {
        let mut idx = 0;
        let mut names = Vec::new();
        model.for_each_param("", &mut |name, _| names.push(name.to_string()));
        for name in &names {
            fill("opt.m.", name, &mut state.m[idx]);
            fill("opt.uinf.", name, &mut state.u_inf[idx]);
            idx += 1;
        }
    }
    if let Some(err) = fill_error {
        return Err(err);
    }
    state.t = meta
        .get("opt_t")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    Ok((model, state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_srvae, ModelConfig, NoiseDraws};
    use crate::numerics::RngStream;
    use crate::params::{flatten_params, load_flat_params};

    fn f32_truncated(model: &Model) -> Model {
        let mut out = model.clone();
        let flat = flatten_params(model).map(|v| v as f32 as f64);
        load_flat_params(&mut out, &flat).unwrap();
        out
    }

    #[test]
    fn round_trip_preserves_values_and_elbo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.srvae");
        // Truncate to f32 first so serialization is lossless for the test.
        let model = f32_truncated(&Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap()));
        let state = AdaMaxState::new(&model);
        save_checkpoint(&model, &state, &path, &[("epoch".into(), "7".into())]).unwrap();

        let (loaded, loaded_state, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.get("epoch").unwrap(), "7");
        assert_eq!(
            flatten_params(&model).data(),
            flatten_params(&loaded).data()
        );
        assert_eq!(loaded_state.t, 0);

        let cfg = model.config().clone();
        let x = {
            let mut rng = RngStream::new(3);
            let values = (0..cfg.pixel_count())
                .map(|_| (rng.uniform() * 256.0) as u8)
                .collect();
            crate::downscale::DiscreteImage::new(cfg.height, cfg.width, cfg.channels, values)
                .unwrap()
        };
        let noise = NoiseDraws::draw_srvae(&cfg, &mut RngStream::new(4));
        let a = model.elbo_with_noise(&x, &noise).unwrap();
        let b = loaded.elbo_with_noise(&x, &noise).unwrap();
        assert_eq!(a, b, "ELBO changed across a checkpoint round trip");
    }

    #[test]
    fn magic_prefix_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.srvae");
        let model = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        save_checkpoint(&model, &AdaMaxState::new(&model), &path, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"SRVAE01\0");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.srvae");
        let model = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        save_checkpoint(&model, &AdaMaxState::new(&model), &path, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_checkpoint");
        std::fs::write(&path, b"HELLO WORLD, DEFINITELY NOT A CHECKPOINT").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected magic failure, got {other:?}"),
        }
    }

    #[test]
    fn save_is_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.srvae");
        let b = dir.path().join("b.srvae");
        let model = Model::Srvae(build_srvae(&ModelConfig::tiny()).unwrap());
        let state = AdaMaxState::new(&model);
        save_checkpoint(&model, &state, &a, &[]).unwrap();
        save_checkpoint(&model, &state, &b, &[]).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
