//! Checkpoint files: magic bytes "CPO1", a decimal-text header with the
//! model configuration, then every parameter as little-endian IEEE-754 f64
//! in flat layout order. Writes go to a temporary file in the target
//! directory and are renamed into place, so a crash never leaves a torn
//! checkpoint behind.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamLayout, Parameters};

const MAGIC: &[u8] = b"CPO1\n";
const HEADER_FIELDS: [&str; 5] = ["vocab_size", "d_model", "n_layers", "n_heads", "max_context"];

fn checkpoint_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Serialises config and parameters to `path` atomically.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &Parameters) -> Result<()> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    if params.len() != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} parameters, layout expects {}",
            params.len(),
            layout.total_len()
        )));
    }
    let mut bytes = Vec::with_capacity(MAGIC.len() + 96 + params.len() * 8);
    bytes.extend_from_slice(MAGIC);
    let values = [
        config.vocab_size,
        config.d_model,
        config.n_layers,
        config.n_heads,
        config.max_context,
    ];
    for (name, value) in HEADER_FIELDS.iter().zip(values) {
        bytes.extend_from_slice(format!("{name} {value}\n").as_bytes());
    }
    for &x in params.flat() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| checkpoint_err(path, "path has no file name"))?;
    let mut tmp = file_name.to_os_string();
    tmp.push(".tmp");
    let tmp_path = match dir {
        Some(d) => d.join(&tmp),
        None => tmp.clone().into(),
    };
    {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

/// Reads a checkpoint back into its config and parameters.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(checkpoint_err(path, "missing CPO1 magic"));
    }
    let mut cursor = MAGIC.len();
    let mut values = [0usize; 5];
    for (i, name) in HEADER_FIELDS.iter().enumerate() {
        let rest = &bytes[cursor..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| checkpoint_err(path, format!("truncated header before {name}")))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| checkpoint_err(path, format!("non-UTF-8 header line for {name}")))?;
        let (got_name, got_value) = line
            .split_once(' ')
            .ok_or_else(|| checkpoint_err(path, format!("malformed header line {line:?}")))?;
        if got_name != *name {
            return Err(checkpoint_err(
                path,
                format!("expected header field {name}, found {got_name}"),
            ));
        }
        values[i] = got_value
            .parse()
            .map_err(|_| checkpoint_err(path, format!("invalid value for {name}: {got_value:?}")))?;
        cursor += nl + 1;
    }
    let config = ModelConfig {
        vocab_size: values[0],
        d_model: values[1],
        n_layers: values[2],
        n_heads: values[3],
        max_context: values[4],
    };
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let body = &bytes[cursor..];
    let expected = layout.total_len() * 8;
    if body.len() != expected {
        return Err(checkpoint_err(
            path,
            format!(
                "parameter payload is {} bytes, layout expects {expected}",
                body.len()
            ),
        ));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact yields 8 bytes")))
        .collect();
    let params = Parameters::from_flat(flat, &layout)?;
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_parameters;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 8,
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let config = tiny_config();
        let mut params = init_parameters(&config, 3).unwrap();
        // Salt the buffer with awkward values: negative zero, subnormals,
        // and full-mantissa constants must survive exactly.
        let flat = params.flat_mut();
        flat[0] = -0.0;
        flat[1] = f64::MIN_POSITIVE / 8.0;
        flat[2] = std::f64::consts::PI;
        flat[3] = -1e300;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let (loaded_config, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded.len(), params.len());
        for (a, b) in loaded.flat().iter().zip(params.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_human_readable_text() {
        let config = tiny_config();
        let params = init_parameters(&config, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let head = std::str::from_utf8(&bytes[..60]).unwrap();
        assert!(head.starts_with("CPO1\nvocab_size 6\nd_model 8\n"));
        // No stray temporary file left behind.
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corrupted_files_are_rejected_with_context() {
        let config = tiny_config();
        let params = init_parameters(&config, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        std::fs::write(&bad_magic, b"NOPE\nrest").unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(Error::Checkpoint { .. })
        ));

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &good[..good.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::Checkpoint { .. })
        ));

        let mut padded = good.clone();
        padded.extend_from_slice(&[0u8; 8]);
        let overlong = dir.path().join("overlong.ckpt");
        std::fs::write(&overlong, &padded).unwrap();
        assert!(matches!(
            load_checkpoint(&overlong),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected_at_save_time() {
        let config = tiny_config();
        let params = Parameters::from_raw(vec![0.0; 7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        assert!(save_checkpoint(&path, &config, &params).is_err());
    }
}
