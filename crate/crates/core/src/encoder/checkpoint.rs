//! Line-oriented checkpoint format:
//!
//! ```text
//! mrc-distill checkpoint v1
//! config {"vocab_size":108,...}
//! tensor embed.token 108 32
//! <space-separated values>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so loading and
//! re-saving reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::params::ModelParams;
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "mrc-distill checkpoint v1";

pub fn write_checkpoint(params: &ModelParams) -> Result<String> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("config ");
    out.push_str(&serde_json::to_string(&params.config)?);
    out.push('\n');
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.push_str("tensor ");
        out.push_str(name);
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for (i, v) in t.data().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_checkpoint(text: &str, path: &Path) -> Result<ModelParams> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(parse_err(1, format!("missing header {MAGIC:?}"))),
    }
    let (n, cfg_line) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing config line".into()))?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| parse_err(n, "expected `config <json>`".into()))?;
    let config: EncoderConfig =
        serde_json::from_str(cfg_json).map_err(|e| parse_err(n, e.to_string()))?;
    config.validate()?;

    let expected_names = super::params::tensor_names(config.n_layers);
    let mut tensors = Vec::with_capacity(expected_names.len());
    while let Some((n, header)) = lines.next() {
        let mut parts = header.split(' ');
        if parts.next() != Some("tensor") {
            return Err(parse_err(n, "expected `tensor <name> <dims..>`".into()));
        }
        let name = parts
            .next()
            .ok_or_else(|| parse_err(n, "missing tensor name".into()))?;
        if expected_names.get(tensors.len()).map(String::as_str) != Some(name) {
            return Err(parse_err(n, format!("unexpected tensor {name:?}")));
        }
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(n, e.to_string()))?;
        let (vn, values) = lines
            .next()
            .ok_or_else(|| parse_err(n + 1, format!("missing values for {name}")))?;
        let data = values
            .split(' ')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(vn, e.to_string()))?;
        let t = Tensor::new(shape, data).map_err(|e| parse_err(vn, e.to_string()))?;
        tensors.push(t);
    }
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let text = write_checkpoint(params)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text, path)
}
