//! Plain-text parameter checkpoints.
//!
//! ```text
//! lqg-gain-net-checkpoint
//! version 1
//! state_dim 2
//! obs_dim 2
//! embed 40
//! hidden 40
//! seed 7
//! base_gain 1 0 0 1
//! count 10284
//! <count lines, one f64 each, shortest round-trip decimal>
//! ```
//!
//! Values are listed in layout order: `embed_w`, `embed_b`, `input_w`,
//! `input_b`, `hidden_w`, `hidden_b`, `out_w`, `out_b`, each row-major.
//! `base_gain` lists the fixed `m x n` gain offset row-major on one line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GainNetConfig, GainNetParams};
use crate::tensor::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "lqg-gain-net-checkpoint";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &GainNetParams) -> String {
    let mut out = String::new();
    let cfg = params.config();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "version {VERSION}");
    let _ = writeln!(out, "state_dim {}", params.state_dim());
    let _ = writeln!(out, "obs_dim {}", params.obs_dim());
    let _ = writeln!(out, "embed {}", cfg.embed);
    let _ = writeln!(out, "hidden {}", cfg.hidden);
    let _ = writeln!(out, "seed {}", params.seed());
    let base: Vec<String> = params.base_gain().as_slice().iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(out, "base_gain {}", base.join(" "));
    let _ = writeln!(out, "count {}", params.len());
    for v in params.flatten() {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

fn next_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    what: &str,
) -> Result<(usize, &'a str)> {
    lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
}

/// Fields of a `key v1 v2 ...` line.
fn keyed<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<(usize, Vec<&'a str>)> {
    let (no, line) = next_line(lines, key)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Checkpoint(format!("line {}: expected `{key}`", no + 1)));
    }
    Ok((no, parts.collect()))
}

fn header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<u64> {
    let (no, values) = keyed(lines, key)?;
    match values.as_slice() {
        [v] => v
            .parse()
            .map_err(|_| Error::Checkpoint(format!("line {}: bad value for {key}", no + 1))),
        _ => Err(Error::Checkpoint(format!("line {}: expected `{key} <value>`", no + 1))),
    }
}

pub fn parse_checkpoint(text: &str) -> Result<GainNetParams> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = next_line(&mut lines, "header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a gain network checkpoint".into()));
    }
    let version = header(&mut lines, "version")?;
    if version != VERSION as u64 {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let m = header(&mut lines, "state_dim")? as usize;
    let n = header(&mut lines, "obs_dim")? as usize;
    let embed = header(&mut lines, "embed")? as usize;
    let hidden = header(&mut lines, "hidden")? as usize;
    let seed = header(&mut lines, "seed")?;
    let (no, values) = keyed(&mut lines, "base_gain")?;
    let base: Vec<f64> = values
        .iter()
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("line {}: bad base gain", no + 1)))?;
    if base.len() != m * n {
        return Err(Error::Checkpoint(format!(
            "line {}: base gain needs {} values",
            no + 1,
            m * n
        )));
    }
    let count = header(&mut lines, "count")? as usize;
    let config = GainNetConfig { embed, hidden };
    if GainNetParams::count(m, n, config) != count {
        return Err(Error::Checkpoint(format!(
            "count {count} does not match the layer layout"
        )));
    }
    let mut flat = Vec::with_capacity(count);
    for (no, line) in lines.by_ref().take(count) {
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| Error::Checkpoint(format!("line {}: bad weight", no + 1)))?;
        flat.push(v);
    }
    if flat.len() != count {
        return Err(Error::Checkpoint(format!(
            "expected {count} weights, found {}",
            flat.len()
        )));
    }
    if lines.any(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Checkpoint("trailing data after weights".into()));
    }
    GainNetParams::from_flat(m, n, config, seed, &flat)?.with_base_gain(Matrix::new(m, n, base)?)
}

pub fn save_checkpoint(params: &GainNetParams, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(params))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<GainNetParams> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&text)
}
