//! Flat `key = value` config files.
//!
//! Each entry becomes `--key value` (underscores read as dashes). A value
//! of `true` yields a bare switch and `false` drops the entry. Repeated
//! keys repeat the flag. Entries are inserted right after the subcommand,
//! ahead of the explicit flags, so explicit flags override them.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), i + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key `{key}`", path.display(), i + 1);
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Splices the entries of every `--config FILE` into `args`.
pub fn expand(args: Vec<String>) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            if let Some(f) = args.get(i + 1) {
                files.push(f.clone());
            }
            i += 2;
            continue;
        }
        if let Some(f) = args[i].strip_prefix("--config=") {
            files.push(f.to_string());
        }
        i += 1;
    }
    if files.is_empty() {
        return Ok(args);
    }
    let mut entries = Vec::new();
    for f in &files {
        let path = Path::new(f);
        let text = fs::read_to_string(path).with_context(|| format!("--config: cannot read {}", path.display()))?;
        entries.extend(parse(&text, path)?);
    }
    // subcommand = first token after the program name that is not a flag
    let Some(pos) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(entries);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
