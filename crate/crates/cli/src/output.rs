use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::CmdResult;

/// Bumped when the snapshot layout changes.
pub const SNAPSHOT_SCHEMA: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Serialize)]
struct Snapshot<'a, S: Serialize> {
    schema_version: u32,
    tool_version: &'static str,
    command: &'a str,
    inputs: Vec<String>,
    settings: &'a S,
}

/// Records what produced `dir`. No timestamps and no output path, so a rerun
/// with the same inputs writes the same bytes.
pub fn write_snapshot<S: Serialize>(
    dir: &Path,
    command: &str,
    inputs: &[PathBuf],
    settings: &S,
) -> CmdResult {
    let snap = Snapshot {
        schema_version: SNAPSHOT_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        settings,
    };
    let mut text = serde_json::to_string_pretty(&snap).context("serializing config snapshot")?;
    text.push('\n');
    write_file(&dir.join(SNAPSHOT_FILE), text.as_bytes())
}

pub fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CmdResult {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).context("serializing record")?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Expands directories to their `.vlt` files. The result is sorted so runs
/// do not depend on directory iteration order.
pub fn expand_traces(paths: &[PathBuf]) -> CmdResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries =
                fs::read_dir(p).with_context(|| format!("listing {}", p.display()))?;
            for e in entries {
                let path = e.with_context(|| format!("listing {}", p.display()))?.path();
                if path.extension().is_some_and(|x| x == "vlt") {
                    out.push(path);
                }
            }
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(anyhow::anyhow!("{}: no such file or directory", p.display()).into());
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(anyhow::anyhow!("no trace files found").into());
    }
    Ok(out)
}
