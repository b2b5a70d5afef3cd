use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::common::Ctx;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Versions {
    pub flowspan: &'static str,
    pub manifest: u32,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub inputs: Vec<PathBuf>,
    pub parameters: Map<String, Value>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub versions: Versions,
}

impl RunManifest {
    pub fn new(ctx: &Ctx, command: &'static str) -> Self {
        Self {
            command,
            inputs: Vec::new(),
            parameters: Map::new(),
            outputs: Vec::new(),
            seed: ctx.seed,
            threads: ctx.threads,
            versions: Versions {
                flowspan: env!("CARGO_PKG_VERSION"),
                manifest: 1,
            },
        }
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.parameters.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
        self
    }

    pub fn output(&mut self, p: PathBuf) -> &mut Self {
        self.outputs.push(p);
        self
    }

    pub fn outputs(&mut self, p: impl IntoIterator<Item = PathBuf>) -> &mut Self {
        self.outputs.extend(p);
        self
    }

    /// Writes the manifest to `path`.
    pub fn write(&self, path: &Path) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        flowspan::io::write_atomic(path, text.as_bytes())?;
        Ok(path.to_path_buf())
    }

    /// Writes `run_manifest.json` into an output directory.
    pub fn write_in(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        self.write(&dir.join(MANIFEST_NAME))
    }
}

/// Manifest path for a single-file output: `x.png` gets `x.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    file.with_extension("manifest.json")
}

/// Writes a JSON record atomically.
pub fn write_record(path: &Path, value: &impl Serialize) -> anyhow::Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    flowspan::io::write_atomic(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}
