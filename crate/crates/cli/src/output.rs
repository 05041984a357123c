//! Error reporting, artifact naming and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::CONFIG_SCHEMA_VERSION;

#[derive(Debug, Clone)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, kind: "usage", message: message.into() }
    }

    /// Writes the machine-readable error to stderr and returns its exit code.
    pub fn report(&self) -> ExitCode {
        let doc = serde_json::json!({
            "error": { "kind": self.kind, "message": self.message, "exit_code": self.code }
        });
        eprintln!("{doc}");
        ExitCode::from(self.code)
    }
}

impl From<ziplnpca::Error> for CliError {
    fn from(e: ziplnpca::Error) -> Self {
        if e.is_numerical() {
            CliError { code: 3, kind: "numerical", message: e.to_string() }
        } else {
            CliError::usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: 2, kind: "io", message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read '{}': {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// One invocation: the resolved config, its hash, and the artifacts written.
pub struct Run {
    dir: PathBuf,
    subcommand: &'static str,
    config: serde_json::Value,
    inputs: Vec<(String, String)>,
    seed: u64,
    hash: String,
    artifacts: Vec<String>,
    started: Instant,
}

impl Run {
    /// The config hash covers the subcommand, the config echo and the
    /// contents of every input file; the output directory is excluded.
    pub fn start(dir: &Path, subcommand: &'static str, config: &impl Serialize, seed: u64, inputs: &[&Path]) -> CliResult<Self> {
        let started = Instant::now();
        let config = serde_json::to_value(config).map_err(|e| CliError::usage(e.to_string()))?;
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<CliResult<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(subcommand.as_bytes());
        h.update(config.to_string().as_bytes());
        for (_, digest) in &inputs {
            h.update(digest.as_bytes());
        }
        let hash = hex(&h.finalize())[..12].to_string();
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError { code: 2, kind: "io", message: format!("cannot create '{}': {e}", dir.display()) })?;
        Ok(Run { dir: dir.to_path_buf(), subcommand, config, inputs, seed, hash, artifacts: Vec::new(), started })
    }

    fn name(&self, stem: &str, ext: &str) -> String {
        format!("{stem}_s{}_{}.{ext}", self.seed, self.hash)
    }

    /// Writes a JSON artifact, stamping objects with the seed and config hash.
    pub fn write_json(&mut self, stem: &str, mut doc: serde_json::Value) -> CliResult<PathBuf> {
        if let Some(obj) = doc.as_object_mut() {
            obj.insert("seed".into(), self.seed.into());
            obj.insert("config_hash".into(), self.hash.clone().into());
        }
        let name = self.name(stem, "json");
        let path = self.dir.join(&name);
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::usage(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        self.artifacts.push(name);
        Ok(path)
    }

    pub fn write_csv(&mut self, stem: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        let name = self.name(stem, "csv");
        let path = self.dir.join(&name);
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            text.push_str(&r.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        self.artifacts.push(name);
        Ok(path)
    }

    /// Writes the manifest and returns its path.
    pub fn finish(self) -> CliResult<PathBuf> {
        let doc = serde_json::json!({
            "schema_version": CONFIG_SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "config": self.config,
            "config_hash": self.hash,
            "seed": self.seed,
            "inputs": self.inputs.iter().map(|(p, d)| serde_json::json!({ "path": p, "sha256": d })).collect::<Vec<_>>(),
            "artifacts": self.artifacts,
            "versions": {
                "ziplnpca-cli": env!("CARGO_PKG_VERSION"),
                "rustc_target": std::env::consts::ARCH,
            },
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
        });
        let path = self.dir.join(self.name("manifest", "json"));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::usage(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

fn csv_field(f: &str) -> String {
    if f.contains([',', '"', '\n']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

/// Shortest round-trip text for a float; non-finite values are spelled out.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
