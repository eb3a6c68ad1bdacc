//! Run plumbing: strict config loading with dotted-path overrides, output
//! directory, input hashing and the run manifest.

use igrog::{Error, Result};
use serde::de::DeserializeOwned;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct RunContext {
    pub command: String,
    pub out: PathBuf,
    pub seed_override: Option<u64>,
    pub window: Option<f64>,
    pub level: Option<f64>,
    config_value: serde_json::Value,
    config_path: PathBuf,
    start: Instant,
    inputs: std::cell::RefCell<BTreeMap<String, String>>,
    timings: std::cell::RefCell<BTreeMap<String, f64>>,
}

impl RunContext {
    pub fn new(
        command: &str,
        config_path: &str,
        out_dir: Option<&str>,
        seed: Option<u64>,
        window: Option<f64>,
        level: Option<f64>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let text = std::fs::read_to_string(config_path)
            .map_err(|e| Error::InvalidArgument(format!("config {config_path:?}: {e}")))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("config {config_path:?}: {e}")))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let out = out_dir
            .map(PathBuf::from)
            .or_else(|| value.get("out").and_then(|v| v.as_str()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        Ok(RunContext {
            command: command.to_string(),
            out,
            seed_override: seed,
            window,
            level,
            config_value: value,
            config_path: PathBuf::from(config_path),
            start: Instant::now(),
            inputs: Default::default(),
            timings: Default::default(),
        })
    }

    /// Deserialize the (overridden) config strictly.
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        let mut value = self.config_value.clone();
        // `out` is shared plumbing, not part of the per-command schema.
        if let Some(map) = value.as_object_mut() {
            map.remove("out");
        }
        serde_json::from_value(value).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Register (and hash) an input path, erroring with the config key name
    /// when it does not exist.
    pub fn input(&self, path: &str, key: &str) -> Result<PathBuf> {
        let p = PathBuf::from(path);
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "input '{key}': path {path:?} does not exist"
            )));
        }
        let hash = fnv_hash_path(&p)?;
        self.inputs.borrow_mut().insert(key.to_string(), format!("{hash:016x}"));
        Ok(p)
    }

    pub fn record_timing(&self, phase: &str, ms: f64) {
        self.timings.borrow_mut().insert(phase.to_string(), ms);
    }

    pub fn time<T>(&self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.record_timing(phase, t0.elapsed().as_secs_f64() * 1e3);
        Ok(out)
    }

    /// Write the manifest (bit-stable) and the timing sidecar (volatile).
    pub fn finish(&self) -> Result<()> {
        let mut inputs = self.inputs.borrow().clone();
        inputs.insert(
            "config".to_string(),
            format!("{:016x}", fnv_hash_path(&self.config_path)?),
        );
        let manifest = serde_json::json!({
            "command": self.command,
            "config": self.config_value,
            "seed_override": self.seed_override,
            "inputs": inputs,
            "versions": {
                "igrog": igrog_version(),
                "igrog-cli": env!("CARGO_PKG_VERSION"),
            },
        });
        std::fs::write(
            self.out.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )?;
        let mut timings = self.timings.borrow().clone();
        timings.insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        std::fs::write(
            self.out.join("timings.json"),
            serde_json::to_string_pretty(&serde_json::json!(timings)).unwrap(),
        )?;
        Ok(())
    }
}

fn igrog_version() -> &'static str {
    // The library crate version travels with this binary's lockfile.
    env!("CARGO_PKG_VERSION")
}

fn apply_override(value: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("override --{path}: {part} is not an object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// FNV-1a over a file, or over every file under a directory (sorted paths).
pub fn fnv_hash_path(path: &Path) -> Result<u64> {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            eat(f.file_name().unwrap().to_string_lossy().as_bytes());
            eat(&std::fs::read(&f)?);
        }
    } else {
        eat(&std::fs::read(path)?);
    }
    Ok(h)
}
