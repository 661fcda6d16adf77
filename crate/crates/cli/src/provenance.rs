//! Provenance lines recorded in output metadata, and the sidecar log.
//!
//! A line reads
//! `mmer <args> | params k=80 alpha=1 | inputs a.mtc=sha256:<hex> ...`.
//! Output metadata keeps the primary input's history under `provenance`,
//! one line per step, with the new line last. Wall-clock time is written
//! only to `<output>.log` so that primary outputs stay byte-identical
//! across reruns.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const META_KEY: &str = "provenance";

#[derive(Debug, Clone)]
pub struct Provenance {
    argv: Vec<String>,
    params: Vec<(String, String)>,
    inputs: Vec<(PathBuf, String)>,
    history: Option<String>,
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Provenance {
    pub fn new(argv: &[String]) -> Self {
        Self {
            argv: argv.to_vec(),
            params: Vec::new(),
            inputs: Vec::new(),
            history: None,
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) -> &mut Self {
        self.inputs.push((path.to_path_buf(), sha256_hex(bytes)));
        self
    }

    /// Carries over the provenance of the primary input.
    pub fn inherit(&mut self, meta: &BTreeMap<String, String>) -> &mut Self {
        if self.history.is_none() {
            self.history = meta.get(META_KEY).cloned();
        }
        self
    }

    pub fn line(&self) -> String {
        let mut line = self.argv.join(" ");
        if !self.params.is_empty() {
            let p: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            line.push_str(" | params ");
            line.push_str(&p.join(" "));
        }
        if !self.inputs.is_empty() {
            let i: Vec<String> = self
                .inputs
                .iter()
                .map(|(p, d)| format!("{}=sha256:{d}", p.display()))
                .collect();
            line.push_str(" | inputs ");
            line.push_str(&i.join(" "));
        }
        line
    }

    pub fn stamp(&self, meta: &mut BTreeMap<String, String>) {
        let value = match &self.history {
            Some(h) => format!("{h}\n{}", self.line()),
            None => self.line(),
        };
        meta.insert(META_KEY.into(), value);
    }

    pub fn log(&self, output: &Path) -> CliResult<()> {
        let mut name = output.as_os_str().to_owned();
        name.push(".log");
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&name)
            .map_err(|e| CliError::Io(format!("{}: {e}", Path::new(&name).display())))?;
        writeln!(f, "unix_time={secs} {}", self.line()).map_err(|e| CliError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let mut p = Provenance::new(&["mmer".into(), "trim".into(), "t.mtc".into()]);
        p.param("k", 80).input(Path::new("t.mtc"), b"abc");
        assert_eq!(
            p.line(),
            "mmer trim t.mtc | params k=80 | inputs \
             t.mtc=sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn history_is_kept() {
        let mut meta = BTreeMap::from([(META_KEY.to_string(), "mmer extract".to_string())]);
        let mut p = Provenance::new(&["mmer".into(), "trim".into()]);
        p.inherit(&meta);
        p.stamp(&mut meta);
        assert_eq!(meta[META_KEY], "mmer extract\nmmer trim");
    }
}
