use std::path::Path;

use serde::Serialize;
use tcv2_core::{Error, Result};

use crate::config::ConfigFile;

pub const REPRO_FILE: &str = "repro.toml";

#[derive(Serialize)]
struct Header<'a> {
    version: &'a str,
    command: &'a str,
    seed: Option<u64>,
    argv: Vec<String>,
}

#[derive(Serialize)]
struct Block<'a> {
    repro: Header<'a>,
    config: &'a ConfigFile,
}

/// Writes the effective configuration, seed and build version to `dir`.
pub fn write_repro(dir: &Path, command: &str, seed: Option<u64>, config: &ConfigFile) -> Result<()> {
    let block = Block {
        repro: Header {
            version: env!("TCV2_VERSION"),
            command,
            seed,
            argv: std::env::args().collect(),
        },
        config,
    };
    let text = toml::to_string(&block).map_err(|e| Error::Config(format!("repro block: {e}")))?;
    let path = dir.join(REPRO_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}
