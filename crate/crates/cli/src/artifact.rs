//! Output files: JSONL artifacts open with a header record, binary files
//! get a `.manifest.json` sidecar carrying the same header and a digest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TOOL: &str = "factlink";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Header {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            seed: config.seed,
        }
    }
}

#[derive(Serialize)]
struct HeaderRecord<'a> {
    header: &'a Header,
}

#[derive(Serialize)]
struct Manifest<'a> {
    header: &'a Header,
    file: &'a str,
    bytes: usize,
    sha256: String,
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Path {
        path: path.to_owned(),
        source,
    })
}

/// Runs a core reader over `path`, attaching the path to its errors.
pub fn read_with<T>(path: &Path, f: impl FnOnce(BufReader<File>) -> factlink_core::Result<T>) -> CliResult<T> {
    f(open(path)?).map_err(|source| CliError::Data {
        path: path.to_owned(),
        source,
    })
}

/// Artifact writer bound to one output directory and header.
pub struct Artifacts {
    dir: PathBuf,
    header: Header,
}

impl Artifacts {
    pub fn new(dir: &Path, header: Header) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Path {
            path: dir.to_owned(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_owned(),
            header,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn io(&self, name: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
        let path = self.path(name);
        move |source| CliError::Path {
            path: path.clone(),
            source,
        }
    }

    /// Writes `name` as header line plus whatever `body` emits.
    pub fn jsonl(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> factlink_core::Result<()>,
    ) -> CliResult<PathBuf> {
        let path = self.path(name);
        let file = File::create(&path).map_err(self.io(name))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &HeaderRecord { header: &self.header }).map_err(factlink_core::Error::from)?;
        w.write_all(b"\n").map_err(self.io(name))?;
        body(&mut w)?;
        w.flush().map_err(self.io(name))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Writes raw bytes and their manifest.
    pub fn binary(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(self.io(name))?;
        let manifest = Manifest {
            header: &self.header,
            file: name,
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        };
        let manifest_name = format!("{name}.manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(factlink_core::Error::from)?;
        text.push('\n');
        std::fs::write(self.path(&manifest_name), text).map_err(self.io(&manifest_name))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}
