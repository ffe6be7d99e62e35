//! Output files of a run: one directory, names derived from a common stem.

use crate::error::CliError;
use std::fs;
use std::path::{Path, PathBuf};
use wavelab::peakon::fmt17;

pub struct Outputs {
    dir: PathBuf,
    stem: String,
    pub written: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(dir: &Path, stem: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), stem: stem.to_string(), written: Vec::new() })
    }

    /// `<dir>/<stem><suffix>`.
    pub fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    pub fn text(&mut self, suffix: &str, body: &str) -> Result<PathBuf, CliError> {
        let p = self.path(suffix);
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn bytes(&mut self, suffix: &str, body: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(suffix);
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn csv(&mut self, suffix: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let body = w.into_inner().map_err(|e| CliError::io(self.path(suffix), e.into_error()))?;
        self.bytes(suffix, &body)
    }
}

/// 17 significant digits; blank for non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        fmt17(v)
    } else {
        String::new()
    }
}
