use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use hyperloc::io::write_text;
use hyperloc::{Error, Result};
use serde_json::{json, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes every output file of one run. CSV files open with a single
/// `#` provenance line (the only line carrying a timestamp); the bodies
/// below it depend on nothing but config and seed.
pub struct Reporter {
    pub dir: PathBuf,
    pub command: &'static str,
    pub hash: String,
    pub seed: u64,
    stamp: u64,
    pub files: Vec<String>,
}

impl Reporter {
    pub fn new(dir: PathBuf, command: &'static str, hash: String, seed: u64) -> Self {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Reporter {
            dir,
            command,
            hash,
            seed,
            stamp,
            files: Vec::new(),
        }
    }

    pub fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let head = format!(
            "# hyperloc {VERSION} {} config-sha256 {} seed {} generated {}\n",
            self.command, self.hash, self.seed, self.stamp
        );
        write_text(&self.dir.join(name), &(head + body))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// report.json: provenance, the command's results, and the error record
    /// if the command failed.
    pub fn finish(&self, results: Value, error: Option<&Error>) -> Result<()> {
        let mut doc = json!({
            "tool": "hyperloc",
            "version": VERSION,
            "command": self.command,
            "config_sha256": self.hash,
            "seed": self.seed,
            "generated": self.stamp,
            "files": self.files,
            "results": results,
        });
        if let Some(e) = error {
            doc["error"] = error_record(e);
        }
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
        write_text(&self.dir.join("report.json"), &(text + "\n"))
    }
}

pub fn error_record(e: &Error) -> Value {
    let kind = match e {
        Error::Validation { .. } => "validation",
        Error::Numerical { .. } => "numerical",
        Error::DomainEscape { .. } => "domain_escape",
        Error::Pole { .. } => "pole",
        Error::ResolventPole { .. } => "resolvent_pole",
        Error::NearLattice { .. } => "near_lattice",
        Error::Fold { .. } => "fold",
        Error::BadSet { .. } => "bad_set",
        Error::Io(_) => "io",
    };
    let mut rec = json!({ "kind": kind, "message": e.to_string() });
    match e {
        Error::Validation { field, .. } => rec["field"] = json!(field),
        Error::Numerical { op, residual, .. } => {
            rec["op"] = json!(op);
            rec["residual"] = json!(residual);
        }
        _ => {}
    }
    rec
}
