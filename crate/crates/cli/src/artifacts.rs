//! Output directory handling: every artifact is written through [`OutDir`],
//! which keeps the SHA-256 of each file for the manifest.
//!
//! Tables and plot data use a fixed 17-significant-digit format and are
//! written in a fixed order, so two runs of the same configuration produce
//! byte-identical CSV and TSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vanishcost_core::costlab::{CostEstimate, FitResult, SweepRow, TrendVerdict};
use vanishcost_core::io::fmt17;

use crate::error::{CliError, CliResult};

pub const CSV_HEADER: &str = "epsilon,T,N,M,K,method,iterations,residual,flag";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        let hash = sha256_hex(bytes);
        match self.written.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = hash,
            None => self.written.push((name.to_string(), hash)),
        }
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        self.write(name, text.as_bytes())
    }

    /// Files written so far with their hashes, in write order.
    pub fn written(&self) -> &[(String, String)] {
        &self.written
    }
}

/// One row of the cost table. `k` is None when the row failed; the failure
/// text then goes into the flag column.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub epsilon: f64,
    pub t_end: f64,
    pub cells: usize,
    pub steps: usize,
    pub k: Option<f64>,
    pub method: String,
    pub iterations: usize,
    pub residual: f64,
    pub flags: Vec<String>,
}

impl CostRow {
    pub fn from_estimate(epsilon: f64, t_end: f64, cells: usize, est: &CostEstimate) -> Self {
        CostRow {
            epsilon,
            t_end,
            cells,
            steps: est.steps,
            k: Some(est.k),
            method: est.method.as_str().to_string(),
            iterations: est.iterations,
            residual: est.residual,
            flags: est.flags.clone(),
        }
    }

    pub fn from_sweep(row: &SweepRow) -> Self {
        match &row.outcome {
            Ok(est) => Self::from_estimate(row.epsilon, row.t_end, row.cells, est),
            Err(msg) => CostRow {
                epsilon: row.epsilon,
                t_end: row.t_end,
                cells: row.cells,
                steps: row.steps,
                k: None,
                method: "none".into(),
                iterations: 0,
                residual: f64::NAN,
                flags: vec![format!("failed: {msg}")],
            },
        }
    }

    pub fn flag_text(&self) -> String {
        if self.flags.is_empty() {
            return "ok".into();
        }
        // keep the column parseable: no commas or newlines inside a field
        self.flags.join("; ").replace([',', '\n'], " ")
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt17(self.epsilon),
            fmt17(self.t_end),
            self.cells,
            self.steps,
            self.k.map(fmt17).unwrap_or_else(|| "nan".into()),
            self.method,
            self.iterations,
            fmt17(self.residual),
            self.flag_text()
        )
    }
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Two-column plot data `epsilon  K`.
pub fn k_vs_eps_tsv(rows: &[CostRow]) -> String {
    let mut s = String::from("epsilon\tK\n");
    for r in rows {
        if let Some(k) = r.k {
            let _ = writeln!(s, "{}\t{}", fmt17(r.epsilon), fmt17(k));
        }
    }
    s
}

/// Plot data `1/epsilon  ln K`. Rows with K ≤ 0 have no logarithm; they are
/// dropped and counted.
pub fn logk_vs_inv_eps_tsv(rows: &[CostRow]) -> (String, usize) {
    let mut s = String::from("inv_epsilon\tlnK\n");
    let mut dropped = 0;
    for r in rows {
        match r.k {
            Some(k) if k > 0.0 => {
                let _ = writeln!(s, "{}\t{}", fmt17(1.0 / r.epsilon), fmt17(k.ln()));
            }
            _ => dropped += 1,
        }
    }
    (s, dropped)
}

pub fn fit_text(fit: &FitResult, verdict: TrendVerdict) -> String {
    format!(
        "slope={} intercept={} r2={} verdict={}\n",
        fmt17(fit.slope),
        fmt17(fit.intercept),
        fit.r2.map(fmt17).unwrap_or_else(|| "undefined".into()),
        verdict.as_str()
    )
}

/// Key/value lines `key=value`, one per entry, in the given order.
pub fn kv_text(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

pub struct ManifestInfo<'a> {
    pub command: &'a str,
    pub config_text: &'a str,
    pub seed: u64,
    pub workers: Option<usize>,
    pub wall_seconds: f64,
    pub row_flags: &'a [(String, String)],
}

/// manifest.txt: versions, run settings, hashes of the configuration and of
/// every artifact, and the per-row flags.
pub fn manifest_text(out: &OutDir, info: &ManifestInfo<'_>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "command={}", info.command);
    let _ = writeln!(s, "cli_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "core_version={}", vanishcost_core::VERSION);
    let _ = writeln!(s, "seed={}", info.seed);
    let _ = writeln!(s, "workers={}", info.workers.map(|w| w.to_string()).unwrap_or_else(|| "default".into()));
    let _ = writeln!(s, "parallel={}", vanishcost_core::Execution::default().is_parallel());
    let _ = writeln!(s, "wall_clock_seconds={:.3}", info.wall_seconds);
    let _ = writeln!(s, "config_sha256={}", sha256_hex(info.config_text.as_bytes()));
    for (name, hash) in out.written() {
        let _ = writeln!(s, "artifact {name} sha256={hash}");
    }
    for (row, flag) in info.row_flags {
        let _ = writeln!(s, "flag {row}: {flag}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_the_empty_string() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn csv_row_keeps_commas_out_of_the_flag_column() {
        let row = CostRow {
            epsilon: 0.1,
            t_end: 2.0,
            cells: 57,
            steps: 400,
            k: Some(0.5),
            method: "dense".into(),
            iterations: 1,
            residual: 0.0,
            flags: vec!["a, b".into(), "c".into()],
        };
        let line = row.csv_line();
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
        assert!(line.starts_with("1.0000000000000001e-1,2.0000000000000000e0,57,400,5.0000000000000000e-1,dense,1,"));
        assert!(line.ends_with("a  b; c"));
    }

    #[test]
    fn nonpositive_k_rows_are_dropped_from_the_log_plot() {
        let mut row = CostRow {
            epsilon: 0.5,
            t_end: 1.0,
            cells: 10,
            steps: 10,
            k: Some(2.0),
            method: "dense".into(),
            iterations: 1,
            residual: 0.0,
            flags: vec![],
        };
        let mut zero = row.clone();
        zero.k = Some(0.0);
        let (text, dropped) = logk_vs_inv_eps_tsv(&[row.clone(), zero]);
        assert_eq!(dropped, 1);
        assert_eq!(text.lines().count(), 2);
        row.k = None;
        assert_eq!(k_vs_eps_tsv(&[row]).lines().count(), 1);
    }
}
