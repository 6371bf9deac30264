//! CSV and JSON artifacts plus a hashed manifest.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), files are
//! UTF-8 with LF line endings. Schemas:
//!
//! | file            | header                                   |
//! |-----------------|------------------------------------------|
//! | trace.csv       | `iter,loss,grad_norm,step_norm,dir_smooth` |
//! | eval.csv        | `iter,eval_loss`                         |
//! | noise.csv       | `sample_idx,noise_norm`                  |
//! | qq.csv          | `gauss_q,emp_q`                          |
//! | curvature.csv   | `iter,param_idx,diag`                    |
//! | smoothness.csv  | `iter,grad_norm,dir_smooth`              |
//! | summary.csv     | `iter,mean_log_loss,std_log_loss`        |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::probes::{CurvatureReport, NoiseReport, SmoothnessTrace};

use super::summary::Summary;
use super::train::TrainTrace;

pub const MANIFEST: &str = "manifest.json";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub target: String,
    pub files: Vec<ManifestEntry>,
}

/// Writes files below one directory and remembers their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[ManifestEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(ManifestEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn csv(&mut self, rel: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
        let mut text = String::from(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row);
            text.push('\n');
        }
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn trace(&mut self, dir: &str, trace: &TrainTrace) -> Result<()> {
        self.csv(
            &format!("{dir}/trace.csv"),
            "iter,loss,grad_norm,step_norm,dir_smooth",
            trace.rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{}",
                    r.iter,
                    fmt_f64(r.loss),
                    fmt_f64(r.grad_norm),
                    fmt_f64(r.step_norm),
                    r.dir_smooth.map(fmt_f64).unwrap_or_default()
                )
            }),
        )?;
        if !trace.evals.is_empty() {
            self.csv(
                &format!("{dir}/eval.csv"),
                "iter,eval_loss",
                trace.evals.iter().map(|e| format!("{},{}", e.iter, fmt_f64(e.eval_loss))),
            )?;
        }
        if !trace.curvature.is_empty() {
            self.curvature(&format!("{dir}/curvature.csv"), &trace.curvature)?;
        }
        if !trace.smoothness.records.is_empty() {
            self.smoothness(&format!("{dir}/smoothness.csv"), &trace.smoothness)?;
        }
        for snap in &trace.noise {
            self.noise(&format!("{dir}/noise_iter{}", snap.iter), &snap.report)?;
        }
        Ok(())
    }

    /// `noise.csv` and `qq.csv` inside `dir`.
    pub fn noise(&mut self, dir: &str, report: &NoiseReport) -> Result<()> {
        self.csv(
            &format!("{dir}/noise.csv"),
            "sample_idx,noise_norm",
            report.noise_norms.iter().enumerate().map(|(i, x)| format!("{i},{}", fmt_f64(*x))),
        )?;
        self.csv(
            &format!("{dir}/qq.csv"),
            "gauss_q,emp_q",
            report.qq_pairs.iter().map(|(g, e)| format!("{},{}", fmt_f64(*g), fmt_f64(*e))),
        )
    }

    pub fn curvature(&mut self, rel: &str, reports: &[CurvatureReport]) -> Result<()> {
        self.csv(
            rel,
            "iter,param_idx,diag",
            reports.iter().flat_map(|c| {
                c.hessian_diag
                    .iter()
                    .enumerate()
                    .map(move |(i, x)| format!("{},{i},{}", c.iteration, fmt_f64(*x)))
            }),
        )
    }

    pub fn smoothness(&mut self, rel: &str, trace: &SmoothnessTrace) -> Result<()> {
        self.csv(
            rel,
            "iter,grad_norm,dir_smooth",
            trace.records.iter().map(|r| {
                format!(
                    "{},{},{}",
                    r.iteration,
                    fmt_f64(r.grad_norm),
                    fmt_f64(r.directional_smoothness)
                )
            }),
        )
    }

    pub fn summary_curve(&mut self, rel: &str, summary: &Summary) -> Result<()> {
        self.csv(
            rel,
            "iter,mean_log_loss,std_log_loss",
            summary
                .iterations
                .iter()
                .zip(&summary.mean_log_loss)
                .zip(&summary.std_log_loss)
                .map(|((i, m), s)| format!("{i},{},{}", fmt_f64(*m), fmt_f64(*s))),
        )
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(mut self, target: &str) -> Result<Manifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            target: target.to_string(),
            files: self.files.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5e17] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
