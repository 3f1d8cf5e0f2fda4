//! Configuration, persistence and report emission.

pub mod checkpoint;
pub mod config;
pub mod pipeline;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::MetricRow;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("output path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV with header `<key>,psnr,ssim,percep,toy_fid`; values use Rust's
/// shortest round-trip float formatting.
pub fn report_csv(key_name: &str, rows: &[MetricRow]) -> String {
    let mut s = format!("{key_name},psnr,ssim,percep,toy_fid\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.key, r.psnr, r.ssim, r.percep, r.toy_fid
        ));
    }
    s
}

pub fn write_report(path: &Path, key_name: &str, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, report_csv(key_name, rows).as_bytes())
}

/// Parses a report written by [`report_csv`].
pub fn read_report(text: &str) -> Result<(String, Vec<MetricRow>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptySet)?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 5 || cols[1..] != ["psnr", "ssim", "percep", "toy_fid"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    message: e.to_string(),
                })?;
            if v.len() != 5 {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("expected 5 columns, got {}", v.len()),
                });
            }
            Ok(MetricRow {
                key: v[0],
                psnr: v[1],
                ssim: v[2],
                percep: v[3],
                toy_fid: v[4],
            })
        })
        .collect::<Result<_>>()?;
    Ok((cols[0].to_string(), rows))
}

/// Provenance record written beside every CLI output.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub code_version: String,
    pub outputs: Vec<String>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, text.as_bytes())
}
