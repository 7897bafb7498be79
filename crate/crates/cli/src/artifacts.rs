//! Artifact tree layout and file helpers.
//!
//! ```text
//! OUT/
//!   manifest.txt
//!   config.txt                     effective configuration
//!   phantom/truth.dtn labels.dtn mu_map.dtn regions.csv
//!   tune/g.dtn gamma.dtn scale.csv tuning realization
//!   sweep/<method>.csv tuning.csv
//!   r000/g.dtn gamma.dtn scale.csv
//!   r000/recon/<method>.dtn        activity units
//!   r000/trace/<method>.csv
//!   r000/metrics.csv frames.csv [lv.csv] [profiles.csv]
//!   r000/maps/<method>_<param>.dtn r000/kinetics.csv
//!   report.csv paired.csv [report_kinetics.csv]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fppg::DynTensor;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn phantom(&self, file: &str) -> PathBuf {
        self.root.join("phantom").join(file)
    }

    pub fn tune(&self) -> PathBuf {
        self.root.join("tune")
    }

    pub fn realization(&self, r: usize) -> PathBuf {
        self.root.join(format!("r{r:03}"))
    }

    pub fn sweep(&self, method: &str) -> PathBuf {
        self.root.join("sweep").join(format!("{method}.csv"))
    }

    pub fn tuning(&self) -> PathBuf {
        self.root.join("sweep").join("tuning.csv")
    }

    pub fn recon(&self, r: usize, method: &str) -> PathBuf {
        self.realization(r).join("recon").join(format!("{method}.dtn"))
    }

    pub fn trace(&self, r: usize, method: &str) -> PathBuf {
        self.realization(r).join("trace").join(format!("{method}.csv"))
    }

    pub fn map(&self, r: usize, method: &str, param: &str) -> PathBuf {
        self.realization(r)
            .join("maps")
            .join(format!("{method}_{param}.dtn"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Csv {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// Writes through a temporary sibling and renames, so a file is either
/// complete or absent.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    write(&mut file)
        .and_then(|_| file.flush())
        .map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn save_tensor(path: &Path, t: &DynTensor) -> Result<()> {
    write_atomic(path, |f| {
        fppg::io::write_dtn(std::io::BufWriter::new(f), t).map_err(|e| match e {
            fppg::Error::Io(io) => io,
            other => std::io::Error::other(other.to_string()),
        })
    })
}

/// Loads a tensor, reporting a missing file as produced by `stage`.
pub fn load_tensor(path: &Path, stage: &'static str) -> Result<DynTensor> {
    if !path.exists() {
        return Err(CliError::MissingInput {
            path: path.to_owned(),
            stage,
        });
    }
    fppg::io::load(path).map_err(|e| CliError::numerical(path.display().to_string(), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |f| f.write_all(text.as_bytes()))
}

/// A CSV table held in memory: header plus string rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header).map_err(|e| csv_err(path, e))?;
            for r in &self.rows {
                w.write_record(r).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        write_atomic(path, |f| f.write_all(&buf))
    }

    pub fn load(path: &Path, stage: &'static str) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingInput {
                path: path.to_owned(),
                stage,
            });
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { header, rows })
    }

    /// Column `name` of every row parsed as `f64` (empty cells become NaN).
    pub fn floats(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let c = self
            .column(name)
            .ok_or_else(|| csv_err(path, format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| {
                if r[c].is_empty() {
                    return Ok(f64::NAN);
                }
                r[c].parse::<f64>()
                    .map_err(|_| csv_err(path, format!("'{}' in column '{name}' is not a number", r[c])))
            })
            .collect()
    }
}

/// Shortest round-trip formatting; NaN becomes an empty cell.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}
