//! Run directory layout and file helpers.

use crate::error::{CliError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// `config.json`, `record.json`, `metrics.csv`, `timing.json` and
/// `checkpoints/<name>/` under one directory.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    pub path: PathBuf,
}

impl RunDirectory {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(RunDirectory {
            path: path.to_path_buf(),
        })
    }

    pub fn config(&self) -> PathBuf {
        self.path.join("config.json")
    }

    pub fn record(&self) -> PathBuf {
        self.path.join("record.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.path.join("timing.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(name)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders a number with 9 significant digits, trimming trailing zeros.
pub fn fmt_number(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

/// Header plus rows; every cell is already rendered.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn opt_number(x: Option<f64>) -> String {
    x.map(fmt_number).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_number(0.0), "0");
        assert_eq!(fmt_number(1.0), "1");
        assert_eq!(fmt_number(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_number(123456.7891234), "123456.789");
        assert_eq!(fmt_number(-1.5e-7), "-1.5e-7");
        assert_eq!(fmt_number(2e-5), "0.00002");
        assert_eq!(fmt_number(1.23456789123e12), "1.23456789e12");
    }
}
