//! Artifact persistence: space elements as raw little-endian binaries
//! with JSON sidecars, JSON documents for weights and configs, and a
//! strict CSV dialect for result tables.
//!
//! The formats favor diff-able, byte-stable output: JSON is pretty-printed
//! with a trailing newline, floats in CSV use the shortest round-trip
//! decimal form, and not-a-number is always spelled `nan`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::ParamMap;
use crate::tensor::{Space, SpaceElement};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementSidecar {
    shape: Vec<usize>,
    space_id: String,
    count: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes an element as flat little-endian doubles at `path` plus a JSON
/// sidecar (same stem, `.json` extension) recording shape and space id.
pub fn save_element(path: &Path, elem: &SpaceElement) -> Result<()> {
    let mut bytes = Vec::with_capacity(elem.len() * 8);
    for v in elem.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = ElementSidecar {
        shape: elem.shape().to_vec(),
        space_id: elem.space_id().to_string(),
        count: elem.len(),
    };
    save_json(&sidecar_path(path), &sidecar)
}

/// Reads an element written by [`save_element`], reconstructing its space
/// from the sidecar.
pub fn load_element(path: &Path) -> Result<SpaceElement> {
    let sidecar: ElementSidecar = load_json(&sidecar_path(path))?;
    let expected: usize = sidecar.shape.iter().product();
    if sidecar.count != expected {
        return Err(Error::InvalidShape(format!(
            "sidecar count {} disagrees with shape product {expected}",
            sidecar.count
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != sidecar.count * 8 {
        return Err(Error::InvalidShape(format!(
            "binary holds {} bytes, sidecar promises {}",
            bytes.len(),
            sidecar.count * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    let space = Space::new(sidecar.shape, sidecar.space_id)?;
    SpaceElement::new(data, space)
}

/// Serializes a value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads a JSON document.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// A trained (or preset) raw vector together with the map that decodes it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub map: ParamMap,
    pub raw: Vec<f64>,
}

impl WeightsFile {
    /// Checks that the raw vector has the length the map expects.
    pub fn validate(&self) -> Result<()> {
        if self.raw.len() != self.map.raw_len() {
            return Err(Error::InvalidConfig(format!(
                "weights hold {} raw values, map needs {}",
                self.raw.len(),
                self.map.raw_len()
            )));
        }
        Ok(())
    }

    /// Writes the weights as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        save_json(path, self)
    }

    /// Reads and validates weights JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let w: WeightsFile = load_json(path)?;
        w.validate()?;
        Ok(w)
    }
}

/// Renders a float for CSV: shortest round-trip decimal, with `nan`,
/// `inf`, and `-inf` spelled exactly so.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Writes a CSV file with the given header; every row must have the
/// header's width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Csv(format!(
                "row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(Error::from)?;
    writer.write_record(header).map_err(Error::from)?;
    for row in rows {
        writer.write_record(row).map_err(Error::from)?;
    }
    writer.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

/// Reads a CSV file strictly: a header must be present, every row must
/// match its width, and not-a-number fields must be spelled `nan`.
pub fn read_csv_strict(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(Error::from)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(Error::from)?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() {
        return Err(Error::Csv("missing header".into()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(Error::from)?;
        let row: Vec<String> = record.iter().map(|s| s.to_string()).collect();
        for field in &row {
            if field.eq_ignore_ascii_case("nan") && field != "nan" {
                return Err(Error::Csv(format!(
                    "not-a-number must be spelled \"nan\", found \"{field}\""
                )));
            }
        }
        rows.push(row);
    }
    Ok((header, rows))
}
