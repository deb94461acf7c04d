//! Tensor exchange: a JSON manifest next to a raw little-endian `f64`
//! payload, plus 17-significant-digit CSV for small matrices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

pub const DTYPE_F64: &str = "f64";
pub const LITTLE_ENDIAN: &str = "little";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub byte_order: String,
    /// Payload file, relative to the manifest. Defaults to `<name>.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

impl TensorManifest {
    pub fn for_mat(name: &str, m: &Mat) -> Self {
        Self {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            dtype: DTYPE_F64.into(),
            byte_order: LITTLE_ENDIAN.into(),
            file: Some(format!("{name}.bin")),
            layer: None,
            head: None,
        }
    }

    pub fn payload_file(&self) -> String {
        self.file
            .clone()
            .unwrap_or_else(|| format!("{}.bin", self.name))
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// reader never observes a partially written file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_payload(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a payload against its manifest, checking every manifest field.
pub fn decode_payload(manifest: &TensorManifest, bytes: &[u8]) -> Result<Mat> {
    if manifest.dtype != DTYPE_F64 {
        return Err(Error::Ingestion {
            field: "dtype".into(),
            detail: format!("expected \"f64\", got {:?}", manifest.dtype),
        });
    }
    if manifest.byte_order != LITTLE_ENDIAN {
        return Err(Error::Ingestion {
            field: "byte_order".into(),
            detail: format!("expected \"little\", got {:?}", manifest.byte_order),
        });
    }
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Ingestion {
            field: "file".into(),
            detail: format!(
                "payload of {} bytes is not a whole number of f64",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / 8;
    if n != manifest.rows * manifest.cols {
        return Err(Error::Ingestion {
            field: "rows/cols".into(),
            detail: format!(
                "{} x {} = {} values declared, payload holds {n}",
                manifest.rows,
                manifest.cols,
                manifest.rows * manifest.cols
            ),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let m = Mat::new(manifest.rows, manifest.cols, data)?;
    if !m.is_finite() {
        return Err(Error::Ingestion {
            field: manifest.name.clone(),
            detail: "payload contains non-finite values".into(),
        });
    }
    Ok(m)
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest path.
pub fn write_tensor(dir: &Path, name: &str, m: &Mat) -> Result<PathBuf> {
    let manifest = TensorManifest::for_mat(name, m);
    write_atomic(&dir.join(manifest.payload_file()), &encode_payload(m))?;
    let path = dir.join(format!("{name}.json"));
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn read_payload(base: &Path, manifest: &TensorManifest) -> Result<Mat> {
    let payload = base.join(manifest.payload_file());
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    decode_payload(manifest, &bytes)
}

pub fn read_tensor(manifest_path: &Path) -> Result<(TensorManifest, Mat)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: TensorManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let m = read_payload(base, &manifest)?;
    Ok((manifest, m))
}

/// CSV with 17 significant digits, enough to round-trip every `f64`.
pub fn mat_to_csv(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn mat_from_csv(text: &str) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion {
            field: format!("row {i}"),
            detail: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Ingestion {
                    field: format!("row {i}"),
                    detail: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Mat::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use proptest::prelude::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = RngStream::new(4, 0).normal_mat(5, 3, 1e3);
        let path = write_tensor(dir.path(), "W", &m).unwrap();
        let (manifest, back) = read_tensor(&path).unwrap();
        assert_eq!(manifest.rows, 5);
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn corrupt_payload_names_field() {
        let m = Mat::zeros(2, 3);
        let mut manifest = TensorManifest::for_mat("x", &m);
        manifest.rows = 3;
        let err = decode_payload(&manifest, &encode_payload(&m)).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref field, .. } if field == "rows/cols"));

        let mut manifest = TensorManifest::for_mat("x", &m);
        manifest.byte_order = "big".into();
        let err = decode_payload(&manifest, &encode_payload(&m)).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref field, .. } if field == "byte_order"));

        let mut manifest = TensorManifest::for_mat("x", &m);
        manifest.dtype = "f32".into();
        let err = decode_payload(&manifest, &encode_payload(&m)).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref field, .. } if field == "dtype"));
    }

    proptest! {
        #[test]
        fn csv_roundtrip(vals in proptest::collection::vec(-1e300f64..1e300, 6)) {
            let m = Mat::new(2, 3, vals).unwrap();
            let back = mat_from_csv(&mat_to_csv(&m)).unwrap();
            prop_assert_eq!(back.data(), m.data());
        }
    }
}
