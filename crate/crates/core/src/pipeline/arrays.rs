//! Array files: raw little-endian `f32` payload (`<stem>.bin`) next to a
//! plain-text header (`<stem>.hdr`) recording shape, dtype and role.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use sts_nn::Tensor;

use crate::error::{Result, StsError};

pub const DTYPE: &str = "f32le";

/// Rounds every element to the nearest `f32`, the precision arrays are
/// stored at.
pub fn quantize(t: &Tensor) -> Tensor {
    t.mapv(|v| v as f32 as f64)
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("hdr"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: String,
}

impl ArrayHeader {
    fn render(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!("shape={}\ndtype={}\nrole={}\n", shape.join(","), self.dtype, self.role)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| StsError::ArrayFile {
            path: path.to_path_buf(),
            msg,
        };
        let (mut shape, mut dtype, mut role) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            match k.trim() {
                "shape" => {
                    let dims = if v.trim().is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|d| d.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| bad(format!("bad shape {v:?}: {e}")))?
                    };
                    shape = Some(dims);
                }
                "dtype" => dtype = Some(v.trim().to_string()),
                "role" => role = Some(v.trim().to_string()),
                other => return Err(bad(format!("unknown header key {other:?}"))),
            }
        }
        let header = Self {
            shape: shape.ok_or_else(|| bad("missing shape".into()))?,
            dtype: dtype.ok_or_else(|| bad("missing dtype".into()))?,
            role: role.unwrap_or_default(),
        };
        if header.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
        }
        Ok(header)
    }
}

/// Writes `t` as `<path>.bin` + `<path>.hdr` (any extension on `path` is
/// replaced).
pub fn write_array(path: impl AsRef<Path>, t: &Tensor, role: &str) -> Result<()> {
    let (bin, hdr) = paths(path.as_ref());
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let header = ArrayHeader {
        shape: t.shape().to_vec(),
        dtype: DTYPE.into(),
        role: role.into(),
    };
    fs::write(&bin, bytes).map_err(|e| StsError::io(&bin, e))?;
    fs::write(&hdr, header.render()).map_err(|e| StsError::io(&hdr, e))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<ArrayHeader> {
    let (_, hdr) = paths(path.as_ref());
    let text = fs::read_to_string(&hdr).map_err(|e| StsError::io(&hdr, e))?;
    ArrayHeader::parse(&text, &hdr)
}

/// Reads an array written by [`write_array`], with its role.
pub fn read_array(path: impl AsRef<Path>) -> Result<(Tensor, String)> {
    let header = read_header(path.as_ref())?;
    let (bin, _) = paths(path.as_ref());
    let bytes = fs::read(&bin).map_err(|e| StsError::io(&bin, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(StsError::ArrayFile {
            path: bin,
            msg: format!("expected {} bytes for shape {:?}, found {}", 4 * n, header.shape, bytes.len()),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::from_shape_vec(IxDyn(&header.shape), data).map_err(|e| StsError::ArrayFile {
        path: bin.clone(),
        msg: e.to_string(),
    })?;
    Ok((t, header.role))
}

/// Reads an array and checks its role.
pub fn read_array_as(path: impl AsRef<Path>, role: &str) -> Result<Tensor> {
    let (t, found) = read_array(path.as_ref())?;
    if found != role {
        return Err(StsError::ArrayFile {
            path: path.as_ref().to_path_buf(),
            msg: format!("expected role {role:?}, found {found:?}"),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_rejects_garbage() {
        let p = Path::new("x.hdr");
        assert!(ArrayHeader::parse("shape=1,2\ndtype=f64\n", p).is_err());
        assert!(ArrayHeader::parse("dtype=f32le\n", p).is_err());
        assert!(ArrayHeader::parse("shape=a\ndtype=f32le\n", p).is_err());
        assert!(ArrayHeader::parse("nonsense\n", p).is_err());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        write_array(&p, &Tensor::zeros(IxDyn(&[2, 3])), "x").unwrap();
        fs::write(p.with_extension("bin"), [0u8; 5]).unwrap();
        assert!(matches!(read_array(&p), Err(StsError::ArrayFile { .. })));
        assert!(read_array_as(dir.path().join("missing"), "x").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_equals_quantized(vals in prop::collection::vec(-1e6f64..1e6, 1..40), role in "[a-z_]{0,8}") {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("arr");
            let t = Tensor::from_shape_vec(IxDyn(&[vals.len()]), vals).unwrap();
            write_array(&p, &t, &role).unwrap();
            let (back, r) = read_array(&p).unwrap();
            prop_assert_eq!(r, role);
            prop_assert_eq!(&back, &quantize(&t));
            prop_assert_eq!(quantize(&back), back);
        }
    }
}
