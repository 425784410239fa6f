//! Binary tensor container used for packed video frames and precomputed
//! modality features: a magic tag, a JSON header (kind, video id, modality,
//! shape, dtype) and little-endian payload bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VemdError};

const MAGIC: &[u8; 8] = b"VEMDBIN1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorHeader {
    pub kind: String,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    /// Bytes holding values scaled by 1/255 into [0,1].
    U8,
}

pub struct TensorFile {
    pub header: TensorHeader,
    pub data: ArrayD<f64>,
}

/// Write values (given in f64) at the requested storage dtype.
pub fn write_tensor(
    path: &Path,
    kind: &str,
    video_id: &str,
    modality: Option<&str>,
    data: &ArrayD<f64>,
    dtype: Dtype,
) -> Result<()> {
    let header = TensorHeader {
        kind: kind.to_string(),
        video_id: video_id.to_string(),
        modality: modality.map(|m| m.to_string()),
        shape: data.shape().to_vec(),
        dtype,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let std_layout = data.as_standard_layout();
    match dtype {
        Dtype::F64 => {
            for v in std_layout.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in std_layout.iter() {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Dtype::U8 => {
            let bytes: Vec<u8> = std_layout
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            f.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorFile> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VemdError::Format(format!(
            "{}: not a tensor container",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: TensorHeader = serde_json::from_slice(&header_json)?;
    let n: usize = header.shape.iter().product();
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => {
            expect_len(&raw, n * 8, path)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        Dtype::F32 => {
            expect_len(&raw, n * 4, path)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        Dtype::U8 => {
            expect_len(&raw, n, path)?;
            raw.iter().map(|&b| b as f64 / 255.0).collect()
        }
    };
    let data = ArrayD::from_shape_vec(IxDyn(&header.shape), data)
        .map_err(|e| VemdError::Format(format!("{}: {e}", path.display())))?;
    Ok(TensorFile { header, data })
}

fn expect_len(raw: &[u8], want: usize, path: &Path) -> Result<()> {
    if raw.len() != want {
        return Err(VemdError::Format(format!(
            "{}: payload is {} bytes, expected {want}",
            path.display(),
            raw.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let data = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64 * 0.123456789
        });
        write_tensor(&path, "test", "v0", Some("acoustic"), &data, Dtype::F64).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.header.shape, vec![2, 3, 4]);
        assert_eq!(back.header.modality.as_deref(), Some("acoustic"));
        assert_eq!(back.data, data);
    }

    #[test]
    fn u8_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let data = ndarray::arr1(&[0.0, 0.5, 1.0]).into_dyn();
        write_tensor(&path, "frames", "v0", None, &data, Dtype::U8).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!((back.data[[1]] - 128.0 / 255.0).abs() < 1e-12);
    }
}
