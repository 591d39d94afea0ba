use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::keys::ClassLabel;
use crate::nn::Mat;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

/// One decoded IDX file. Raw bytes are kept so the file can be re-encoded
/// exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images { n: usize, rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset: bytes.len(), msg: format!("truncated header, need 4 bytes at offset {offset}") })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let n_dims = match magic {
        MAGIC_LABELS => 1,
        MAGIC_IMAGES => 3,
        other => {
            return Err(Error::Format { offset: 0, msg: format!("unsupported magic number {other:#010x}") });
        }
    };
    let dims = (0..n_dims).map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * n_dims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: {} of {expected} bytes present", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format { offset: header + expected, msg: "trailing bytes after payload".into() });
    }
    Ok(match n_dims {
        1 => IdxData::Labels(payload.to_vec()),
        _ => IdxData::Images { n: dims[0], rows: dims[1], cols: dims[2], pixels: payload.to_vec() },
    })
}

impl IdxData {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            IdxData::Labels(l) => {
                out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
                out.extend_from_slice(&(l.len() as u32).to_be_bytes());
                out.extend_from_slice(l);
            }
            IdxData::Images { n, rows, cols, pixels } => {
                out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
                for d in [n, rows, cols] {
                    out.extend_from_slice(&(*d as u32).to_be_bytes());
                }
                out.extend_from_slice(pixels);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::Labels(l) => l.len(),
            IdxData::Images { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images flattened row-major to `rows * cols` features scaled by 1/255.
    pub fn to_samples(&self) -> Result<Mat> {
        match self {
            IdxData::Images { n, rows, cols, pixels } => {
                let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
                Ok(Mat::from_shape_vec((*n, rows * cols), data).expect("idx image shape"))
            }
            IdxData::Labels(_) => Err(Error::param("IDX file holds labels, not images")),
        }
    }

    pub fn to_labels(&self) -> Result<Vec<ClassLabel>> {
        match self {
            IdxData::Labels(l) => Ok(l.iter().map(|&b| ClassLabel(b as u32)).collect()),
            IdxData::Images { .. } => Err(Error::param("IDX file holds images, not labels")),
        }
    }
}

/// Loads `train-*` or `t10k-*` IDX image/label pairs from `dir`, keeping at
/// most `per_class` samples of each digit when given.
pub fn load_mnist(dir: &Path, split: Split, per_class: Option<usize>) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = parse_idx(&std::fs::read(dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = parse_idx(&std::fs::read(dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    let ds = Dataset::new(images.to_samples()?, labels.to_labels()?, split)?;
    Ok(match per_class {
        Some(n) => ds.take_per_class(n),
        None => ds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_example() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1];
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.to_labels().unwrap(), vec![ClassLabel(7), ClassLabel(2), ClassLabel(1)]);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn images_example() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 0, 255];
        let parsed = parse_idx(&bytes).unwrap();
        let m = parsed.to_samples().unwrap();
        assert_eq!(m.dim(), (1, 4));
        assert_eq!(m.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = parse_idx(&[0x12, 0x34, 0x56, 0x78, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));

        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 10, .. }), "{err}");

        assert!(parse_idx(&[0, 0, 8]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 7, 9]).is_err());
    }
}
