//! Parameter checkpoints: a JSON header describing named arrays followed by
//! their values as little-endian `f64`, flat and in header order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

const MAGIC: &[u8; 8] = b"DRGOCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    arrays: Vec<ArrayInfo>,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(path: &Path, arrays: &[(String, Matrix)]) -> io::Result<()> {
    let header = Header {
        dtype: "f64".to_string(),
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayInfo {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, m) in arrays {
        for &v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_checkpoint(path: &Path) -> io::Result<Vec<(String, Matrix)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "not a checkpoint file",
        ));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    if header.dtype != "f64" {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported dtype {}", header.dtype),
        ));
    }
    let mut out = Vec::with_capacity(header.arrays.len());
    for info in header.arrays {
        let mut data = vec![0.0; info.rows * info.cols];
        for slot in &mut data {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *slot = f64::from_le_bytes(b);
        }
        out.push((info.name, Matrix::from_vec(info.rows, info.cols, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.ckpt");
        let arrays = vec![
            ("a".to_string(), Matrix::from_vec(2, 2, vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE])),
            ("b".to_string(), Matrix::from_vec(1, 3, vec![0.0, -0.0, 3.7])),
        ];
        save_checkpoint(&path, &arrays).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((n1, m1), (n2, m2)) in arrays.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(m1.as_slice(), m2.as_slice());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
