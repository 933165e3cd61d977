//! Binary matrix file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  8 bytes  "LMD3VEC1"
//! dim    u32
//! count  u64
//! flags  u8       bit 0: id table present
//! data   count * dim * f32, row-major
//! ids    count * u64        (only when flag bit 0 is set)
//! crc    u32               CRC32 of the data and id bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{EmbeddingMatrix, NORM_WARN_TOLERANCE};

pub const MATRIX_MAGIC: &[u8; 8] = b"LMD3VEC1";

const FLAG_IDS: u8 = 0b0000_0001;

pub fn write_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;
    let flags = if m.ids().is_some() { FLAG_IDS } else { 0 };
    w.write_all(&[flags])?;

    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::with_capacity(64 * 1024);
    for value in m.flat() {
        buf.extend_from_slice(&value.to_le_bytes());
        if buf.len() >= 64 * 1024 {
            crc.update(&buf);
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    if let Some(ids) = m.ids() {
        for id in ids {
            buf.extend_from_slice(&id.to_le_bytes());
            if buf.len() >= 64 * 1024 {
                crc.update(&buf);
                w.write_all(&buf)?;
                buf.clear();
            }
        }
    }
    crc.update(&buf);
    w.write_all(&buf)?;
    w.write_all(&crc.finalize().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let fail = |detail: String| Error::MatrixFormat {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let total_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| fail("file shorter than header".into()))?;
    if &magic != MATRIX_MAGIC {
        return Err(fail(format!("bad magic {magic:02x?}")));
    }
    let mut dim_buf = [0u8; 4];
    let mut count_buf = [0u8; 8];
    let mut flag_buf = [0u8; 1];
    r.read_exact(&mut dim_buf)
        .and_then(|_| r.read_exact(&mut count_buf))
        .and_then(|_| r.read_exact(&mut flag_buf))
        .map_err(|_| fail("file shorter than header".into()))?;
    let dim = u32::from_le_bytes(dim_buf) as usize;
    let count = u64::from_le_bytes(count_buf) as usize;
    let flags = flag_buf[0];
    if dim == 0 {
        return Err(fail("header declares dim 0".into()));
    }
    if flags & !FLAG_IDS != 0 {
        return Err(fail(format!("unknown flag bits {flags:#04x}")));
    }

    let header_len = 8 + 4 + 8 + 1;
    let data_len = (count as u64) * (dim as u64) * 4;
    let ids_len = if flags & FLAG_IDS != 0 {
        count as u64 * 8
    } else {
        0
    };
    let expected = header_len + data_len + ids_len + 4;
    if total_len != expected {
        return Err(fail(format!(
            "payload truncated or oversized: {total_len} bytes on disk, {expected} expected \
             for {count} x {dim} (ids: {})",
            flags & FLAG_IDS != 0
        )));
    }

    let mut crc = crc32fast::Hasher::new();
    let mut payload = vec![0u8; (data_len + ids_len) as usize];
    r.read_exact(&mut payload)
        .map_err(|_| fail("payload truncated".into()))?;
    crc.update(&payload);
    let mut crc_buf = [0u8; 4];
    r.read_exact(&mut crc_buf)
        .map_err(|_| fail("missing checksum".into()))?;
    let stored_crc = u32::from_le_bytes(crc_buf);
    let computed_crc = crc.finalize();
    if stored_crc != computed_crc {
        return Err(fail(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {computed_crc:#010x}"
        )));
    }

    let (data_bytes, ids_bytes) = payload.split_at(data_len as usize);
    let data: Vec<f32> = data_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let ids = if flags & FLAG_IDS != 0 {
        Some(
            ids_bytes
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                .collect(),
        )
    } else {
        None
    };

    let m = EmbeddingMatrix::from_flat_unchecked(dim, data, ids)?;
    for (row, &sq) in m.sq_norms().iter().enumerate() {
        let norm = sq.sqrt();
        if (norm - 1.0).abs() > NORM_WARN_TOLERANCE {
            log::warn!(
                "{}: row {row} has norm {norm:.6}, outside 1 +/- {NORM_WARN_TOLERANCE}",
                path.display()
            );
        }
    }
    Ok(m)
}
