//! CUNETP1 parameter container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            7 bytes   b"CUNETP1"
//! entry_count      u32
//! per entry:
//!   name_len       u32
//!   name           name_len bytes, UTF-8
//!   ndim           u32
//!   extents        ndim x u32
//!   payload        product(extents) x f64, IEEE-754 little-endian
//! ```
//!
//! Entries are written in ascending name order, so the byte stream is
//! canonical for a given parameter set.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::CountingReader;
use crate::error::{CunetError, Result};

pub const PARAM_MAGIC: &[u8; 7] = b"CUNETP1";

/// Named tensors as (shape, row-major data).
pub type ParamTable = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn write_param_table<W: Write>(w: &mut W, table: &ParamTable) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, (shape, data)) in table {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CunetError::Format {
                path: "<param table>".into(),
                detail: format!("entry `{name}`: shape {shape:?} vs {} values", data.len()),
            });
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_param_table<R: Read>(r: R, path: &str) -> Result<ParamTable> {
    let mut r = CountingReader::new(r, path);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic, "magic")?;
    if &magic != PARAM_MAGIC {
        return Err(CunetError::Format {
            path: path.to_string(),
            detail: format!("bad magic {magic:?}, expected {PARAM_MAGIC:?}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut table = ParamTable::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|e| CunetError::Format {
            path: path.to_string(),
            detail: format!("entry {i}: name is not UTF-8: {e}"),
        })?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64(&format!("payload of `{name}`"))?);
        }
        if table.insert(name.clone(), (shape, data)).is_some() {
            return Err(CunetError::Format {
                path: path.to_string(),
                detail: format!("duplicate entry `{name}`"),
            });
        }
    }
    Ok(table)
}

pub fn save_param_file(path: &Path, table: &ParamTable) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_param_table(&mut w, table)?;
    w.flush()?;
    Ok(())
}

pub fn load_param_file(path: &Path) -> Result<ParamTable> {
    let f = std::fs::File::open(path)?;
    read_param_table(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_table() -> ParamTable {
        let mut t = ParamTable::new();
        t.insert("a.w".into(), (vec![2, 1, 1, 1, 1], vec![1.5, -2.25]));
        t.insert("a.b".into(), (vec![2], vec![0.0, 3.5]));
        t
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let table = sample_table();
        let mut bytes = Vec::new();
        write_param_table(&mut bytes, &table).unwrap();
        let back = read_param_table(&bytes[..], "<mem>").unwrap();
        assert_eq!(table, back);

        let mut bytes2 = Vec::new();
        write_param_table(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncated_stream_reports_byte_offset() {
        let table = sample_table();
        let mut bytes = Vec::new();
        write_param_table(&mut bytes, &table).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_param_table(&bytes[..], "<mem>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unexpected EOF at byte"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_param_table(&b"NOTMAGIC...."[..], "<mem>").unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{}", err);
    }
}
