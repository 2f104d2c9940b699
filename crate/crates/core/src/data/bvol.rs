//! BVOL volume container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"BVOL0001"
//! channels     u32       number of real-valued channel volumes
//! has_labels   u8        1 when a label volume follows the channels
//! dims         3 x u32   depth, height, width
//! channels     channels x (d*h*w) x f64 LE, channel-major then row-major
//! labels       d*h*w x u8 (present when has_labels = 1)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::binio::CountingReader;
use crate::error::{CunetError, Result};
use crate::volume::{validate_labels, Volume};

pub const BVOL_MAGIC: &[u8; 8] = b"BVOL0001";

/// A parsed BVOL file: any number of real-valued channels and an optional
/// label volume of the same dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BvolFile {
    pub channels: Vec<Volume<f64>>,
    pub labels: Option<Volume<u8>>,
}

impl BvolFile {
    pub fn dims(&self) -> Result<[usize; 3]> {
        if let Some(c) = self.channels.first() {
            return Ok(c.dims());
        }
        if let Some(l) = &self.labels {
            return Ok(l.dims());
        }
        Err(CunetError::Format {
            path: "<bvol>".into(),
            detail: "file has neither channels nor labels".into(),
        })
    }

    fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        for (i, c) in self.channels.iter().enumerate() {
            if c.dims() != dims {
                return Err(CunetError::ShapeMismatch {
                    op: "bvol",
                    detail: format!("channel {i} dims {:?} vs {:?}", c.dims(), dims),
                });
            }
            if let Some(v) = c.data().iter().find(|v| !v.is_finite()) {
                return Err(CunetError::Format {
                    path: "<bvol>".into(),
                    detail: format!("channel {i} contains non-finite value {v}"),
                });
            }
        }
        if let Some(l) = &self.labels {
            if l.dims() != dims {
                return Err(CunetError::ShapeMismatch {
                    op: "bvol",
                    detail: format!("labels dims {:?} vs {:?}", l.dims(), dims),
                });
            }
            validate_labels(l)?;
        }
        Ok(())
    }
}

pub fn write_bvol<W: Write>(w: &mut W, file: &BvolFile) -> Result<()> {
    file.validate()?;
    let dims = file.dims()?;
    w.write_all(BVOL_MAGIC)?;
    w.write_all(&(file.channels.len() as u32).to_le_bytes())?;
    w.write_all(&[file.labels.is_some() as u8])?;
    for &d in &dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for c in &file.channels {
        for &v in c.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(l) = &file.labels {
        w.write_all(l.data())?;
    }
    Ok(())
}

pub fn read_bvol<R: Read>(r: R, path: &str) -> Result<BvolFile> {
    let mut r = CountingReader::new(r, path);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != BVOL_MAGIC {
        return Err(CunetError::Format {
            path: r.path().to_string(),
            detail: format!("bad magic {magic:?}, expected {BVOL_MAGIC:?}"),
        });
    }
    let channels = r.u32("channel count")? as usize;
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(CunetError::Format {
                path: r.path().to_string(),
                detail: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32(&format!("dimension {i}"))? as usize;
        if *d == 0 {
            return Err(CunetError::Format {
                path: r.path().to_string(),
                detail: format!("dimension {i} is zero"),
            });
        }
    }
    let voxels = dims[0] * dims[1] * dims[2];
    let mut chans = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut data = Vec::with_capacity(voxels);
        for _ in 0..voxels {
            data.push(r.f64(&format!("channel {c} payload"))?);
        }
        chans.push(Volume::from_vec(dims, data)?);
    }
    let labels = if has_labels {
        let mut data = vec![0u8; voxels];
        r.read_exact(&mut data, "label payload")?;
        Some(Volume::from_vec(dims, data)?)
    } else {
        None
    };
    let file = BvolFile {
        channels: chans,
        labels,
    };
    file.validate().map_err(|e| match e {
        CunetError::InvalidLabel { value, index } => CunetError::Format {
            path: path.to_string(),
            detail: format!("invalid label value {value} at voxel index {index}"),
        },
        other => other,
    })?;
    Ok(file)
}

pub fn save_bvol(path: &Path, file: &BvolFile) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bvol(&mut w, file)?;
    w.flush()?;
    Ok(())
}

pub fn load_bvol(path: &Path) -> Result<BvolFile> {
    let f = std::fs::File::open(path)?;
    read_bvol(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BvolFile {
        let dims = [2, 3, 2];
        let n = 12;
        let channels = (0..2)
            .map(|c| {
                Volume::from_vec(dims, (0..n).map(|i| (c * n + i) as f64 * 0.5).collect()).unwrap()
            })
            .collect();
        let labels = Volume::from_vec(dims, vec![0, 1, 2, 4, 0, 0, 1, 1, 2, 2, 4, 4]).unwrap();
        BvolFile {
            channels,
            labels: Some(labels),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let file = sample();
        let mut bytes = Vec::new();
        write_bvol(&mut bytes, &file).unwrap();
        let back = read_bvol(&bytes[..], "<mem>").unwrap();
        assert_eq!(file, back);
        let mut bytes2 = Vec::new();
        write_bvol(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let file = sample();
        let mut bytes = Vec::new();
        write_bvol(&mut bytes, &file).unwrap();
        bytes.truncate(40);
        let err = read_bvol(&bytes[..], "<mem>").unwrap_err();
        assert!(err.to_string().contains("unexpected EOF at byte"), "{err}");
    }

    #[test]
    fn label_value_3_is_rejected() {
        let file = sample();
        let mut bytes = Vec::new();
        write_bvol(&mut bytes, &file).unwrap();
        // Corrupt one label byte (labels are the trailing 12 bytes).
        let n = bytes.len();
        bytes[n - 1] = 3;
        let err = read_bvol(&bytes[..], "<mem>").unwrap_err();
        assert!(err.to_string().contains("invalid label value 3"), "{err}");
    }
}
