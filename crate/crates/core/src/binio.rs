//! Little-endian binary reading with byte-accurate EOF diagnostics.

use std::io::Read;

use crate::error::{CunetError, Result};

pub(crate) struct CountingReader<R> {
    inner: R,
    pos: usize,
    path: String,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R, path: &str) -> Self {
        CountingReader {
            inner,
            pos: 0,
            path: path.to_string(),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.pos += buf.len();
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(CunetError::Format {
                path: self.path.clone(),
                detail: format!("unexpected EOF at byte {} while reading {what}", self.pos),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}
