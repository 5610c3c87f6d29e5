//! Little-endian byte buffers for the binary containers.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8]) -> Self {
        Writer { buf: magic.to_vec() }
    }


    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    /// Checks the leading magic; a mismatch is a format error.
    pub fn open(data: &'a [u8], magic: &[u8], what: &'a str) -> Result<Self> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            let got = String::from_utf8_lossy(&data[..magic.len().min(data.len())]).into_owned();
            return Err(Error::Format(format!(
                "{what}: expected magic {}, found {got:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Reader { data, pos: magic.len(), what })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Corruption(format!("{}: truncated at byte {} (wanted {n} more)", self.what, self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }


    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    pub fn corrupt(&self, msg: &str) -> Error {
        Error::Corruption(format!("{}: {msg}", self.what))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt(&format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}
