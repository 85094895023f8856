//! Little-endian framing shared by the store and checkpoint formats.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Row-major, independent of the array's memory layout.
    pub fn matrix(&mut self, m: &Array2<f64>) {
        for &v in m.iter() {
            self.f32(v);
        }
    }

    pub fn vector(&mut self, v: &Array1<f64>) {
        for &x in v.iter() {
            self.f32(x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f64> {
        let b = self.take(4, what)?;
        let v = f32::from_le_bytes(b.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value in {what} at offset {}",
                self.pos - 4
            )));
        }
        Ok(v as f64)
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corruption(format!("{what} is not valid UTF-8")))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        self.ensure(rows * cols * 4, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f32(what)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    pub fn vector(&mut self, len: usize, what: &str) -> Result<Array1<f64>> {
        self.ensure(len * 4, what)?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f32(what)?);
        }
        Ok(Array1::from(data))
    }

    /// Fails early with a corruption error if fewer than `n` bytes remain.
    pub fn ensure(&self, n: usize, what: &str) -> Result<()> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "payload too short for {what}: header implies {n} more bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
