//! Little-endian binary framing shared by the STVD, STVP and STVC files.
//!
//! A tensor frame is `u8 dtype (0 = f32) | u8 ndim | ndim × u64 dims | payload`,
//! with the payload stored row-major. A u32 array is `u64 length | length × u32`.

use crate::error::{Error, Result};

pub const DTYPE_F32: u8 = 0;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn tensor(&mut self, dims: &[usize], data: &[f32]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.u8(DTYPE_F32);
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u64(d as u64);
        }
        self.buf.reserve(data.len() * 4);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u32_array(&mut self, values: &[u32]) {
        self.u64(values.len() as u64);
        for &v in values {
            self.u32(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.offset(),
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.offset();
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::format(
                at,
                format!("unsupported version {v}, expected {expected}"),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads one tensor frame, returning its dims and values.
    pub fn tensor(&mut self, what: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let at = self.offset();
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(
                at,
                format!("{what}: unsupported dtype {dtype}"),
            ));
        }
        let ndim = self.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let dim_at = self.offset();
            let d = self.u64("dimension")?;
            let d = usize::try_from(d)
                .map_err(|_| Error::format(dim_at, format!("{what}: dimension {d} overflows")))?;
            count = count
                .checked_mul(d)
                .filter(|c| c.checked_mul(4).is_some())
                .ok_or_else(|| {
                    Error::format(dim_at, format!("{what}: dimension product overflows"))
                })?;
            dims.push(d);
        }
        let payload_at = self.offset();
        let remaining = self.buf.len() - self.pos;
        if count * 4 > remaining {
            return Err(Error::format(
                payload_at,
                format!(
                    "{what}: truncated payload, header declares {count} values ({} bytes) but {remaining} bytes remain",
                    count * 4
                ),
            ));
        }
        let bytes = self.take(count * 4, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    pub fn u32_array(&mut self, what: &str) -> Result<Vec<u32>> {
        let at = self.offset();
        let len = self.u64(what)?;
        let len = usize::try_from(len)
            .ok()
            .filter(|l| {
                l.checked_mul(4)
                    .is_some_and(|b| b <= self.buf.len() - self.pos)
            })
            .ok_or_else(|| {
                Error::format(at, format!("{what}: declared length {len} exceeds payload"))
            })?;
        let bytes = self.take(len * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_end(&self) -> Result<()> {
        if !self.is_at_end() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}
