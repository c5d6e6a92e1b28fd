//! Little-endian binary reading and writing for the file formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

macro_rules! read_int {
    ($name:ident, $ty:ty) => {
        pub fn $name(&mut self, field: &str) -> Result<$ty> {
            let b = self.take(std::mem::size_of::<$ty>(), field)?;
            Ok(<$ty>::from_le_bytes(b.try_into().expect("sized")))
        }
    };
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(self.what, reason)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(format!(
                "truncated at byte {} reading {field} ({n} bytes needed, {} left)",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    read_int!(u8, u8);
    read_int!(u16, u16);
    read_int!(u32, u32);
    read_int!(u64, u64);
    read_int!(u128, u128);
    read_int!(f32, f32);
    read_int!(f64, f64);

    pub fn string(&mut self, len: usize, field: &str) -> Result<String> {
        let b = self.take(len, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error(format!("{field} is not UTF-8")))
    }

    /// Rejects trailing bytes.
    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} unexpected trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
