//! Little-endian byte encoding shared by the model, map and optimizer
//! files, and the flat `key = value` text used by manifests and configs.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: impl IntoIterator<Item = f32>) {
        for v in vals {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte buffer; every failure reports the offending offset.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or(Error::Format {
            offset: self.pos as u64,
            reason: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.error(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = std::fs::write(&tmp, bytes).and_then(|()| std::fs::rename(&tmp, path));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// One `key = value` line of a flat text file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a key may appear once. Errors carry the 1-based line number.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<KeyValue>, (usize, String)> {
    let mut out: Vec<KeyValue> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err((line, format!("expected `key = value`, got {content:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err((line, format!("invalid key {key:?}")));
        }
        if let Some(prev) = out.iter().find(|kv| kv.key == key) {
            return Err((
                line,
                format!("duplicate key {key:?} (first on line {})", prev.line),
            ));
        }
        out.push(KeyValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_reports_offset_on_truncation() {
        let mut w = ByteWriter::new();
        w.u32(7);
        w.u16(3);
        let buf = w.into_inner();
        let mut r = ByteReader::new(&buf);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u16().unwrap(), 3);
        match r.u8() {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn key_values_with_comments() {
        let kv = parse_key_values("# header\nk = 12\n\n  base_lr=5e-4  # published\n").unwrap();
        assert_eq!(kv.len(), 2);
        assert_eq!(
            (kv[0].line, kv[0].key.as_str(), kv[0].value.as_str()),
            (2, "k", "12")
        );
        assert_eq!(
            (kv[1].key.as_str(), kv[1].value.as_str()),
            ("base_lr", "5e-4")
        );
    }

    #[test]
    fn key_value_errors_name_the_line() {
        assert_eq!(parse_key_values("a = 1\nnonsense\n").unwrap_err().0, 2);
        assert_eq!(parse_key_values("a = 1\na = 2\n").unwrap_err().0, 2);
        assert_eq!(parse_key_values("two words = 1").unwrap_err().0, 1);
    }
}
