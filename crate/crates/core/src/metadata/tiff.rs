//! TIFF IFD parser for the Exif APP1 payload.
//!
//! Walks IFD0 plus the Exif, GPS and Interoperability sub-IFDs in both byte
//! orders and renders every entry to a canonical string value. Thumbnail
//! IFDs (IFD1) and MakerNotes are out of scope.

use std::collections::HashSet;

use super::tags::{tag_name, IfdGroup};
use crate::error::Error;
use crate::Result;

const TAG_EXIF_IFD: u16 = 0x8769;
const TAG_GPS_IFD: u16 = 0x8825;
const TAG_INTEROP_IFD: u16 = 0xA005;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

/// Canonicalizes a raw byte-string tag value.
///
/// NUL bytes and whitespace are stripped from both ends; interior bytes are
/// preserved verbatim (no case folding, so "NIKON" and "Nikon" stay
/// distinct). Payloads that do not decode to control-free UTF-8 are rendered
/// as lowercase hex with a "hex:" prefix. Total over arbitrary input.
pub fn normalize_value(_attribute: &str, raw: &[u8]) -> String {
    let is_pad = |b: u8| b == 0 || b == b' ' || b == b'\t' || b == b'\n' || b == b'\r';
    let Some(start) = raw.iter().position(|&b| !is_pad(b)) else {
        return String::new();
    };
    let end = raw.iter().rposition(|&b| !is_pad(b)).unwrap() + 1;
    let core = &raw[start..end];
    match std::str::from_utf8(core) {
        Ok(s) if !s.chars().any(char::is_control) => s.trim().to_string(),
        _ => {
            let mut out = String::with_capacity(4 + core.len() * 2);
            out.push_str("hex:");
            for b in core {
                out.push_str(&format!("{b:02x}"));
            }
            out
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    endian: Endian,
    /// File offset of the TIFF header, for error reporting.
    file_base: u64,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::MetadataParse {
            offset: self.file_base + offset as u64,
            message: message.into(),
        }
    }

    fn bytes(&self, offset: usize, len: usize) -> Result<&'a [u8]> {
        self.data
            .get(offset..offset + len)
            .ok_or_else(|| self.err(offset, format!("read of {len} bytes out of bounds")))
    }

    fn u16_at(&self, offset: usize) -> Result<u16> {
        let b = self.bytes(offset, 2)?;
        Ok(match self.endian {
            Endian::Little => u16::from_le_bytes([b[0], b[1]]),
            Endian::Big => u16::from_be_bytes([b[0], b[1]]),
        })
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        let b = self.bytes(offset, 4)?;
        Ok(match self.endian {
            Endian::Little => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Endian::Big => u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
        })
    }

    fn i32_at(&self, offset: usize) -> Result<i32> {
        Ok(self.u32_at(offset)? as i32)
    }
}

fn type_size(field_type: u16) -> Option<usize> {
    match field_type {
        1 | 2 | 6 | 7 => Some(1), // BYTE, ASCII, SBYTE, UNDEFINED
        3 | 8 => Some(2),         // SHORT, SSHORT
        4 | 9 | 11 => Some(4),    // LONG, SLONG, FLOAT
        5 | 10 | 12 => Some(8),   // RATIONAL, SRATIONAL, DOUBLE
        _ => None,
    }
}

/// Parses a TIFF block and returns canonical (attribute, value) pairs in
/// encounter order. Empty values are dropped.
pub(crate) fn parse_tiff(data: &[u8], file_base: u64) -> Result<Vec<(String, String)>> {
    let endian = match data.get(0..2) {
        Some(b"II") => Endian::Little,
        Some(b"MM") => Endian::Big,
        _ => {
            return Err(Error::MetadataParse {
                offset: file_base,
                message: "invalid TIFF byte-order mark".into(),
            })
        }
    };
    let reader = Reader {
        data,
        endian,
        file_base,
    };
    if reader.u16_at(2)? != 42 {
        return Err(reader.err(2, "invalid TIFF magic"));
    }
    let ifd0 = reader.u32_at(4)? as usize;

    let mut out = Vec::new();
    let mut visited = HashSet::new();
    parse_ifd(&reader, ifd0, IfdGroup::Image, &mut out, &mut visited)?;
    Ok(out)
}

fn parse_ifd(
    reader: &Reader,
    offset: usize,
    group: IfdGroup,
    out: &mut Vec<(String, String)>,
    visited: &mut HashSet<usize>,
) -> Result<()> {
    if !visited.insert(offset) {
        return Err(reader.err(offset, "IFD pointer cycle"));
    }
    let count = reader.u16_at(offset)? as usize;
    for i in 0..count {
        let entry = offset + 2 + i * 12;
        let tag = reader.u16_at(entry)?;
        let field_type = reader.u16_at(entry + 2)?;
        let value_count = reader.u32_at(entry + 4)? as usize;

        // Sub-IFD pointers.
        let sub_group = match (group, tag) {
            (IfdGroup::Image, TAG_EXIF_IFD) => Some(IfdGroup::Exif),
            (IfdGroup::Image, TAG_GPS_IFD) => Some(IfdGroup::Gps),
            (IfdGroup::Exif, TAG_INTEROP_IFD) => Some(IfdGroup::Interop),
            _ => None,
        };
        if let Some(sub_group) = sub_group {
            let sub_offset = reader.u32_at(entry + 8)? as usize;
            parse_ifd(reader, sub_offset, sub_group, out, visited)?;
            continue;
        }

        let Some(elem_size) = type_size(field_type) else {
            // Unknown field type: skip the entry, not the file.
            continue;
        };
        let total = elem_size
            .checked_mul(value_count)
            .ok_or_else(|| reader.err(entry + 4, "value size overflow"))?;
        let value_offset = if total <= 4 {
            entry + 8
        } else {
            reader.u32_at(entry + 8)? as usize
        };
        let bytes = reader.bytes(value_offset, total)?;

        let name = tag_name(group, tag);
        let value = render_value(field_type, value_count, bytes, reader, value_offset, &name)?;
        if !value.is_empty() {
            out.push((name, value));
        }
    }
    Ok(())
}

fn render_value(
    field_type: u16,
    count: usize,
    bytes: &[u8],
    reader: &Reader,
    offset: usize,
    attribute: &str,
) -> Result<String> {
    let join = |parts: Vec<String>| parts.join(", ");
    Ok(match field_type {
        2 | 7 => normalize_value(attribute, bytes), // ASCII, UNDEFINED
        1 => join((0..count).map(|i| bytes[i].to_string()).collect()),
        6 => join((0..count).map(|i| (bytes[i] as i8).to_string()).collect()),
        3 | 8 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let v = reader.u16_at(offset + i * 2)?;
                parts.push(if field_type == 3 {
                    v.to_string()
                } else {
                    (v as i16).to_string()
                });
            }
            join(parts)
        }
        4 | 9 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let v = reader.u32_at(offset + i * 4)?;
                parts.push(if field_type == 4 {
                    v.to_string()
                } else {
                    (v as i32).to_string()
                });
            }
            join(parts)
        }
        5 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let num = reader.u32_at(offset + i * 8)?;
                let den = reader.u32_at(offset + i * 8 + 4)?;
                parts.push(render_rational(num as i64, den as i64));
            }
            join(parts)
        }
        10 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let num = reader.i32_at(offset + i * 8)?;
                let den = reader.i32_at(offset + i * 8 + 4)?;
                parts.push(render_rational(num as i64, den as i64));
            }
            join(parts)
        }
        11 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let v = f32::from_bits(reader.u32_at(offset + i * 4)?);
                parts.push(format!("{v}"));
            }
            join(parts)
        }
        12 => {
            let mut parts = Vec::with_capacity(count);
            for i in 0..count {
                let hi = reader.u32_at(offset + i * 8)? as u64;
                let lo = reader.u32_at(offset + i * 8 + 4)? as u64;
                let bits = match reader.endian {
                    Endian::Little => (lo << 32) | hi,
                    Endian::Big => (hi << 32) | lo,
                };
                parts.push(format!("{}", f64::from_bits(bits)));
            }
            join(parts)
        }
        _ => String::new(),
    })
}

fn render_rational(num: i64, den: i64) -> String {
    if den == 1 {
        num.to_string()
    } else {
        format!("{num}/{den}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_nuls_and_whitespace() {
        assert_eq!(normalize_value("Image Make", b"Canon\0\0"), "Canon");
        assert_eq!(normalize_value("EXIF LensMake", b" FUJIFILM "), "FUJIFILM");
        assert_eq!(normalize_value("Image Make", b"\0\0"), "");
        assert_eq!(normalize_value("Image Make", b""), "");
    }

    #[test]
    fn normalize_preserves_case_and_interior_bytes() {
        assert_eq!(normalize_value("Image Make", b"NIKON"), "NIKON");
        assert_eq!(normalize_value("Image Make", b"Nikon"), "Nikon");
        assert_eq!(normalize_value("Image Model", b"EOS  5D"), "EOS  5D");
    }

    #[test]
    fn normalize_renders_binary_as_hex() {
        assert_eq!(
            normalize_value("EXIF UserComment", &[0x01, 0x02]),
            "hex:0102"
        );
        assert_eq!(
            normalize_value("EXIF UserComment", &[0xFF, 0xFE, 0x00]),
            "hex:fffe"
        );
    }

    #[test]
    fn rational_rendering() {
        assert_eq!(render_rational(24, 1), "24");
        assert_eq!(render_rational(355, 113), "355/113");
        assert_eq!(render_rational(0, 0), "0/0");
    }

    #[test]
    fn rejects_bad_byte_order() {
        match parse_tiff(b"XX\x2a\x00", 100) {
            Err(Error::MetadataParse { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
