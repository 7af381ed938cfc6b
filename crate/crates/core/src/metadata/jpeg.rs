//! Minimal JPEG segment walker.
//!
//! Only the marker segments preceding the entropy-coded scan data are read:
//! that is where APP1/Exif and DQT live. Decoding of image data is left to
//! the `image` crate.

use crate::error::Error;
use crate::Result;

pub(crate) const MARKER_APP1: u8 = 0xE1;
pub(crate) const MARKER_DQT: u8 = 0xDB;
const MARKER_SOI_BYTE: u8 = 0xD8;
const MARKER_EOI: u8 = 0xD9;
const MARKER_SOS: u8 = 0xDA;

/// One marker segment: marker byte plus payload (length bytes excluded).
pub(crate) struct Segment {
    pub marker: u8,
    /// File offset of the first payload byte.
    pub payload_offset: u64,
    pub payload: Vec<u8>,
}

pub(crate) fn is_jpeg(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0xFF && bytes[1] == MARKER_SOI_BYTE
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::MetadataParse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Collects all marker segments up to (and excluding) the first SOS or EOI.
pub(crate) fn scan_segments(bytes: &[u8]) -> Result<Vec<Segment>> {
    if !is_jpeg(bytes) {
        return Err(parse_err(0, "missing JPEG SOI marker"));
    }
    let mut out = Vec::new();
    let mut pos = 2usize;
    loop {
        // Skip fill bytes; a marker is 0xFF followed by a non-0xFF byte.
        if pos >= bytes.len() {
            return Err(parse_err(pos, "unexpected end of file while scanning segments"));
        }
        if bytes[pos] != 0xFF {
            return Err(parse_err(pos, format!("expected marker, found 0x{:02X}", bytes[pos])));
        }
        while pos < bytes.len() && bytes[pos] == 0xFF {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(parse_err(pos, "truncated marker"));
        }
        let marker = bytes[pos];
        pos += 1;
        match marker {
            MARKER_EOI | MARKER_SOS => return Ok(out),
            // Standalone markers carry no length field.
            0x01 | 0xD0..=0xD7 => continue,
            _ => {
                if pos + 2 > bytes.len() {
                    return Err(parse_err(pos, "truncated segment length"));
                }
                let len = u16::from_be_bytes([bytes[pos], bytes[pos + 1]]) as usize;
                if len < 2 {
                    return Err(parse_err(pos, "segment length smaller than 2"));
                }
                let start = pos + 2;
                let end = pos + len;
                if end > bytes.len() {
                    return Err(parse_err(pos, "segment extends past end of file"));
                }
                out.push(Segment {
                    marker,
                    payload_offset: start as u64,
                    payload: bytes[start..end].to_vec(),
                });
                pos = end;
            }
        }
    }
}

/// Returns the TIFF payload of the first Exif APP1 segment together with its
/// file offset, or `None` when the file carries no Exif block.
pub(crate) fn exif_tiff_payload(bytes: &[u8]) -> Result<Option<(Vec<u8>, u64)>> {
    const EXIF_HEADER: &[u8] = b"Exif\0\0";
    for seg in scan_segments(bytes)? {
        if seg.marker == MARKER_APP1 && seg.payload.starts_with(EXIF_HEADER) {
            let tiff = seg.payload[EXIF_HEADER.len()..].to_vec();
            return Ok(Some((tiff, seg.payload_offset + EXIF_HEADER.len() as u64)));
        }
    }
    Ok(None)
}

/// Reads every quantization table defined in DQT segments. Keys are table
/// destination ids (0..=3), values are the 64 entries in zig-zag order.
pub(crate) fn quantization_tables(bytes: &[u8]) -> Result<Vec<(u8, [u16; 64])>> {
    let mut tables = Vec::new();
    for seg in scan_segments(bytes)? {
        if seg.marker != MARKER_DQT {
            continue;
        }
        let data = &seg.payload;
        let mut pos = 0usize;
        while pos < data.len() {
            let precision = data[pos] >> 4;
            let id = data[pos] & 0x0F;
            pos += 1;
            let mut table = [0u16; 64];
            for entry in table.iter_mut() {
                if precision == 0 {
                    if pos >= data.len() {
                        return Err(parse_err(
                            seg.payload_offset as usize + pos,
                            "truncated quantization table",
                        ));
                    }
                    *entry = data[pos] as u16;
                    pos += 1;
                } else {
                    if pos + 2 > data.len() {
                        return Err(parse_err(
                            seg.payload_offset as usize + pos,
                            "truncated quantization table",
                        ));
                    }
                    *entry = u16::from_be_bytes([data[pos], data[pos + 1]]);
                    pos += 2;
                }
            }
            tables.push((id, table));
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_jpeg() {
        assert!(scan_segments(b"\x89PNG").is_err());
        assert!(!is_jpeg(b"\x89PNG"));
    }

    #[test]
    fn stops_at_sos() {
        // SOI, APP0 (len 4, 2 payload bytes), SOS.
        let bytes = [0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x04, 0xAB, 0xCD, 0xFF, 0xDA];
        let segs = scan_segments(&bytes).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].marker, 0xE0);
        assert_eq!(segs[0].payload, vec![0xAB, 0xCD]);
        assert_eq!(segs[0].payload_offset, 6);
    }

    #[test]
    fn truncated_segment_reports_offset() {
        let bytes = [0xFF, 0xD8, 0xFF, 0xE1, 0x00, 0xFF];
        match scan_segments(&bytes) {
            Err(crate::Error::MetadataParse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
