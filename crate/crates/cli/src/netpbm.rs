//! Binary PGM (P5) and PPM (P6) with 8-bit samples.
//!
//! The header is the magic number followed by width, height and maxval as
//! ASCII decimals separated by whitespace, with `#` comments running to the
//! end of a line. Exactly one whitespace byte separates maxval from the
//! samples, which are stored row-major with channels interleaved.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetpbmError {
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} sample bytes, found {found}")]
    Truncated { offset: usize, expected: usize, found: usize },
    #[error("unsupported maxval {0}; only 255 is supported")]
    UnsupportedMaxval(u64),
    #[error("unsupported netpbm variant {0}; only P5 and P6 are supported")]
    UnsupportedVariant(String),
    #[error("expected a {expected} image, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
}

impl NetpbmError {
    /// Byte position the error refers to, when there is one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            NetpbmError::Header { offset, .. } | NetpbmError::Truncated { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Image {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn kind(&self) -> &'static str {
        if self.channels == 3 {
            "P6 (RGB)"
        } else {
            "P5 (grayscale)"
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, NetpbmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let reason = match self.bytes.get(start) {
                None => format!("file ends before {what}"),
                Some(b) => format!("expected {what}, found byte 0x{b:02x}"),
            };
            return Err(NetpbmError::Header { offset: start, reason });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NetpbmError::Header {
                offset: start,
                reason: format!("{what} does not fit in 64 bits"),
            })
    }
}

/// Parses a P5 or P6 file held in memory. Bytes after the payload are
/// ignored.
pub fn decode(bytes: &[u8]) -> Result<Image, NetpbmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', d]) if (b'1'..=b'7').contains(d) => {
            return Err(NetpbmError::UnsupportedVariant(format!("P{}", *d as char)))
        }
        _ => {
            return Err(NetpbmError::Header {
                offset: 0,
                reason: "missing P5/P6 magic number".into(),
            })
        }
    };
    let mut c = Cursor { bytes, pos: 2 };
    if !c.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(NetpbmError::Header {
            offset: 2,
            reason: "magic number must be followed by whitespace".into(),
        });
    }
    c.skip_space_and_comments();
    let width_at = c.pos;
    let width = c.number("width")?;
    let height = c.number("height")?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::Header {
            offset: width_at,
            reason: format!("zero-sized image {width}x{height}"),
        });
    }
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(NetpbmError::UnsupportedMaxval(maxval));
    }
    match c.bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        other => {
            return Err(NetpbmError::Header {
                offset: c.pos,
                reason: match other {
                    None => "file ends before the sample data".into(),
                    Some(b) => format!("expected one whitespace byte after maxval, found 0x{b:02x}"),
                },
            })
        }
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| NetpbmError::Header {
            offset: width_at,
            reason: format!("{width}x{height} overflows"),
        })?;
    let payload = &bytes[c.pos..];
    if payload.len() < expected {
        return Err(NetpbmError::Truncated {
            offset: bytes.len(),
            expected,
            found: payload.len(),
        });
    }
    Ok(Image {
        width,
        height,
        channels,
        data: payload[..expected].to_vec(),
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let g = Image::gray(3, 2, vec![0, 1, 2, 253, 254, 255]);
        assert_eq!(decode(&encode(&g)).unwrap(), g);
        let c = Image::rgb(1, 2, vec![9, 8, 7, 6, 5, 4]);
        assert_eq!(decode(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn comments_and_odd_spacing() {
        let bytes = b"P5 # made by hand\n  2\t# width done\n1\n255\n\x10\x20";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.data.clone()), (2, 1, vec![16, 32]));
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let bytes = b"P5\n4 4\n255\n\x00\x01\x02";
        match decode(bytes) {
            Err(NetpbmError::Truncated { offset, expected, found }) => {
                assert_eq!((offset, expected, found), (bytes.len(), 16, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors_point_at_the_bad_byte() {
        assert_eq!(decode(b"XY\n1 1\n255\n\0").unwrap_err().offset(), Some(0));
        assert_eq!(decode(b"P5\n1 x\n255\n\0").unwrap_err().offset(), Some(5));
        assert_eq!(decode(b"P5\n0 1\n255\n\0").unwrap_err().offset(), Some(3));
        assert_eq!(decode(b"P5\n1 1\n255").unwrap_err().offset(), Some(10));
        assert_eq!(decode(b"P5\n1 1").unwrap_err().offset(), Some(6));
    }

    #[test]
    fn unsupported_inputs() {
        assert_eq!(decode(b"P5\n1 1\n65535\n\0\0"), Err(NetpbmError::UnsupportedMaxval(65535)));
        assert_eq!(decode(b"P5\n1 1\n15\n\0"), Err(NetpbmError::UnsupportedMaxval(15)));
        assert_eq!(decode(b"P2\n1 1\n255\n0\n"), Err(NetpbmError::UnsupportedVariant("P2".into())));
    }
}
