//! Binary PNM (P5 greyscale, P6 colour) encode/decode.

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("not a binary PGM/PPM image")]
    BadMagic,
    #[error("malformed header")]
    BadHeader,
    #[error("only maxval 255 is supported, got {0}")]
    UnsupportedMaxval(u32),
    #[error("pixel data has {found} bytes, expected {expected}")]
    ShortData { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes P5 directly and P6 by averaging channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::BadMagic),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PnmError::BadHeader),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PnmError::BadHeader)?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::BadHeader);
    }
    pos += 1;
    let [width, height, maxval] = fields.map(|f| f as usize);
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval as u32));
    }
    let expected = width * height * channels;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(PnmError::ShortData {
            expected,
            found: data.len(),
        });
    }
    let pixels = if channels == 1 {
        data[..expected].to_vec()
    } else {
        data[..expected]
            .chunks_exact(3)
            .map(|px| ((u32::from(px[0]) + u32::from(px[1]) + u32::from(px[2]) + 1) / 3) as u8)
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).collect();
        let bytes = encode_pgm(4, 3, &px);
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(img.pixels, px);
    }

    #[test]
    fn ppm_and_comments() {
        let mut bytes = b"P6 # colour\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[30, 60, 90, 255, 255, 255]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels, vec![60, 255]);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(decode_pnm(b"P2\n1 1\n255\n0"), Err(PnmError::BadMagic));
        assert_eq!(decode_pnm(b"P5\n1 1\n65535\n00"), Err(PnmError::UnsupportedMaxval(65535)));
        assert!(matches!(decode_pnm(b"P5\n2 2\n255\n\x01"), Err(PnmError::ShortData { .. })));
    }
}
