use crate::error::PgmError;
use crate::imaging::GrayImage;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn field(&mut self, name: &str) -> Result<u32, PgmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::BadHeader(format!("missing or invalid {name}")))
    }
}

/// Decodes binary 8-bit PGM (P5). Intensities are divided by maxval.
pub fn load_gray_image(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.field("width")? as usize;
    let height = h.field("height")? as usize;
    let maxval = h.field("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::BadHeader(format!("empty {width}x{height} image")));
    }
    if maxval == 0 {
        return Err(PgmError::BadHeader("maxval is 0".into()));
    }
    if maxval > 255 {
        return Err(PgmError::MaxvalTooLarge(maxval));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::BadHeader("no whitespace before raster".into()));
    }
    let raster = &bytes[h.pos + 1..];
    let expected = width * height;
    if raster.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    let scale = 1.0 / maxval as f64;
    let data = raster[..expected].iter().map(|&b| (b as f64 * scale).min(1.0)).collect();
    Ok(GrayImage::new(width, height, data).expect("dimensions checked"))
}

/// Encodes as P5 with maxval 255, clamping to [0, 1] and rounding.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
