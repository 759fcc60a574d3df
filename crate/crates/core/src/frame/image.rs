//! Netpbm depth (`P5`, 16-bit big-endian) and color (`P6`) images.

use std::io::Write;
use std::path::Path;

use super::FrameError;

/// Row-major raw depth samples; 0 marks an invalid measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<u16>) -> Result<Self, FrameError> {
        if values.len() != width as usize * height as usize {
            return Err(FrameError::Format(format!(
                "depth image {}x{} has {} samples",
                width,
                height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(self.values.len() * 2);
        for v in &self.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, FrameError> {
        let (header, body) = parse_netpbm_header(bytes, b"P5")?;
        let [width, height, maxval] = header;
        let n = width as usize * height as usize;
        let values = if maxval > 255 {
            let raw = body
                .get(..n * 2)
                .ok_or_else(|| FrameError::Format("truncated PGM body".into()))?;
            raw.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            let raw = body
                .get(..n)
                .ok_or_else(|| FrameError::Format("truncated PGM body".into()))?;
            raw.iter().map(|&b| b as u16).collect()
        };
        Self::new(width, height, values)
    }

    pub fn read(path: &Path) -> Result<Self, FrameError> {
        let bytes = std::fs::read(path).map_err(|e| FrameError::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<(), FrameError> {
        std::fs::write(path, self.to_pgm()).map_err(|e| FrameError::io(path, e))
    }
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn put(&mut self, index: usize, rgb: [u8; 3]) {
        self.data[index * 3..index * 3 + 3].copy_from_slice(&rgb);
    }

    /// Inclusive pixel box `(u_min, v_min, u_max, v_max)`, clipped to the image.
    pub fn crop(&self, bbox: [u32; 4]) -> RgbImage {
        let u1 = bbox[2].min(self.width.saturating_sub(1));
        let v1 = bbox[3].min(self.height.saturating_sub(1));
        let (u0, v0) = (bbox[0].min(u1), bbox[1].min(v1));
        let (w, h) = (u1 - u0 + 1, v1 - v0 + 1);
        let mut out = RgbImage::new(w, h);
        for row in 0..h {
            let src = ((v0 + row) as usize * self.width as usize + u0 as usize) * 3;
            let dst = row as usize * w as usize * 3;
            out.data[dst..dst + w as usize * 3].copy_from_slice(&self.data[src..src + w as usize * 3]);
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, FrameError> {
        let (header, body) = parse_netpbm_header(bytes, b"P6")?;
        let [width, height, maxval] = header;
        if maxval > 255 {
            return Err(FrameError::Format("16-bit PPM is not supported".into()));
        }
        let n = width as usize * height as usize * 3;
        let data = body
            .get(..n)
            .ok_or_else(|| FrameError::Format("truncated PPM body".into()))?
            .to_vec();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self, FrameError> {
        let bytes = std::fs::read(path).map_err(|e| FrameError::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<(), FrameError> {
        let mut f = std::fs::File::create(path).map_err(|e| FrameError::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| FrameError::io(path, e))
    }
}

/// Parses `magic width height maxval` plus the single whitespace byte that
/// precedes the raster, skipping `#` comments.
fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<([u32; 3], &'a [u8]), FrameError> {
    if !bytes.starts_with(magic) {
        return Err(FrameError::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(FrameError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FrameError::Format("malformed header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(FrameError::Format("missing raster separator".into()));
    }
    if fields[2] == 0 || fields[2] > 65535 {
        return Err(FrameError::Format(format!("bad maxval {}", fields[2])));
    }
    Ok((fields, &bytes[pos + 1..]))
}
