//! Binary PGM (P5) export of BEV images and match montages.

use bevloc_core::bev::BevImage;

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn from_bev(img: &BevImage) -> Self {
        let n = img.size();
        let data = img.pixels().iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
        Self {
            width: n,
            height: n,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        // Header: magic, width, height, maxval, then one whitespace byte.
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err("truncated PGM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(format!("expected P5 magic, found {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header value {s:?}"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(format!("only 8-bit PGM is supported, maxval {maxval}"));
        }
        let data = bytes.get(i + 1..).unwrap_or(&[]);
        if data.len() != width * height {
            return Err(format!("expected {} pixel bytes, found {}", width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data: data.to_vec(),
        })
    }

    fn set(&mut self, x: i64, y: i64, value: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = value;
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), value: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, value);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

pub fn encode_pgm(img: &BevImage) -> Vec<u8> {
    Gray::from_bev(img).encode()
}

/// Query on the left, reference on the right (twice the input width), with
/// a line drawn between each pair of matched pixel positions.
pub fn match_montage(query: &BevImage, reference: &BevImage, pairs: &[([f64; 2], [f64; 2])]) -> Gray {
    let (a, b) = (Gray::from_bev(query), Gray::from_bev(reference));
    let height = a.height.max(b.height);
    let mut m = Gray {
        width: a.width + b.width,
        height,
        data: vec![0; (a.width + b.width) * height],
    };
    for y in 0..height {
        if y < a.height {
            m.data[y * m.width..y * m.width + a.width].copy_from_slice(&a.data[y * a.width..(y + 1) * a.width]);
        }
        if y < b.height {
            let row = y * m.width + a.width;
            m.data[row..row + b.width].copy_from_slice(&b.data[y * b.width..(y + 1) * b.width]);
        }
    }
    let off = a.width as f64;
    for (q, r) in pairs {
        let p0 = (q[0].round() as i64, q[1].round() as i64);
        let p1 = ((r[0] + off).round() as i64, r[1].round() as i64);
        m.line(p0, p1, 128);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_quantization() {
        let img = BevImage::from_pixels(2, vec![0.0, 0.5, 1.0, 0.1], 0.4, 0.4).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 26]);
        let g = Gray::decode(&bytes).unwrap();
        assert_eq!((g.width, g.height), (2, 2));
        assert_eq!(g.encode(), bytes);
        assert!(Gray::decode(&bytes[..13]).is_err());
        assert!(Gray::decode(b"P2\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn empty_bev_is_all_zero() {
        let img = BevImage::zeros(200, 0.4, 40.0);
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..15], b"P5\n200 200\n255\n");
        assert!(bytes[15..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 15 + 40_000);
    }

    #[test]
    fn montage_layout() {
        let a = BevImage::from_pixels(4, vec![1.0; 16], 0.4, 0.8).unwrap();
        let b = BevImage::zeros(4, 0.4, 0.8);
        let m = match_montage(&a, &b, &[([0.0, 0.0], [3.0, 3.0])]);
        assert_eq!((m.width, m.height), (8, 4));
        assert_eq!(m.data[0], 128);
        assert_eq!(m.data[3 * 8 + 7], 128);
        assert_eq!(m.data[3 * 8], 255);
        assert_eq!(m.data[4], 0);
    }
}
