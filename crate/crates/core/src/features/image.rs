//! Window-image preprocessing: mask, grayscale, resize, normalize.

use serde::{Deserialize, Serialize};

use super::FeatureError;

/// Decoded 8-bit image, interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, channels: 1, data }
    }

    pub fn uniform(width: usize, height: usize, value: u8) -> Self {
        Self::gray(width, height, vec![value; width * height])
    }

    /// Binary PGM (P5) encoding of a grayscale image.
    pub fn to_pgm(&self) -> Vec<u8> {
        assert_eq!(self.channels, 1, "PGM holds grayscale images only");
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Decodes PGM/PPM natively and anything else (PNG, JPEG) via `image`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") || bytes.starts_with(b"P6") {
            return decode_netpbm(bytes);
        }
        let img = ::image::load_from_memory(bytes).map_err(|e| FeatureError::Ingestion(e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            Ok(Self { width, height, channels: 3, data: img.to_rgb8().into_raw() })
        } else {
            Ok(Self::gray(width, height, img.to_luma8().into_raw()))
        }
    }
}

fn decode_netpbm(bytes: &[u8]) -> Result<RawImage, FeatureError> {
    let bad = |m: &str| FeatureError::Ingestion(format!("netpbm: {m}"));
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit images are supported (maxval {maxval})")));
    }
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let len = width * height * channels;
    let data = if bytes[1] == b'2' {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("non-ASCII P2 body"))?;
        let vals: Result<Vec<u8>, _> = text.split_ascii_whitespace().take(len).map(str::parse).collect();
        vals.map_err(|_| bad("malformed P2 sample"))?
    } else {
        // exactly one whitespace byte separates header and raster
        let body = bytes.get(pos + 1..).unwrap_or(&[]);
        body.get(..len).ok_or_else(|| bad("truncated raster"))?.to_vec()
    };
    if data.len() != len {
        return Err(bad("truncated raster"));
    }
    Ok(RawImage { width, height, channels, data })
}

/// Window-region mask as polygons in normalized `[0, 1]^2` image
/// coordinates (x to the right, y downward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub polygons: Vec<Vec<[f64; 2]>>,
}

impl MaskConfig {
    /// Axis-aligned rectangles `(x0, y0, x1, y1)`.
    pub fn from_rects(rects: &[[f64; 4]]) -> Self {
        let polygons = rects
            .iter()
            .map(|&[x0, y0, x1, y1]| vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
            .collect();
        Self { polygons }
    }

    pub fn full_frame() -> Self {
        Self::from_rects(&[[0.0, 0.0, 1.0, 1.0]])
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let mask: Self = serde_json::from_str(text).map_err(|e| FeatureError::Config(format!("mask file: {e}")))?;
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        for (i, poly) in self.polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(FeatureError::Config(format!("mask polygon {i} has fewer than 3 vertices")));
            }
            if poly.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(FeatureError::Config(format!("mask polygon {i} leaves the unit square")));
            }
        }
        let area: f64 = self.polygons.iter().map(|p| polygon_area(p)).sum();
        if !(area > 0.0) {
            return Err(FeatureError::Config("mask covers zero area".into()));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polygons.iter().any(|p| point_in_polygon(p, x, y))
    }

    /// Keep-flags for the pixel centers of a `width x height` grid.
    pub fn raster(&self, width: usize, height: usize) -> Vec<bool> {
        let mut keep = Vec::with_capacity(width * height);
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                keep.push(self.contains((c as f64 + 0.5) / width as f64, y));
            }
        }
        keep
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

// Even-odd ray casting.
fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Preprocessed single-channel CNN input with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

/// Luma weights for RGB to grayscale conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn grayscale(img: &RawImage) -> Vec<f64> {
    match img.channels {
        1 => img.data.iter().map(|&v| v as f64).collect(),
        3 => img
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64)
            .collect(),
        n => panic!("unsupported channel count {n}"),
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| coord(c, sx, width)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for r in 0..out_h {
        let (y0, y1, ty) = coord(r, sy, height);
        for &(x0, x1, tx) in &cols {
            let top = src[y0 * width + x0] * (1.0 - tx) + src[y0 * width + x1] * tx;
            let bottom = src[y1 * width + x0] * (1.0 - tx) + src[y1 * width + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Maps an 8-bit intensity in `[0, 255]` to `[-1, 1]`.
pub fn normalize_pixel(p: f64) -> f64 {
    p / 127.5 - 1.0
}

/// Mask, grayscale, resize to `size x size`, normalize.
///
/// Output pixels whose centers fall outside the mask are held at zero
/// intensity through the resize, so they normalize to exactly -1.
pub fn preprocess_image(raw: &RawImage, mask: &MaskConfig, size: usize) -> Result<ImageTensor, FeatureError> {
    mask.validate()?;
    if size == 0 {
        return Err(FeatureError::Config("target image size must be positive".into()));
    }
    if raw.width == 0 || raw.height == 0 || raw.data.len() != raw.width * raw.height * raw.channels {
        return Err(FeatureError::Ingestion("image buffer does not match its dimensions".into()));
    }
    if raw.channels != 1 && raw.channels != 3 {
        return Err(FeatureError::Ingestion(format!("unsupported channel count {}", raw.channels)));
    }

    let keep = mask.raster(raw.width, raw.height);
    let mut masked = raw.clone();
    for (px, &k) in masked.data.chunks_mut(raw.channels).zip(&keep) {
        if !k {
            px.fill(0);
        }
    }
    let gray = grayscale(&masked);
    let mut resized = resize_bilinear(&gray, raw.width, raw.height, size, size);
    for (v, k) in resized.iter_mut().zip(mask.raster(size, size)) {
        if !k {
            *v = 0.0;
        }
    }
    let data = resized.into_iter().map(|p| normalize_pixel(p).clamp(-1.0, 1.0) as f32).collect();
    Ok(ImageTensor { size, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn left_half() -> MaskConfig {
        MaskConfig::from_rects(&[[0.0, 0.0, 0.5, 1.0]])
    }

    #[test]
    fn black_image_is_all_minus_one() {
        let out = preprocess_image(&RawImage::uniform(40, 30, 0), &left_half(), 16).unwrap();
        assert!(out.data.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn white_image_full_mask_is_all_plus_one() {
        let out = preprocess_image(&RawImage::uniform(64, 64, 255), &MaskConfig::full_frame(), 32).unwrap();
        assert!(out.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn white_image_left_half_mask() {
        for src in [128, 256] {
            let out = preprocess_image(&RawImage::uniform(src, src, 255), &left_half(), 128).unwrap();
            for r in 0..128 {
                for c in 0..128 {
                    let want = if c < 64 { 1.0 } else { -1.0 };
                    assert_eq!(out.data[r * 128 + c], want, "src {src} pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn outside_mask_is_exactly_minus_one_after_resize() {
        // Non-aligned polygon and a non-integer scale factor.
        let mask = MaskConfig { polygons: vec![vec![[0.13, 0.21], [0.71, 0.17], [0.52, 0.88]]] };
        let raw = RawImage::gray(97, 61, (0..97 * 61).map(|i| (i * 37 % 256) as u8).collect());
        let out = preprocess_image(&raw, &mask, 32).unwrap();
        let keep = mask.raster(32, 32);
        for (v, k) in out.data.iter().zip(keep) {
            assert!((-1.0..=1.0).contains(v));
            if !k {
                assert_eq!(*v, -1.0);
            }
        }
    }

    #[test]
    fn masking_before_normalizing_is_observable() {
        // Masking first yields -1 outside the window; masking the normalized
        // tensor afterwards would yield 0 there.
        let raw = RawImage::uniform(32, 32, 255);
        let masked_first = preprocess_image(&raw, &left_half(), 32).unwrap();
        let full = preprocess_image(&raw, &MaskConfig::full_frame(), 32).unwrap();
        let keep = left_half().raster(32, 32);
        let late: Vec<f32> = full.data.iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
        assert_ne!(masked_first.data, late);
        assert_eq!(masked_first.data[31], -1.0);
        assert_eq!(late[31], 0.0);
    }

    #[test]
    fn luma_weights_applied_before_resize() {
        let raw = RawImage { width: 2, height: 2, channels: 3, data: [10u8, 200, 30].repeat(4) };
        let out = preprocess_image(&raw, &MaskConfig::full_frame(), 2).unwrap();
        let g = 0.299 * 10.0 + 0.587 * 200.0 + 0.114 * 30.0;
        assert!((out.data[0] as f64 - (g / 127.5 - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_is_config_error() {
        let degenerate = MaskConfig { polygons: vec![vec![[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]]] };
        let err = preprocess_image(&RawImage::uniform(4, 4, 9), &degenerate, 4).unwrap_err();
        assert!(matches!(err, FeatureError::Config(_)));
        assert!(MaskConfig { polygons: vec![] }.validate().is_err());
        assert!(MaskConfig::from_json(r#"{"polygons": [[[0,0],[2,0],[0,1]]]}"#).is_err());
    }

    #[test]
    fn mask_json_round_trip() {
        let m = MaskConfig::from_json(r#"{"polygons": [[[0.1,0.3],[0.45,0.3],[0.45,0.75],[0.1,0.75]]]}"#).unwrap();
        assert!(m.contains(0.2, 0.5));
        assert!(!m.contains(0.5, 0.5));
    }

    #[test]
    fn pgm_round_trip_and_bad_input() {
        let img = RawImage::gray(3, 2, vec![0, 10, 20, 30, 40, 255]);
        assert_eq!(RawImage::decode(&img.to_pgm()).unwrap(), img);
        let ascii = b"P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n";
        assert_eq!(RawImage::decode(ascii).unwrap(), img);
        assert!(matches!(RawImage::decode(b"P5\n3 2\n255\n\x00\x01"), Err(FeatureError::Ingestion(_))));
        assert!(matches!(RawImage::decode(b"not an image"), Err(FeatureError::Ingestion(_))));
    }

    #[test]
    fn png_decodes_through_image_crate() {
        let mut buf = Vec::new();
        let img = ::image::GrayImage::from_raw(2, 2, vec![1, 2, 3, 4]).unwrap();
        img.write_to(&mut std::io::Cursor::new(&mut buf), ::image::ImageFormat::Png).unwrap();
        assert_eq!(RawImage::decode(&buf).unwrap(), RawImage::gray(2, 2, vec![1, 2, 3, 4]));
    }

    #[test]
    fn bilinear_identity_and_average() {
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 4, 4), src);
        // 2x downsample with half-pixel centers averages each 2x2 tile
        let half = resize_bilinear(&src, 4, 4, 2, 2);
        assert_eq!(half, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
