//! Binary PPM (P6) decoding and the evaluation-time preprocessing chain:
//! bilinear resize so the short edge is 256, center crop to 224x224, scale
//! to [0, 1], then per-channel normalization.
//!
//! Only P6 with maxval 255 is accepted; everything else should go through
//! the `.lct` tensor path. Bilinear sampling uses half-pixel centers so the
//! result is pinned independent of any image library.

use lcnet_core::tensor::Tensor;

/// Community-standard per-channel normalization constants (not part of the
/// published recipe, which pins only resize and crop).
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const RESIZE_SHORT_EDGE: usize = 256;
pub const CROP: usize = 224;

/// RGB image as channel-major floats in [0, 1].
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]`, row-major.
    pub data: Vec<f32>,
}

/// Parses a binary P6 PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0usize;

    let skip_ws_and_comments = |pos: &mut usize| {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                return;
            }
        }
    };
    let token = |pos: &mut usize| -> Result<usize, String> {
        skip_ws_and_comments(pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format!("expected integer at byte {start} of PPM header"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("bad integer in PPM header: {e}"))
    };

    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err("not a binary PPM: magic must be P6".into());
    }
    pos += 2;
    let width = token(&mut pos)?;
    let height = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("PPM dimensions must be positive".into());
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format!("missing whitespace after PPM header at byte {pos}"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(format!(
            "truncated PPM payload: need {need} bytes, have {}",
            bytes.len() - pos
        ));
    }

    let raw = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(c * height + y) * width + x] =
                    raw[(y * width + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

/// Bilinear resample with half-pixel centers:
/// `src = (dst + 0.5) * src_extent / dst_extent - 0.5`, edges clamped.
fn resize_bilinear(img: &RgbImage, new_w: usize, new_h: usize) -> RgbImage {
    let sx = img.width as f32 / new_w as f32;
    let sy = img.height as f32 / new_h as f32;
    let mut data = vec![0.0f32; 3 * new_w * new_h];
    for c in 0..3 {
        let src = &img.data[c * img.height * img.width..(c + 1) * img.height * img.width];
        for y in 0..new_h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, img.height as f32 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..new_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, img.width as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let wx = fx - x0 as f32;
                let top = src[y0 * img.width + x0] * (1.0 - wx) + src[y0 * img.width + x1] * wx;
                let bot = src[y1 * img.width + x0] * (1.0 - wx) + src[y1 * img.width + x1] * wx;
                data[(c * new_h + y) * new_w + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    RgbImage {
        width: new_w,
        height: new_h,
        data,
    }
}

/// Short edge to [`RESIZE_SHORT_EDGE`] (long edge rounded), center crop to
/// [`CROP`], normalize. Returns a `[1, 3, 224, 224]` tensor.
pub fn preprocess(img: &RgbImage) -> Tensor {
    let (new_w, new_h) = resize_target(img.width, img.height);
    let resized = resize_bilinear(img, new_w, new_h);

    let x0 = (new_w - CROP) / 2;
    let y0 = (new_h - CROP) / 2;
    let mut out = vec![0.0f32; 3 * CROP * CROP];
    for c in 0..3 {
        for y in 0..CROP {
            for x in 0..CROP {
                let v = resized.data[(c * new_h + (y0 + y)) * new_w + (x0 + x)];
                out[(c * CROP + y) * CROP + x] = (v - MEAN[c]) / STD[c];
            }
        }
    }
    Tensor::from_vec(&[1, 3, CROP, CROP], out).unwrap()
}

/// Resize target for a given source size (exposed for tests).
pub fn resize_target(width: usize, height: usize) -> (usize, usize) {
    if width <= height {
        (
            RESIZE_SHORT_EDGE,
            (height as f64 * RESIZE_SHORT_EDGE as f64 / width as f64).round() as usize,
        )
    } else {
        (
            (width as f64 * RESIZE_SHORT_EDGE as f64 / height as f64).round() as usize,
            RESIZE_SHORT_EDGE,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_ppm(w: usize, h: usize) -> Vec<u8> {
        let mut bytes = format!("P6\n# test image\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 255 } else { 0 };
                bytes.extend_from_slice(&[v, v / 2, 255 - v]);
            }
        }
        bytes
    }

    #[test]
    fn decode_roundtrip_dimensions() {
        let img = decode_ppm(&checker_ppm(10, 6)).unwrap();
        assert_eq!((img.width, img.height), (10, 6));
        assert_eq!(img.data.len(), 3 * 60);
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_rejects_bad_input() {
        assert!(decode_ppm(b"P5\n2 2\n255\n....").is_err());
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err());
        let mut truncated = checker_ppm(4, 4);
        truncated.truncate(truncated.len() - 5);
        assert!(decode_ppm(&truncated).is_err());
    }

    #[test]
    fn short_edge_arithmetic() {
        // 640x480: short edge 480 -> 256, long edge round(640 * 256 / 480) = 341
        assert_eq!(resize_target(640, 480), (341, 256));
        assert_eq!(resize_target(480, 640), (256, 341));
        assert_eq!(resize_target(256, 256), (256, 256));
    }

    #[test]
    fn preprocess_yields_network_input() {
        let img = decode_ppm(&checker_ppm(640, 480)).unwrap();
        let t = preprocess(&img);
        assert_eq!(t.dims(), &[1, 3, 224, 224]);
        assert!(t.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_image_survives_resize_exactly() {
        // bilinear interpolation of a constant field is that constant
        let img = RgbImage {
            width: 100,
            height: 50,
            data: vec![0.5; 3 * 100 * 50],
        };
        let out = resize_bilinear(&img, 256, 128);
        assert!(out.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
