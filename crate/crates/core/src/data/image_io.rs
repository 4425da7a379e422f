//! 8-bit RGB PNG / binary PPM (P6) reading and writing.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn sniff(bytes: &[u8]) -> Option<ImageFormat> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(ImageFormat::Png)
    } else if bytes.starts_with(b"P6") {
        Some(ImageFormat::Pnm)
    } else {
        None
    }
}

/// Decodes PNG or P6 bytes into a `[3,h,w]` tensor scaled to [0,1].
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format = sniff(bytes).ok_or_else(|| image_err(path, "unsupported format (expected PNG or P6 PPM)"))?;
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| image_err(path, e))?;
    let rgb = img.to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes, path)
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(data, &[3, h, w]).expect("decoded image has positive extents")
}

/// Quantizes a `[3,h,w]` tensor (values clamped to [0,1]) to 8 bits.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!("expected [3,h,w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let data = t.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([q(data[i]), q(data[h * w + i]), q(data[2 * h * w + i])])
    }))
}

/// Writes PNG for `.png` paths, binary PPM (P6) for `.ppm`.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let rgb = tensor_to_rgb(t)?;
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if e == "ppm" => {
            let mut bytes = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
            bytes.extend_from_slice(rgb.as_raw());
            return Ok(std::fs::write(path, bytes)?);
        }
        _ => return Err(image_err(path, "output extension must be .png or .ppm")),
    };
    rgb.save_with_format(path, format).map_err(|e| image_err(path, e))
}

/// Nearest-neighbour resize of a `[3,h,w]` tensor.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let src = t.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                data.push(src[ch * h * w + sy * w + x * w / out_w]);
            }
        }
    }
    Tensor::new(data, &[c, out_h, out_w]).expect("positive target size")
}
