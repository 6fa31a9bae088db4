use std::path::Path;

use image::{ExtendedColorType, ImageEncoder};

use crate::scene::Frame;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(frame: &Frame) -> Frame {
    let q = |v: &f64| to_byte(*v) as f64 / 255.0;
    Frame {
        width: frame.width,
        height: frame.height,
        pixels: frame.pixels.iter().map(q).collect(),
        mask: frame.mask.as_ref().map(|m| m.iter().map(q).collect()),
    }
}

/// RGBA when the frame carries a mask (stored as alpha), RGB otherwise.
pub fn encode_png(frame: &Frame) -> crate::Result<Vec<u8>> {
    let n = frame.width * frame.height;
    let (bytes, color) = match &frame.mask {
        Some(mask) => {
            let mut b = Vec::with_capacity(4 * n);
            for (px, m) in frame.pixels.chunks(3).zip(mask) {
                b.extend(px.iter().map(|v| to_byte(*v)));
                b.push(to_byte(*m));
            }
            (b, ExtendedColorType::Rgba8)
        }
        None => (frame.pixels.iter().map(|v| to_byte(*v)).collect(), ExtendedColorType::Rgb8),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, frame.width as u32, frame.height as u32, color)
        .map_err(|e| crate::Error::Data(format!("png encode: {e}")))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> crate::Result<Frame> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| crate::Error::Data(format!("png decode: {e}")))?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut pixels = Vec::with_capacity(3 * w * h);
    let mut mask = Vec::with_capacity(w * h);
    for px in rgba.pixels() {
        pixels.extend(px.0[..3].iter().map(|&b| b as f64 / 255.0));
        mask.push(px.0[3] as f64 / 255.0);
    }
    Ok(Frame::new(w, h, pixels, has_alpha.then_some(mask))?)
}

pub fn write_png(path: impl AsRef<Path>, frame: &Frame) -> crate::Result<()> {
    super::write_file(path.as_ref(), &encode_png(frame)?)
}

pub fn read_png(path: impl AsRef<Path>) -> crate::Result<Frame> {
    decode_png(&super::read_file(path.as_ref())?)
}
