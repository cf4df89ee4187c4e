//! 8-bit image loading and saving.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `round(clamp(255x, 0, 255))` with halves rounded away from zero.
#[inline]
pub fn to_byte<T: Real>(x: T) -> u8 {
    let v = (x.as_f64() * 255.0).clamp(0.0, 255.0).round();
    v as u8
}

pub fn from_rgb8<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data).expect("rgb buffer is h·w·3")
}

pub fn to_rgb8<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let (h, w, c) = t.hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
    }
    let bytes = t.data().iter().map(|&v| to_byte(v)).collect();
    RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))
}

/// Snaps every value to the nearest multiple of 1/255 inside `[0, 1]`.
pub fn quantize<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::lit(to_byte(v) as f64 / 255.0))
}

fn convert(img: DynamicImage) -> Result<RgbImage> {
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img.to_rgb8()),
        other => Err(Error::ImageFormat(format!(
            "unsupported pixel format {other:?}; only 8-bit images are accepted"
        ))),
    }
}

/// Loads an 8-bit PNG or JPEG as an `h × w × 3` tensor in `[0, 1]`.
/// Grey and alpha channels are expanded or dropped.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::ImageFormat(format!(
                "{}: unsupported format {other:?}",
                path.display()
            )))
        }
    }
    let img = reader
        .decode()
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
    Ok(from_rgb8(&convert(img)?))
}

/// Writes the tensor as an 8-bit RGB PNG after quantization.
pub fn save_image<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let img = to_rgb8(t)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))
}

pub fn encode_png<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb8(t)?
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::ImageFormat(e.to_string()))?;
    Ok(buf.into_inner())
}
