//! Image codecs and file helpers.
//!
//! PNG and binary PGM/PPM are supported. Samples are mapped to `[0, 1]`
//! by dividing by the format's maximum value; writing rounds
//! `p * maxval` after clamping to `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Sample depth for written images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let res = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        other => Err(image_err(
            path,
            format!("unsupported image extension `{other}`"),
        )),
    }
}

/// Decodes an image into a `(1, c, h, w)` tensor with `c` = 1 (grayscale)
/// or 3 (color; alpha is dropped).
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(f) => return Err(image_err(path, format!("unsupported format {f:?}"))),
        None => return Err(image_err(path, "unrecognised image format")),
    }
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    Ok(image_to_tensor(&img))
}

pub fn image_to_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let channels = if gray { 1 } else { 3 };
    let mut t = Tensor::zeros(Shape::new(1, channels, h, w));
    let plane = h * w;
    if wide {
        let (raw, stride) = if gray {
            (img.to_luma16().into_raw(), 1)
        } else {
            (img.to_rgb16().into_raw(), 3)
        };
        for (i, px) in raw.chunks_exact(stride).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                t.data_mut()[c * plane + i] = (v as f64 / 65535.0) as f32;
            }
        }
    } else {
        let (raw, stride) = if gray {
            (img.to_luma8().into_raw(), 1)
        } else {
            (img.to_rgb8().into_raw(), 3)
        };
        for (i, px) in raw.chunks_exact(stride).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                t.data_mut()[c * plane + i] = (v as f64 / 255.0) as f32;
            }
        }
    }
    t
}

fn quantize(v: f32, depth: BitDepth) -> f64 {
    (v.clamp(0.0, 1.0) as f64 * depth.max()).round()
}

/// Encodes the first batch item of a 1- or 3-channel tensor. The format
/// follows the file extension (`.png`, `.pgm`, `.ppm`). Written atomically.
pub fn write_image(path: impl AsRef<Path>, t: &Tensor<f32>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    let format = format_for(path)?;
    if s.n < 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::Shape(format!(
            "cannot encode tensor {s} as an image"
        )));
    }
    let (w, h) = (s.w as u32, s.h as u32);
    let plane = s.h * s.w;
    let px = |c: usize, i: usize| t.data()[c * plane + i];
    let img: DynamicImage = match (s.c, depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize(px(0, (y * w + x) as usize), depth) as u8])
        })),
        (1, BitDepth::Sixteen) => {
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_fn(w, h, |x, y| {
                Luma([quantize(px(0, (y * w + x) as usize), depth) as u16])
            }))
        }
        (_, BitDepth::Eight) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            Rgb([0, 1, 2].map(|c| quantize(px(c, i), depth) as u8))
        })),
        (_, BitDepth::Sixteen) => {
            DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_fn(w, h, |x, y| {
                let i = (y * w + x) as usize;
                Rgb([0, 1, 2].map(|c| quantize(px(c, i), depth) as u16))
            }))
        }
    };
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), format)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &bytes)
}
