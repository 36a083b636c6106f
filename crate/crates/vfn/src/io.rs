//! Image decoding and encoding, plus small file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};
use vfn_core::imaging::ImageBuffer;

use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decodes a PNG or JPEG into unit-interval RGB. Grayscale is replicated to
/// three channels and alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let decoded = ImageReader::open(path)
        .map_err(Error::io(path))?
        .with_guessed_format()
        .map_err(Error::io(path))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(ImageBuffer::new(rgb.width(), rgb.height(), data)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &ImageBuffer) -> RgbImage {
    let bytes = img.data().iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(img.width(), img.height(), bytes).expect("buffer length matches dimensions")
}

pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    save_rgb8(&to_rgb8(img), path)
}

fn save_rgb8(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)
}

/// Blue-to-red ramp for a value in `[0, 1]`.
pub fn heat_color(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) as f32;
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Renders normalized heat over a dimmed copy of `img`.
pub fn render_heatmap(img: &ImageBuffer, heat: &[f64], opacity: f32) -> ImageBuffer {
    let w = img.width();
    ImageBuffer::from_fn(w, img.height(), |x, y| {
        let base = img.pixel(x, y);
        let c = heat_color(heat[(y * w + x) as usize]);
        [0, 1, 2].map(|i| base[i] * (1.0 - opacity) + c[i] * opacity)
    })
}

/// Draws a `thickness`-pixel outline of `rect` in `color`.
pub fn draw_rect(
    img: &mut ImageBuffer,
    rect: vfn_core::geometry::CropRect,
    color: [f32; 3],
    thickness: u32,
) {
    let (x0, y0) = (rect.x, rect.y);
    let (x1, y1) = (rect.right() as u32, rect.bottom() as u32);
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + thickness
                || x + thickness >= x1
                || y < y0 + thickness
                || y + thickness >= y1;
            if edge {
                img.set_pixel(x, y, color);
            }
        }
    }
}

/// Writes through a sibling temp file and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

/// PNG and JPEG files directly inside `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(7, 5, |x, y| [x as f32 / 255.0, y as f32 / 255.0, 1.0]);
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn grayscale_expands_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_fn(4, 3, |x, _| image::Luma([(x * 60) as u8]))
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(2, 1), [120.0 / 255.0; 3]);
    }

    #[test]
    fn undecodable_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        fs::write(&path, b"not an image").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(heat_color(1.0), [0.5, 0.0, 0.0]);
    }
}
