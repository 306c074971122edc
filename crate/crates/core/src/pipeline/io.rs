//! PNG frames and clip directories (`<clip>/frame_%08d.png`).

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Frame;

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:08}.png")
}

/// Reads an 8-bit PNG, dividing by 255.
pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Frame::rgb(Tensor::new(&[3, h, w], data)?)
}

/// Writes an 8-bit PNG, clamping to `[0, 1]` and rounding to nearest.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let p = frame.pixels();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (p.channel(c)[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// PNG files of a clip directory in filename order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no PNG frames found"));
    }
    Ok(paths)
}

pub fn read_clip(dir: &Path) -> Result<Vec<Frame>> {
    list_frames(dir)?.iter().map(|p| read_png(p)).collect()
}

/// Writes `frames` as `frame_00000000.png`, `frame_00000001.png`, ...
pub fn write_clip(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Sub-directories of a dataset root in name order.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::rgb(Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0)).unwrap();
        write_clip(dir.path(), &[f.clone(), f.clone()]).unwrap();
        let back = read_clip(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], f);
        assert!(dir.path().join("frame_00000001.png").exists());
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = read_clip(Path::new("/nonexistent/clip")).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("/nonexistent/clip"));
    }
}
