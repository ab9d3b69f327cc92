//! PNG frame directories named `frame_%05d.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use super::frame::{Frame, VideoSequence};
use crate::error::{Error, Result};

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Parses `frame_00012.png` into `12`.
pub fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// `round(v·255)` with halves rounded up, after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn load_image(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Frame::new(w, h, data)
}

pub fn save_image(frame: &Frame, path: &Path) -> Result<()> {
    let (w, h) = (frame.width(), frame.height());
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| quantize(frame.get(c, y, x))))
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::io(path, e))
}

/// Frame files present in `dir`, keyed by index.
pub fn list_frames(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(idx) = entry.file_name().to_str().and_then(parse_frame_index) {
            found.insert(idx, entry.path());
        }
    }
    Ok(found)
}

/// Loads `frame_00000.png, frame_00001.png, …`; numbering must be contiguous
/// from zero.
pub fn load_frames(dir: &Path) -> Result<VideoSequence> {
    let found = list_frames(dir)?;
    if found.is_empty() {
        return Err(Error::io(dir, "no frame_NNNNN.png files"));
    }
    let mut frames = Vec::with_capacity(found.len());
    for (expected, (&idx, path)) in found.iter().enumerate() {
        if idx != expected {
            return Err(Error::MissingFrame(expected));
        }
        frames.push(load_image(path)?);
    }
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    VideoSequence::new(id, frames)
}

/// Loads frames whose indices need not be contiguous (e.g. `0, 2, 4`).
pub fn load_indexed_frames(dir: &Path) -> Result<Vec<(usize, Frame)>> {
    list_frames(dir)?.into_iter().map(|(i, p)| Ok((i, load_image(&p)?))).collect()
}

pub fn save_frames(video: &VideoSequence, dir: &Path) -> Result<()> {
    save_indexed_frames(video.frames().iter().enumerate(), dir)
}

pub fn save_indexed_frames<'a>(frames: impl IntoIterator<Item = (usize, &'a Frame)>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames {
        save_image(f, &dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_file_name(7), "frame_00007.png");
        assert_eq!(parse_frame_index("frame_00042.png"), Some(42));
        assert_eq!(parse_frame_index("frame_42.png"), None);
        assert_eq!(parse_frame_index("frame_00042.jpg"), None);
    }
}
