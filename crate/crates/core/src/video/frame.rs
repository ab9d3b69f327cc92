use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// An RGB image with values in `[0, 1]`, stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame", "width and height must be >= 1"));
        }
        if data.len() != 3 * width * height {
            return Err(Error::invalid(
                "frame",
                format!("{width}x{height}x3 needs {} values, got {}", 3 * width * height, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("frame", format!("value {v} outside [0, 1]")));
        }
        Ok(Frame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, width * height)).collect();
        Frame::new(width, height, data)
    }

    /// Builds a frame from `[1, 3, h, w]` (or `[3, h, w]`) values, clamping to `[0, 1]`.
    pub fn from_tensor_clamped<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 3, h, w] | [3, h, w] => (*h, *w),
            s => return Err(Error::invalid("frame", format!("expected [1,3,h,w], got {s:?}"))),
        };
        let data = t.data().iter().map(|v| (v.to_f64v() as f32).clamp(0.0, 1.0)).collect();
        Frame::new(w, h, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar values: all of R, then G, then B, each row-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 3, self.height, self.width], |i| T::from_f64v(self.data[i] as f64))
    }

    /// Circular shift: output pixel `(y, x)` takes input `(y - dy, x - dx)`.
    pub fn rolled(&self, dx: isize, dy: isize) -> Frame {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..h {
                let sy = (y - dy).rem_euclid(h);
                for x in 0..w {
                    let sx = (x - dx).rem_euclid(w);
                    data[((c * h + y) * w + x) as usize] = self.data[((c * h + sy) * w + sx) as usize];
                }
            }
        }
        Frame { width: self.width, height: self.height, data }
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// An ordered list of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    /// Informational only.
    pub fps: f32,
    frames: Vec<Frame>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("video", "a video needs at least one frame"))?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| !f.same_dims(first)) {
            return Err(Error::invalid(
                "video",
                format!(
                    "frame {i} is {}x{}, frame 0 is {}x{}",
                    f.width(),
                    f.height(),
                    first.width(),
                    first.height()
                ),
            ));
        }
        Ok(VideoSequence { id: id.into(), fps: 23.0, frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Frame::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Frame::new(1, 1, vec![0.0, 0.5, f32::NAN]).is_err());
        assert!(Frame::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let a = Frame::filled(4, 4, [0.0; 3]).unwrap();
        let b = Frame::filled(4, 5, [0.0; 3]).unwrap();
        assert!(VideoSequence::new("v", vec![a.clone(), b]).is_err());
        assert!(VideoSequence::new("v", vec![]).is_err());
        assert_eq!(VideoSequence::new("v", vec![a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn roll_wraps_around() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let f = Frame::new(4, 1, data).unwrap();
        let r = f.rolled(1, 0);
        assert_eq!(r.get(0, 0, 0), f.get(0, 0, 3));
        assert_eq!(r.get(2, 0, 2), f.get(2, 0, 1));
        assert_eq!(f.rolled(4, 0), f);
    }
}
