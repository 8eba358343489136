//! Fixed-resolution frame sequences and their on-disk layout: a directory of
//! zero-padded numbered PNG frames (`000000.png`, `000001.png`, ...).

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{CoreError, Result};

/// A frame sequence with pixel values in `[0, 1]`, stored `[F, H, W, C]`
/// row-major. The unit of ingestion, editing and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    id: String,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    fps: f64,
    data: Vec<f32>,
}

/// Borrowed view of one frame, `[H, W, C]` row-major.
#[derive(Clone, Copy, Debug)]
pub struct FrameView<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: &'a [f32],
}

impl<'a> FrameView<'a> {
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

impl VideoClip {
    pub fn new(
        id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        fps: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if frames < 2 {
            return Err(CoreError::Validation(format!(
                "a clip needs at least 2 frames, got {frames}"
            )));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(CoreError::Validation(
                "frame dimensions must be positive".into(),
            ));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(CoreError::Validation(format!("fps must be positive, got {fps}")));
        }
        if data.len() != frames * height * width * channels {
            return Err(CoreError::Shape(format!(
                "frame buffer length {} does not match {}x{}x{}x{}",
                data.len(),
                frames,
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Validation(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(VideoClip {
            id: id.into(),
            frames,
            height,
            width,
            channels,
            fps,
            data,
        })
    }

    /// Build a clip by evaluating `f(frame, y, x, c)`; values are clamped to
    /// `[0, 1]`.
    pub fn from_fn(
        id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        fps: f64,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * channels);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(f(t, y, x, c).clamp(0.0, 1.0));
                    }
                }
            }
        }
        VideoClip::new(id, frames, height, width, channels, fps, data)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> FrameView<'_> {
        let stride = self.height * self.width * self.channels;
        FrameView {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: &self.data[t * stride..(t + 1) * stride],
        }
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Load a clip from a directory of numbered PNG frames.
    pub fn load_dir(dir: &Path, id: impl Into<String>, fps: f64) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| CoreError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        paths.sort();
        if paths.len() < 2 {
            return Err(CoreError::Ingestion(format!(
                "{} holds {} PNG frames, need at least 2",
                dir.display(),
                paths.len()
            )));
        }
        let mut data = Vec::new();
        let mut dims: Option<(usize, usize, usize)> = None;
        for path in &paths {
            let img = ImageReader::open(path)
                .map_err(|e| CoreError::io(path, e))?
                .decode()
                .map_err(|e| CoreError::Ingestion(format!("{}: {e}", path.display())))?;
            let (h, w, c, pixels): (usize, usize, usize, Vec<f32>) = match img {
                DynamicImage::ImageLuma8(g) => {
                    let (w, h) = (g.width() as usize, g.height() as usize);
                    (h, w, 1, g.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
                }
                other => {
                    let rgb = other.to_rgb8();
                    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                    (h, w, 3, rgb.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
                }
            };
            match dims {
                None => dims = Some((h, w, c)),
                Some(d) if d == (h, w, c) => {}
                Some(d) => {
                    return Err(CoreError::Ingestion(format!(
                        "{}: frame size {:?} differs from first frame {:?}",
                        path.display(),
                        (h, w, c),
                        d
                    )))
                }
            }
            data.extend(pixels);
        }
        let (h, w, c) = dims.unwrap();
        VideoClip::new(id, paths.len(), h, w, c, fps, data)
    }

    /// Write the clip as numbered PNG frames; creates the directory.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        for t in 0..self.frames {
            let path = dir.join(format!("{t:06}.png"));
            let view = self.frame(t);
            let quant = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            let save = match self.channels {
                1 => {
                    let buf: Vec<u8> = view.data.iter().map(|&v| quant(v)).collect();
                    GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                        .expect("gray buffer size")
                        .save(&path)
                }
                3 => {
                    let buf: Vec<u8> = view.data.iter().map(|&v| quant(v)).collect();
                    RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                        .expect("rgb buffer size")
                        .save(&path)
                }
                c => {
                    return Err(CoreError::Validation(format!(
                        "cannot write {c}-channel frames as PNG (1 or 3 supported)"
                    )))
                }
            };
            save.map_err(|e| CoreError::Ingestion(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_frame() {
        assert!(matches!(
            VideoClip::new("x", 1, 2, 2, 1, 8.0, vec![0.0; 4]),
            Err(CoreError::Validation(_))
        ));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut data = vec![0.5; 8];
        data[3] = 1.5;
        assert!(matches!(
            VideoClip::new("x", 2, 2, 1, 2, 8.0, data),
            Err(CoreError::Validation(_))
        ));
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let clip = VideoClip::from_fn("rt", 3, 6, 5, 1, 8.0, |t, y, x, _| {
            ((t + y + x) % 7) as f32 / 7.0
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        clip.save_dir(dir.path()).unwrap();
        let loaded = VideoClip::load_dir(dir.path(), "rt", 8.0).unwrap();
        assert_eq!(loaded.frames(), 3);
        assert_eq!((loaded.height(), loaded.width(), loaded.channels()), (6, 5, 1));
        for (a, b) in clip.data().iter().zip(loaded.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
