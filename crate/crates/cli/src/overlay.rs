//! Attention overlays: the input image upscaled, with sampling locations and
//! reference points drawn on top.

use std::path::Path;

use mstr_core::features::NormalizedPoint;
use mstr_core::model::{AttentionRecord, SamplingPath};
use mstr_core::numerics::Tensor;
use mstr_core::synth::write_ppm;
use mstr_core::Result;

pub type Rgb = [u8; 3];

pub const HUMAN_SAMPLE: Rgb = [255, 40, 40];
pub const OBJECT_SAMPLE: Rgb = [40, 110, 255];
pub const CONTEXT_SAMPLE: Rgb = [40, 220, 40];
pub const SINGLE_SAMPLE: Rgb = [255, 220, 0];
pub const HUMAN_REF: Rgb = [255, 170, 170];
pub const OBJECT_REF: Rgb = [170, 200, 255];
pub const CONTEXT_REF: Rgb = [255, 255, 255];

pub fn sample_color(path: SamplingPath) -> Rgb {
    match path {
        SamplingPath::Human => HUMAN_SAMPLE,
        SamplingPath::Object => OBJECT_SAMPLE,
        SamplingPath::Context => CONTEXT_SAMPLE,
        SamplingPath::Single => SINGLE_SAMPLE,
    }
}

/// Continuous canvas position of a normalized point: `(x·W, y·H)`.
pub fn marker_position(p: NormalizedPoint, width: usize, height: usize) -> (f64, f64) {
    (p.x * width as f64, p.y * height as f64)
}

/// Pixel containing a continuous canvas position, if on the canvas.
pub fn pixel_of((x, y): (f64, f64), width: usize, height: usize) -> Option<(usize, usize)> {
    let (px, py) = (x.floor(), y.floor());
    if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
        return None;
    }
    Some((px as usize, py as usize))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    /// Nearest-neighbour upscale of a `[1, H, W]` image, dimmed so the
    /// markers stand out.
    pub fn from_image(image: &Tensor, scale: usize) -> Self {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (width, height) = (w * scale, h * scale);
        let mut rgb = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let v = image.data()[(y / scale) * w + x / scale].clamp(0.0, 1.0);
                let b = (v * 140.0).round() as u8;
                rgb.extend_from_slice(&[b, b, b]);
            }
        }
        Self { width, height, rgb }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Filled square of side `2r + 1` centered on `p`.
    pub fn square(&mut self, p: (f64, f64), r: i64, c: Rgb) {
        let (cx, cy) = (p.0.floor() as i64, p.1.floor() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(cx + dx, cy + dy, c);
            }
        }
    }

    /// Plus sign with arms of length `r` centered on `p`.
    pub fn cross(&mut self, p: (f64, f64), r: i64, c: Rgb) {
        let (cx, cy) = (p.0.floor() as i64, p.1.floor() as i64);
        for d in -r..=r {
            self.put(cx + d, cy, c);
            self.put(cx, cy + d, c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_ppm(path, self.width, self.height, &self.rgb)
    }
}

/// Overlay of the samples of one pyramid level (1-based) and all reference
/// points. Samples are drawn first so references stay visible.
pub fn render_level(image: &Tensor, scale: usize, record: &AttentionRecord, level: usize) -> Canvas {
    let mut canvas = Canvas::from_image(image, scale);
    let (w, h) = (canvas.width, canvas.height);
    for path in &record.paths {
        let color = sample_color(path.path);
        for s in path.samples.iter().filter(|s| s.level == level) {
            canvas.square(marker_position(NormalizedPoint { x: s.x, y: s.y }, w, h), 1, color);
        }
    }
    canvas.cross(marker_position(record.human_ref, w, h), 3, HUMAN_REF);
    canvas.cross(marker_position(record.object_ref, w, h), 3, OBJECT_REF);
    if let Some(c) = record.context_ref {
        canvas.cross(marker_position(c, w, h), 3, CONTEXT_REF);
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_replicates_pixels() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let c = Canvas::from_image(&img, 3);
        assert_eq!((c.width, c.height), (6, 6));
        assert_eq!(c.get(0, 0), [0, 0, 0]);
        assert_eq!(c.get(5, 2), [140, 140, 140]);
        assert_eq!(c.get(2, 3), [70, 70, 70]);
        assert_eq!(c.get(3, 3), [35, 35, 35]);
    }

    #[test]
    fn markers_clip_at_edges() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let mut c = Canvas::from_image(&img, 2);
        c.square((0.0, 0.0), 1, [9, 9, 9]);
        c.cross((3.5, 3.5), 3, [7, 7, 7]);
        assert_eq!(c.get(1, 1), [9, 9, 9]);
        assert_eq!(c.get(3, 0), [7, 7, 7]);
        assert_eq!(c.get(2, 2), [0, 0, 0]);
    }

    #[test]
    fn pixel_of_examples() {
        assert_eq!(pixel_of((0.0, 0.0), 4, 4), Some((0, 0)));
        assert_eq!(pixel_of((3.99, 1.5), 4, 4), Some((3, 1)));
        assert_eq!(pixel_of((4.0, 1.0), 4, 4), None);
        assert_eq!(pixel_of((-0.1, 1.0), 4, 4), None);
    }

    #[test]
    fn colors_are_distinct() {
        let all = [HUMAN_SAMPLE, OBJECT_SAMPLE, CONTEXT_SAMPLE, SINGLE_SAMPLE, HUMAN_REF, OBJECT_REF, CONTEXT_REF];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
