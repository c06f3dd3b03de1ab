//! Seeded synthetic scenes with natural-image statistics (dead-leaves model).
//!
//! Opaque shapes with radii drawn from a `r^-3` density are stacked back to
//! front. The model is approximately scale invariant, so a downscaled copy
//! looks statistically like a crop, which is what multiscale pairs need.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::imgio::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub width: usize,
    pub height: usize,
    /// Smallest and largest leaf radius in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Expected number of times each pixel is painted.
    pub coverage: f64,
    pub seed: u64,
}

impl TextureParams {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            min_radius: 2.0,
            max_radius: width.max(height) as f64 / 6.0,
            coverage: 4.0,
            seed,
        }
    }
}

fn unit(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Rect { aspect: f64 },
    Ellipse { aspect: f64, cos: f64, sin: f64 },
}

impl Shape {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Rect { aspect } => dx.abs() <= r && dy.abs() <= r * aspect,
            Shape::Ellipse { aspect, cos, sin } => {
                let u = cos * dx + sin * dy;
                let v = (-sin * dx + cos * dy) / aspect;
                u * u + v * v <= r * r
            }
        }
    }
}

/// Renders a 3-channel dead-leaves image.
pub fn dead_leaves(p: &TextureParams) -> Result<ImageBuffer> {
    let valid = p.width > 0
        && p.height > 0
        && p.min_radius > 0.0
        && p.max_radius >= p.min_radius
        && p.coverage > 0.0;
    if !valid {
        return Err(Error::Argument(format!("invalid texture parameters {p:?}")));
    }
    let (w, h) = (p.width, p.height);
    let mut rng = Xoshiro256StarStar::seed_from_u64(p.seed);
    let mut data = vec![0f32; w * h * 3];
    let bg = [unit(&mut rng), unit(&mut rng), unit(&mut rng)];
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = bg[c] as f32;
        }
    }
    let (r0, r1) = (p.min_radius, p.max_radius);
    let q = (r0 / r1).powi(2);
    // Mean of r^2 under the r^-3 density on [r0, r1].
    let mean_r2 = if r1 > r0 {
        2.0 * r0 * r0 * (r1 / r0).ln() / (1.0 - q)
    } else {
        r0 * r0
    };
    // Shapes overhang the border by up to r1 on each side.
    let (aw, ah) = (w as f64 + 2.0 * r1, h as f64 + 2.0 * r1);
    let count = (p.coverage * aw * ah / (std::f64::consts::PI * mean_r2)).ceil() as usize;
    for _ in 0..count {
        let r = r0 / (1.0 - unit(&mut rng) * (1.0 - q)).sqrt();
        let cx = unit(&mut rng) * aw - r1;
        let cy = unit(&mut rng) * ah - r1;
        let shape = match rng.next_u32() % 3 {
            0 => Shape::Disk,
            1 => Shape::Rect {
                aspect: 0.4 + 1.2 * unit(&mut rng),
            },
            _ => {
                let a = std::f64::consts::PI * unit(&mut rng);
                Shape::Ellipse {
                    aspect: 0.3 + 0.7 * unit(&mut rng),
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
        };
        let color = [unit(&mut rng) as f32, unit(&mut rng) as f32, unit(&mut rng) as f32];
        let reach = r * 1.7;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w);
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            let dy = y as f64 - cy;
            for x in x0..x1 {
                if shape.contains(x as f64 - cx, dy, r) {
                    data[(y * w + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    ImageBuffer::new(w, h, 3, data)
}

/// Dead-leaves texture with default statistics for a `width x height` frame.
pub fn natural_texture(width: usize, height: usize, seed: u64) -> Result<ImageBuffer> {
    dead_leaves(&TextureParams::new(width, height, seed))
}
