//! Seeded procedural test scenes: smooth gradients, flat shapes with hard
//! edges and oriented sinusoidal texture, roughly the mix of structure found
//! in natural photographs. Used for calibration, smoke training and tests
//! where no image corpus is available.

use rand::Rng;

use crate::image::{Image, RangeTag};
use crate::rng::{derive_seed, stream};

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Stripes { fy: f32, fx: f32, phase: f32, cy: f32, cx: f32, r: f32 },
}

struct Layer {
    shape: Shape,
    color: [f32; 3],
    amplitude: f32,
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One `height × width` scene in unit range, fully determined by `seed`.
pub fn scene(height: usize, width: usize, channels: usize, seed: u64) -> Image {
    let mut rng = stream(seed, 0);
    let (h, w) = (height as f32, width as f32);
    let base = color(&mut rng);
    let tilt = color(&mut rng).map(|c| c - 0.5);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let count = rng.random_range(6..12);
    let layers: Vec<Layer> = (0..count)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    r: rng.random_range(0.05..0.3) * h.min(w),
                },
                1 => {
                    let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                    Shape::Rect {
                        y0,
                        x0,
                        y1: y0 + rng.random_range(0.1..0.5) * h,
                        x1: x0 + rng.random_range(0.1..0.5) * w,
                    }
                }
                _ => {
                    let period = rng.random_range(3.0f32..16.0);
                    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    Shape::Stripes {
                        fy: theta.sin() / period,
                        fx: theta.cos() / period,
                        phase: rng.random_range(0.0..std::f32::consts::TAU),
                        cy: rng.random_range(0.0..h),
                        cx: rng.random_range(0.0..w),
                        r: rng.random_range(0.15..0.4) * h.min(w),
                    }
                }
            };
            Layer {
                shape,
                color: color(&mut rng),
                amplitude: rng.random_range(0.1..0.3),
            }
        })
        .collect();

    let rgb = Image::from_fn(height, width, 3, RangeTag::Unit, |y, x, c| {
        let (fy, fx) = (y as f32 / h - 0.5, x as f32 / w - 0.5);
        let mut v = base[c] * 0.6 + 0.2 + tilt[c] * (ga * fx + gb * fy);
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        for layer in &layers {
            match layer.shape {
                Shape::Disc { cy, cx, r } => {
                    if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                        v = layer.color[c];
                    }
                }
                Shape::Rect { y0, x0, y1, x1 } => {
                    if (y0..y1).contains(&py) && (x0..x1).contains(&px) {
                        v = layer.color[c];
                    }
                }
                Shape::Stripes { fy, fx, phase, cy, cx, r } => {
                    if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                        let s = (std::f32::consts::TAU * (fy * py + fx * px) + phase).sin();
                        v += layer.amplitude * s * (layer.color[c] - 0.5) * 2.0;
                    }
                }
            }
        }
        v.clamp(0.0, 1.0)
    });
    if channels == 1 {
        rgb.to_gray()
    } else {
        rgb
    }
}

/// `count` distinct scenes derived from `seed`.
pub fn scene_set(count: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| scene(height, width, channels, derive_seed(seed, &[i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_distinct_and_in_range() {
        let a = scene(48, 40, 3, 1);
        assert_eq!(a, scene(48, 40, 3, 1));
        assert_ne!(a, scene(48, 40, 3, 2));
        assert_eq!((a.height(), a.width(), a.channels()), (48, 40, 3));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let g = scene(16, 16, 1, 1);
        assert_eq!(g.channels(), 1);
    }

    #[test]
    fn scenes_are_not_flat() {
        let img = scene(64, 64, 3, 9);
        let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
        let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / img.data().len() as f32;
        assert!(var > 1e-3, "variance {var}");
    }
}
