//! Procedural synthetic images: gradient-and-shape "content" images and
//! periodic-texture "style" images. Every image is a pure function of
//! (kind, index, seed), so datasets are bit-reproducible.

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    /// Smooth gradient background with a few filled shapes.
    Content,
    /// Stripes, checkerboards, or value noise with a random palette.
    Style,
}

impl std::str::FromStr for ImageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(ImageKind::Content),
            "style" => Ok(ImageKind::Style),
            other => Err(Error::Parse {
                what: "image kind",
                detail: format!("unsupported kind {other:?} (content|style)"),
            }),
        }
    }
}

/// Deterministic batch of procedural images.
pub fn gen_synthetic(kind: ImageKind, n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::invalid("gen_synthetic: n must be at least 1"));
    }
    let base = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = base.derive(kind_label(kind) ^ (i as u64) << 8);
            match kind {
                ImageKind::Content => content_image(size, &mut rng),
                ImageKind::Style => style_image(size, &mut rng),
            }
        })
        .collect()
}

fn kind_label(kind: ImageKind) -> u64 {
    match kind {
        ImageKind::Content => 0xC0,
        ImageKind::Style => 0x57,
    }
}

fn rand_color(rng: &mut Rng) -> [f64; 3] {
    [rng.next_f64(), rng.next_f64(), rng.next_f64()]
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn content_image(size: usize, rng: &mut Rng) -> Result<Image> {
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let (gx, gy) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));

    enum Shape {
        Circle { cx: f64, cy: f64, r: f64, color: [f64; 3] },
        Rect { x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3] },
        Triangle { v: [(f64, f64); 3], color: [f64; 3] },
    }

    let s = size as f64;
    let n_shapes = rng.range_inclusive(2, 4);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| match rng.below(3) {
            0 => Shape::Circle {
                cx: rng.uniform(0.2, 0.8) * s,
                cy: rng.uniform(0.2, 0.8) * s,
                r: rng.uniform(0.1, 0.3) * s,
                color: rand_color(rng),
            },
            1 => {
                let (ax, bx) = (rng.uniform(0.0, 1.0) * s, rng.uniform(0.0, 1.0) * s);
                let (ay, by) = (rng.uniform(0.0, 1.0) * s, rng.uniform(0.0, 1.0) * s);
                Shape::Rect {
                    x0: ax.min(bx),
                    y0: ay.min(by),
                    x1: ax.max(bx),
                    y1: ay.max(by),
                    color: rand_color(rng),
                }
            }
            _ => Shape::Triangle {
                v: [
                    (rng.next_f64() * s, rng.next_f64() * s),
                    (rng.next_f64() * s, rng.next_f64() * s),
                    (rng.next_f64() * s, rng.next_f64() * s),
                ],
                color: rand_color(rng),
            },
        })
        .collect();

    let in_triangle = |v: &[(f64, f64); 3], x: f64, y: f64| -> bool {
        let sign = |a: (f64, f64), b: (f64, f64)| (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1);
        let d1 = sign(v[0], v[1]);
        let d2 = sign(v[1], v[2]);
        let d3 = sign(v[2], v[0]);
        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(has_neg && has_pos)
    };

    let mut planes = vec![0.0; 3 * size * size];
    let denom = (gx.abs() + gy.abs()).max(1e-9);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 / (s - 1.0).max(1.0), y as f64 / (s - 1.0).max(1.0));
            let t = ((gx * xf + gy * yf) / denom + 1.0) / 2.0;
            let mut color = lerp3(c0, c1, t.clamp(0.0, 1.0));
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for shape in &shapes {
                match shape {
                    Shape::Circle { cx, cy, r, color: c } => {
                        if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                            color = *c;
                        }
                    }
                    Shape::Rect { x0, y0, x1, y1, color: c } => {
                        if px >= *x0 && px <= *x1 && py >= *y0 && py <= *y1 {
                            color = *c;
                        }
                    }
                    Shape::Triangle { v, color: c } => {
                        if in_triangle(v, px, py) {
                            color = *c;
                        }
                    }
                }
            }
            for ch in 0..3 {
                planes[ch * size * size + y * size + x] = color[ch];
            }
        }
    }
    Image::from_unit_pixels(size, size, planes)
}

fn style_image(size: usize, rng: &mut Rng) -> Result<Image> {
    let palette = [rand_color(rng), rand_color(rng), rand_color(rng)];
    let s = size as f64;
    let mut planes = vec![0.0; 3 * size * size];

    let pattern = rng.below(3);
    match pattern {
        0 => {
            // Stripes at a random angle and frequency.
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let freq = rng.uniform(2.0, 6.0);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * dx + y as f64 * dy) / s;
                    let phase = (u * freq).fract();
                    let color = if phase < 0.5 { palette[0] } else { palette[1] };
                    put(&mut planes, size, x, y, color);
                }
            }
        }
        1 => {
            // Checkerboard.
            let cell = [4usize, 8, 16][rng.below(3)].min(size / 2).max(1);
            for y in 0..size {
                for x in 0..size {
                    let color = palette[(x / cell + y / cell) % 2];
                    put(&mut planes, size, x, y, color);
                }
            }
        }
        _ => {
            // Bilinear value noise through a 3-color palette.
            let cells = 4usize;
            let lattice = Rng::new(rng.next_u64());
            let val = |i: usize, j: usize| lattice.derive((i as u64) << 32 | j as u64).next_f64();
            let step = s / cells as f64;
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / step, y as f64 / step);
                    let (i, j) = (u as usize, v as usize);
                    let (fu, fv) = (u - i as f64, v - j as f64);
                    let n = val(i, j) * (1.0 - fu) * (1.0 - fv)
                        + val(i + 1, j) * fu * (1.0 - fv)
                        + val(i, j + 1) * (1.0 - fu) * fv
                        + val(i + 1, j + 1) * fu * fv;
                    let color = if n < 0.5 {
                        lerp3(palette[0], palette[1], n * 2.0)
                    } else {
                        lerp3(palette[1], palette[2], n * 2.0 - 1.0)
                    };
                    put(&mut planes, size, x, y, color);
                }
            }
        }
    }
    Image::from_unit_pixels(size, size, planes)
}

fn put(planes: &mut [f64], size: usize, x: usize, y: usize, color: [f64; 3]) {
    for ch in 0..3 {
        planes[ch * size * size + y * size + x] = color[ch].clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        for kind in [ImageKind::Content, ImageKind::Style] {
            let a = gen_synthetic(kind, 3, 32, 99).unwrap();
            let b = gen_synthetic(kind, 3, 32, 99).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let (xv, yv) = (x.tensor().to_vec(), y.tensor().to_vec());
                for (p, q) in xv.iter().zip(&yv) {
                    assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = gen_synthetic(ImageKind::Style, 1, 32, 1).unwrap();
        let b = gen_synthetic(ImageKind::Style, 1, 32, 2).unwrap();
        assert_ne!(a[0].tensor().to_vec(), b[0].tensor().to_vec());
    }

    #[test]
    fn single_image_with_configured_size() {
        let imgs = gen_synthetic(ImageKind::Content, 1, 48, 5).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!((imgs[0].height(), imgs[0].width()), (48, 48));
        assert!(gen_synthetic(ImageKind::Content, 0, 48, 5).is_err());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for kind in [ImageKind::Content, ImageKind::Style] {
            for seed in 0..4 {
                let imgs = gen_synthetic(kind, 2, 24, seed).unwrap();
                for img in imgs {
                    assert!(img.tensor().to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
