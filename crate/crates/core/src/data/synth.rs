//! Procedural 10-class grayscale image set ("shapes10") for desk-scale
//! streams: parametric textures and shapes with per-sample jitter in
//! phase, geometry, contrast and noise, so a handful of stored exemplars
//! does not cover a class but a few dozen recalls do.

use crate::rng::{substream, Stream};
use rand::Rng;

pub const SHAPES10_CLASSES: [&str; 10] = [
    "h-stripes",
    "v-stripes",
    "d-stripes",
    "checker",
    "disk",
    "ring",
    "cross",
    "radial",
    "corner-gradient",
    "triangle",
];

/// Returns (train_pixels, train_labels, test_pixels, test_labels) with
/// pixels as u8 grayscale, samples grouped by class.
pub fn generate_shapes10(
    per_class_train: usize,
    per_class_test: usize,
    hw: usize,
    seed: u64,
) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut train_pixels = Vec::with_capacity(10 * per_class_train * hw * hw);
    let mut train_labels = Vec::with_capacity(10 * per_class_train);
    let mut test_pixels = Vec::with_capacity(10 * per_class_test * hw * hw);
    let mut test_labels = Vec::with_capacity(10 * per_class_test);
    for class in 0..10u8 {
        for i in 0..per_class_train {
            let salt = (class as u64) << 32 | i as u64;
            let mut rng = substream(seed, Stream::DataGen, salt);
            train_pixels.extend(render(class, hw, &mut rng));
            train_labels.push(class);
        }
        for i in 0..per_class_test {
            let salt = (class as u64) << 32 | (1u64 << 24) | i as u64;
            let mut rng = substream(seed, Stream::DataGen, salt);
            test_pixels.extend(render(class, hw, &mut rng));
            test_labels.push(class);
        }
    }
    (train_pixels, train_labels, test_pixels, test_labels)
}

fn render(class: u8, hw: usize, rng: &mut impl Rng) -> Vec<u8> {
    let n = hw as f64;
    let lo = rng.gen_range(0.05..0.25);
    let hi = rng.gen_range(0.7..0.95);
    let noise_sigma = 0.06;
    let brightness = rng.gen_range(-0.06..0.06);

    let field: Box<dyn Fn(f64, f64) -> f64> = match class {
        0 | 1 | 2 => {
            let period = rng.gen_range(4.0..9.0);
            let phase = rng.gen_range(0.0..period);
            let angle: f64 = match class {
                0 => 0.0,
                1 => std::f64::consts::FRAC_PI_2,
                _ => std::f64::consts::FRAC_PI_4 * if rng.gen_bool(0.5) { 1.0 } else { 3.0 },
            };
            let (c, s) = (angle.cos(), angle.sin());
            Box::new(move |x, y| {
                let t = (x * s + y * c + phase) / period;
                if (t.rem_euclid(1.0)) < 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        3 => {
            let cell = rng.gen_range(4.0..9.0);
            let px = rng.gen_range(0.0..cell);
            let py = rng.gen_range(0.0..cell);
            Box::new(move |x, y| {
                let cx = ((x + px) / cell).floor() as i64;
                let cy = ((y + py) / cell).floor() as i64;
                if (cx + cy) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        4 => {
            let cx = n / 2.0 + rng.gen_range(-0.18 * n..0.18 * n);
            let cy = n / 2.0 + rng.gen_range(-0.18 * n..0.18 * n);
            let r = rng.gen_range(0.2 * n..0.36 * n);
            Box::new(move |x, y| {
                if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < r {
                    1.0
                } else {
                    0.0
                }
            })
        }
        5 => {
            let cx = n / 2.0 + rng.gen_range(-0.12 * n..0.12 * n);
            let cy = n / 2.0 + rng.gen_range(-0.12 * n..0.12 * n);
            let r = rng.gen_range(0.24 * n..0.4 * n);
            let th = rng.gen_range(0.06 * n..0.12 * n);
            Box::new(move |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                if (d - r).abs() < th / 2.0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        6 => {
            let cx = n / 2.0 + rng.gen_range(-0.15 * n..0.15 * n);
            let cy = n / 2.0 + rng.gen_range(-0.15 * n..0.15 * n);
            let bw = rng.gen_range(0.08 * n..0.16 * n);
            Box::new(move |x, y| {
                if (x - cx).abs() < bw / 2.0 || (y - cy).abs() < bw / 2.0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        7 => {
            let cx = n / 2.0 + rng.gen_range(-0.2 * n..0.2 * n);
            let cy = n / 2.0 + rng.gen_range(-0.2 * n..0.2 * n);
            let scale = rng.gen_range(0.5 * n..0.9 * n);
            Box::new(move |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (1.0 - d / scale).clamp(0.0, 1.0)
            })
        }
        8 => {
            let corner = rng.gen_range(0..4u8);
            let (ox, oy) = match corner {
                0 => (0.0, 0.0),
                1 => (n, 0.0),
                2 => (0.0, n),
                _ => (n, n),
            };
            let scale = 1.42 * n;
            Box::new(move |x, y| {
                let d = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
                (d / scale).clamp(0.0, 1.0)
            })
        }
        _ => {
            // filled triangle: apex near the top, base near the bottom,
            // with jittered vertices
            let ax = n * rng.gen_range(0.3..0.7);
            let ay = n * rng.gen_range(0.08..0.25);
            let bx = n * rng.gen_range(0.05..0.4);
            let by = n * rng.gen_range(0.7..0.95);
            let cx = n * rng.gen_range(0.6..0.95);
            let cy = n * rng.gen_range(0.7..0.95);
            Box::new(move |x, y| {
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2);
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                if !(has_neg && has_pos) {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };

    let mut out = Vec::with_capacity(hw * hw);
    for yi in 0..hw {
        for xi in 0..hw {
            let v = field(xi as f64 + 0.5, yi as f64 + 0.5);
            let base = lo + (hi - lo) * v + brightness;
            // Box-Muller gaussian noise
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let px = (base + noise_sigma * g).clamp(0.0, 1.0);
            out.push((px * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_correctly_sized() {
        let (tp, tl, vp, vl) = generate_shapes10(3, 2, 16, 7);
        assert_eq!(tp.len(), 10 * 3 * 256);
        assert_eq!(tl.len(), 30);
        assert_eq!(vp.len(), 10 * 2 * 256);
        assert_eq!(vl.len(), 20);
        let (tp2, ..) = generate_shapes10(3, 2, 16, 7);
        assert_eq!(tp, tp2);
        let (tp3, ..) = generate_shapes10(3, 2, 16, 8);
        assert_ne!(tp, tp3);
    }

    #[test]
    fn train_and_test_draws_differ() {
        let (tp, _, vp, _) = generate_shapes10(1, 1, 16, 7);
        assert_ne!(tp, vp);
    }

    #[test]
    fn classes_have_distinct_means() {
        // sanity: different classes produce visibly different images
        let (tp, tl, _, _) = generate_shapes10(8, 0, 32, 3);
        let per = 32 * 32;
        let mut means = vec![0.0f64; 10];
        for (i, &l) in tl.iter().enumerate() {
            let m: f64 = tp[i * per..(i + 1) * per].iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            means[l as usize] += m / 8.0;
        }
        // radial/gradient classes differ strongly from stripe classes
        assert!((means[0] - means[8]).abs() > 5.0 || (means[4] - means[7]).abs() > 5.0);
    }
}
