//! Paired geometric augmentation and per-image colour jitter.
//!
//! One inverse affine map (rotation, scale, translation, mirror) followed by a
//! crop from a reflect-padded frame is applied to every raster of a sample:
//! bilinear for images, nearest neighbour for label maps.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::config::AugmentConfig;
use crate::dataset::PatchSample;

/// Destination pixel → source coordinate in the original patch frame.
#[derive(Debug, Clone, Copy)]
struct Warp {
    cos: f64,
    sin: f64,
    inv_scale: f64,
    shift: (f64, f64),
    offset: (f64, f64),
    mirror: bool,
    center: (f64, f64),
}

impl Warp {
    fn identity(offset: (f64, f64), center: (f64, f64)) -> Self {
        Self {
            cos: 1.0,
            sin: 0.0,
            inv_scale: 1.0,
            shift: (0.0, 0.0),
            offset,
            mirror: false,
            center,
        }
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (cy, cx) = self.center;
        let py = y as f64 + self.offset.0 - cy - self.shift.0;
        let px = x as f64 + self.offset.1 - cx - self.shift.1;
        let sy = cy + self.inv_scale * (self.cos * py - self.sin * px);
        let mut sx = cx + self.inv_scale * (self.sin * py + self.cos * px);
        if self.mirror {
            sx = 2.0 * cx - sx;
        }
        (sy, sx)
    }
}

/// Reflect (without repeating the edge) into `[0, n-1]`.
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn warp_image(img: &Array3<f32>, warp: &Warp, out: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut res = Array3::<f32>::zeros((c, out, out));
    for y in 0..out {
        for x in 0..out {
            let (sy, sx) = warp.source(y, x);
            let (sy, sx) = (reflect(sy, h), reflect(sx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bottom = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                res[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    res
}

fn warp_labels<T: Copy + Default>(labels: &Array2<T>, warp: &Warp, out: usize) -> Array2<T> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out, out), |(y, x)| {
        let (sy, sx) = warp.source(y, x);
        let sy = reflect(sy, h).round() as usize;
        let sx = reflect(sx, w).round() as usize;
        labels[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Brightness, contrast and saturation factors drawn from `1 ± jitter`.
fn color_jitter<R: Rng>(img: &mut Array3<f32>, jitter: f64, rng: &mut R) {
    if jitter <= 0.0 {
        return;
    }
    let mut factor = || 1.0 + rng.random_range(-jitter..=jitter) as f32;
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    img.mapv_inplace(|v| v * brightness);
    let mean = img.mean().unwrap_or(0.0);
    img.mapv_inplace(|v| (v - mean) * contrast + mean);
    let (c, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let gray = (0..c).map(|ch| img[[ch, y, x]]).sum::<f32>() / c as f32;
            for ch in 0..c {
                let v = img[[ch, y, x]];
                img[[ch, y, x]] = (gray + (v - gray) * saturation).clamp(0.0, 1.0);
            }
        }
    }
}

/// Augment `sample` and cut a random `crop`×`crop` window. With augmentation
/// disabled and `crop` equal to the patch size this is the identity.
pub fn augment<R: Rng>(sample: &PatchSample, cfg: &AugmentConfig, crop: usize, rng: &mut R) -> PatchSample {
    let (_, h, w) = sample.image_t0.dim();
    assert!(crop <= h && crop <= w, "crop {crop} exceeds {h}x{w} patch");
    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let warp = if cfg.enabled {
        let pad = cfg.pad_reflect as f64;
        let offset = (
            rng.random_range(0.0..=(h - crop) as f64 + 2.0 * pad).floor() - pad,
            rng.random_range(0.0..=(w - crop) as f64 + 2.0 * pad).floor() - pad,
        );
        let theta = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
        let scale = 1.0 + rng.random_range(-cfg.scale..=cfg.scale);
        Warp {
            cos: theta.cos(),
            sin: theta.sin(),
            inv_scale: 1.0 / scale,
            shift: (
                rng.random_range(-cfg.translate..=cfg.translate) * h as f64,
                rng.random_range(-cfg.translate..=cfg.translate) * w as f64,
            ),
            offset,
            mirror: cfg.mirror && rng.random_bool(0.5),
            center,
        }
    } else {
        let offset = (rng.random_range(0..=h - crop) as f64, rng.random_range(0..=w - crop) as f64);
        Warp::identity(offset, center)
    };
    let mut image_t0 = warp_image(&sample.image_t0, &warp, crop);
    let mut image_t1 = sample.image_t1.as_ref().map(|i| warp_image(i, &warp, crop));
    if cfg.enabled {
        color_jitter(&mut image_t0, cfg.color_jitter, rng);
        if let Some(img) = image_t1.as_mut() {
            color_jitter(img, cfg.color_jitter, rng);
        }
    }
    let change_mask = warp_labels(&sample.change_mask, &warp, crop);
    PatchSample {
        meta: sample.meta.clone(),
        image_t0,
        image_t1,
        change_mask,
        first_change_month: warp_labels(&sample.first_change_month, &warp, crop),
    }
}
