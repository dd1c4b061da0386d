//! Deterministic procedural world for desk-scale runs.
//!
//! Each location is a textured landscape in which rectangular buildings
//! appear at sampled months. For `precursor_lead` months before a building
//! appears, its footprint shows a bare-earth "construction" texture, which is
//! the cue a single-image forecaster can learn. Decoy plots carry the same
//! texture but are never built on.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{LocationSeries, YearMonth};
use crate::error::{Error, Result};
use crate::rng::indexed_rng;

const EARTH: [f32; 3] = [0.58, 0.44, 0.30];
const VEGETATION: [f32; 3] = [0.24, 0.38, 0.20];
const PAVED: [f32; 3] = [0.42, 0.43, 0.40];
const ROOFS: [[f32; 3]; 4] = [
    [0.86, 0.86, 0.83],
    [0.72, 0.30, 0.25],
    [0.62, 0.64, 0.68],
    [0.93, 0.90, 0.78],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_locations: usize,
    pub height: usize,
    pub width: usize,
    /// Number of monthly acquisitions before gaps are applied.
    pub n_months: usize,
    pub start: YearMonth,
    /// Expected new buildings per megapixel per month.
    pub construction_rate: f64,
    /// Buildings already present at the first acquisition, per megapixel.
    pub initial_buildings: f64,
    /// Months of visible construction texture before a building appears.
    pub precursor_lead: u32,
    /// Never-built bare-earth plots per megapixel.
    pub decoy_rate: f64,
    /// Probability of dropping an interior month from the series.
    pub missing_month_prob: f64,
    pub building_min: usize,
    pub building_max: usize,
    pub noise: f32,
    pub continents: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_locations: 10,
            height: 448,
            width: 448,
            n_months: 25,
            start: YearMonth::new(2018, 1).expect("valid month"),
            construction_rate: 4.0,
            initial_buildings: 60.0,
            precursor_lead: 6,
            decoy_rate: 2.0,
            missing_month_prob: 0.0,
            building_min: 6,
            building_max: 16,
            noise: 0.03,
            continents: ["Africa", "Asia", "Europe", "NorthAmerica", "Oceania", "SouthAmerica"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_locations == 0 {
            return bad("n_locations must be positive");
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.n_months < 2 {
            return bad("need at least 2 months");
        }
        for (name, v) in [
            ("construction_rate", self.construction_rate),
            ("initial_buildings", self.initial_buildings),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.missing_month_prob) {
            return bad("missing_month_prob must be in [0, 1)");
        }
        if self.building_min == 0 || self.building_min > self.building_max {
            return bad("building size range must satisfy 1 <= min <= max");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise must be in [0, 0.5]");
        }
        if self.continents.is_empty() {
            return bad("continents must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn grown(&self, by: usize, h: usize, w: usize) -> Rect {
        let row = self.row.saturating_sub(by);
        let col = self.col.saturating_sub(by);
        Rect {
            row,
            col,
            height: (self.row + self.height + by).min(h) - row,
            width: (self.col + self.width + by).min(w) - col,
        }
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.height)
            .flat_map(move |r| (self.col..self.col + self.width).map(move |c| (r, c)))
    }
}

/// A building and the month offset (from the series start) it becomes visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub footprint: Rect,
    pub appears: i64,
    pub roof: [f32; 3],
}

/// Rendering-time record of one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTruth {
    pub sites: Vec<Site>,
    pub decoys: Vec<Rect>,
    pub precursor_lead: u32,
    pub height: usize,
    pub width: usize,
}

impl LocationTruth {
    fn precursor_rect(&self, site: &Site) -> Rect {
        site.footprint.grown(1, self.height, self.width)
    }

    /// Pixels rendered with construction texture at month offset `offset`
    /// (excluding pixels already covered by a building).
    pub fn precursor_mask(&self, offset: i64) -> Array2<u8> {
        let mut m = Array2::zeros((self.height, self.width));
        let lead = i64::from(self.precursor_lead);
        for site in &self.sites {
            if site.appears - lead <= offset && offset < site.appears {
                for (r, c) in self.precursor_rect(site).cells() {
                    m[[r, c]] = 1;
                }
            }
        }
        let built = self.builtup_mask(offset);
        m.zip_mut_with(&built, |p, &b| *p &= 1 - b);
        m
    }

    pub fn builtup_mask(&self, offset: i64) -> Array2<u8> {
        let mut m = Array2::zeros((self.height, self.width));
        for site in self.sites.iter().filter(|s| s.appears <= offset) {
            for (r, c) in site.footprint.cells() {
                m[[r, c]] = 1;
            }
        }
        m
    }
}

/// Generated series plus the bookkeeping used to render them.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub series: Vec<LocationSeries>,
    pub truth: Vec<LocationTruth>,
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<LocationSeries>> {
    Ok(synth_generate_with_truth(config, seed)?.series)
}

pub fn synth_generate_with_truth(config: &SynthConfig, seed: u64) -> Result<SynthWorld> {
    config.validate()?;
    let mut series = Vec::with_capacity(config.n_locations);
    let mut truth = Vec::with_capacity(config.n_locations);
    for loc in 0..config.n_locations {
        let (s, t) = generate_location(config, seed, loc)?;
        series.push(s);
        truth.push(t);
    }
    Ok(SynthWorld { series, truth })
}

fn random_rect(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Rect {
    let max_h = cfg.building_max.min(cfg.height);
    let max_w = cfg.building_max.min(cfg.width);
    let min_h = cfg.building_min.min(max_h);
    let min_w = cfg.building_min.min(max_w);
    let height = rng.random_range(min_h..=max_h);
    let width = rng.random_range(min_w..=max_w);
    Rect {
        row: rng.random_range(0..=cfg.height - height),
        col: rng.random_range(0..=cfg.width - width),
        height,
        width,
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Smooth field in [0, 1] from bilinear interpolation of a coarse random grid.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Array2<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random::<f32>());
    Array2::from_shape_fn((h, w), |(r, c)| {
        let y = r as f32 / cell as f32;
        let x = c as f32 / cell as f32;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x0 + 1]] * fx;
        let bottom = grid[[y0 + 1, x0]] * (1.0 - fx) + grid[[y0 + 1, x0 + 1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn generate_location(cfg: &SynthConfig, seed: u64, loc: usize) -> Result<(LocationSeries, LocationTruth)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = indexed_rng(seed, "synth/layout", loc as u64);

    // Acquisition calendar, with optional interior gaps.
    let offsets: Vec<i64> = (0..cfg.n_months as i64)
        .filter(|&k| k == 0 || k == cfg.n_months as i64 - 1 || rng.random::<f64>() >= cfg.missing_month_prob)
        .collect();
    let span = cfg.n_months as i64 - 1;

    let mpx = (h * w) as f64 / 1.0e6;
    let mut sites = Vec::new();
    for _ in 0..poisson(&mut rng, cfg.initial_buildings * mpx) {
        let footprint = random_rect(&mut rng, cfg);
        sites.push(Site {
            footprint,
            appears: i64::MIN / 4,
            roof: ROOFS[rng.random_range(0..ROOFS.len())],
        });
    }
    for _ in 0..poisson(&mut rng, cfg.construction_rate * mpx * span as f64) {
        let footprint = random_rect(&mut rng, cfg);
        sites.push(Site {
            footprint,
            appears: rng.random_range(1..=span),
            roof: ROOFS[rng.random_range(0..ROOFS.len())],
        });
    }
    let decoys: Vec<Rect> = (0..poisson(&mut rng, cfg.decoy_rate * mpx))
        .map(|_| random_rect(&mut rng, cfg).grown(1, h, w))
        .collect();

    let truth = LocationTruth {
        sites,
        decoys,
        precursor_lead: cfg.precursor_lead,
        height: h,
        width: w,
    };

    // Static ground texture shared by all months.
    let field = smooth_field(&mut rng, h, w, 48);
    let grain = Array2::from_shape_fn((h, w), |_| rng.random::<f32>() - 0.5);
    let earth_grain = Array2::from_shape_fn((h, w), |_| rng.random::<f32>() - 0.5);
    let mut background = Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let f = field[[r, c]];
                background[[ch, r, c]] =
                    VEGETATION[ch] * (1.0 - f) + PAVED[ch] * f + 2.0 * cfg.noise * grain[[r, c]];
            }
        }
    }

    let mut images = Vec::with_capacity(offsets.len());
    let mut masks = Vec::with_capacity(offsets.len());
    for &offset in &offsets {
        let mut mrng = indexed_rng(seed, &format!("synth/frame/{loc}"), offset as u64);
        let brightness = 1.0 + 0.03 * (mrng.random::<f32>() * 2.0 - 1.0);
        let mut frame = background.clone();

        let paint_earth = |frame: &mut Array3<f32>, rect: Rect| {
            for (r, c) in rect.cells() {
                for ch in 0..3 {
                    frame[[ch, r, c]] = EARTH[ch] + 3.0 * cfg.noise * earth_grain[[r, c]];
                }
            }
        };
        for rect in &truth.decoys {
            paint_earth(&mut frame, *rect);
        }
        let lead = i64::from(cfg.precursor_lead);
        for site in &truth.sites {
            if site.appears - lead <= offset && offset < site.appears {
                paint_earth(&mut frame, truth.precursor_rect(site));
            }
        }
        let mask = truth.builtup_mask(offset);
        for site in truth.sites.iter().filter(|s| s.appears <= offset) {
            for (r, c) in site.footprint.cells() {
                for ch in 0..3 {
                    frame[[ch, r, c]] = site.roof[ch] + cfg.noise * grain[[r, c]];
                }
            }
        }
        let image = Array3::from_shape_fn((3, h, w), |(ch, r, c)| {
            let sensor = cfg.noise * (mrng.random::<f32>() - 0.5);
            to_u8(frame[[ch, r, c]] * brightness + sensor)
        });
        images.push(image);
        masks.push(mask);
    }

    let timestamps = offsets.iter().map(|&k| cfg.start.plus_months(k)).collect();
    let continent = cfg.continents[loc % cfg.continents.len()].clone();
    let series = LocationSeries::new(format!("synth_{loc:03}"), continent, timestamps, images, masks)?;
    Ok((series, truth))
}
