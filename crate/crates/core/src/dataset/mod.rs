//! Change labels and fixed-interval patch pairs from built-up mask time series.

mod date;
pub mod io;
pub mod source;
pub mod split;
pub mod synth;

use log::warn;
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use date::YearMonth;
pub use source::{ArchiveSource, MemorySource, PatchSource};
pub use split::{make_split, Split, SplitManifest};
pub use synth::{synth_generate, synth_generate_with_truth, SynthConfig, SynthWorld};

/// Side length of every training/evaluation patch.
pub const PATCH_SIZE: usize = 224;

/// The nine forecasting ranges, in months.
pub const FORECAST_RANGES: [u32; 9] = [1, 3, 6, 9, 12, 15, 18, 21, 24];

/// Horizon over which first-change months are tracked for early/late labels.
pub const TIME_RANGE_HORIZON: u32 = 24;

/// Time series of co-registered images and built-up masks for one location.
///
/// Images are stored as 8-bit RGB planes `(3, H, W)`; [`LocationSeries::image_f32`]
/// gives the `[0, 1]` normalized view used by the networks.
#[derive(Debug, Clone)]
pub struct LocationSeries {
    pub location_id: String,
    pub continent: String,
    pub timestamps: Vec<YearMonth>,
    pub images: Vec<Array3<u8>>,
    pub builtup_masks: Vec<Array2<u8>>,
}

impl LocationSeries {
    pub fn new(
        location_id: impl Into<String>,
        continent: impl Into<String>,
        timestamps: Vec<YearMonth>,
        images: Vec<Array3<u8>>,
        builtup_masks: Vec<Array2<u8>>,
    ) -> Result<Self> {
        let series = Self {
            location_id: location_id.into(),
            continent: continent.into(),
            timestamps,
            images,
            builtup_masks,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.location_id;
        if self.timestamps.is_empty() {
            return Err(Error::invalid(format!("{id}: empty series")));
        }
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("{id}: timestamps not strictly increasing")));
        }
        if self.images.len() != self.timestamps.len()
            || self.builtup_masks.len() != self.timestamps.len()
        {
            return Err(Error::shape(format!(
                "{id}: {} timestamps, {} images, {} masks",
                self.timestamps.len(),
                self.images.len(),
                self.builtup_masks.len()
            )));
        }
        let (h, w) = self.builtup_masks[0].dim();
        for (t, (img, mask)) in self.images.iter().zip(&self.builtup_masks).enumerate() {
            if img.dim() != (3, h, w) || mask.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "{id}: timestamp {t} has image {:?} / mask {:?}, expected (3, {h}, {w})",
                    img.dim(),
                    mask.dim()
                )));
            }
            check_binary(mask.view(), "built-up mask")?;
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.builtup_masks[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.builtup_masks[0].ncols()
    }

    pub fn image_f32(&self, t: usize) -> Array3<f32> {
        self.images[t].mapv(|v| f32::from(v) / 255.0)
    }
}

/// Identity and timing of one patch, shared by in-memory and on-disk samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub location_id: String,
    pub origin: (usize, usize),
    pub t0: YearMonth,
    pub t1: YearMonth,
    pub delta_months: u32,
    pub n_change: u64,
}

impl PatchMeta {
    /// `<location>_<t0>_<t1>_<row>_<col>`, the archive file stem.
    pub fn stem(&self) -> String {
        format!(
            "{}_{}_{}_{}_{}",
            self.location_id, self.t0, self.t1, self.origin.0, self.origin.1
        )
    }
}

/// One 224×224 patch pair with its change labels.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub meta: PatchMeta,
    /// `(3, 224, 224)` in `[0, 1]`.
    pub image_t0: Array3<f32>,
    pub image_t1: Option<Array3<f32>>,
    /// Construction-only change between t0 and t1.
    pub change_mask: Array2<u8>,
    /// First month (offset from t0) at which a pixel shows construction; 0 if none.
    pub first_change_month: Array2<u16>,
}

impl PatchSample {
    /// Cut the patch at `origin` out of `series` for the pair `(t0, t1)`.
    pub fn from_series(
        series: &LocationSeries,
        t0: usize,
        t1: usize,
        origin: (usize, usize),
    ) -> Result<Self> {
        let (r, c) = origin;
        if r + PATCH_SIZE > series.height() || c + PATCH_SIZE > series.width() {
            return Err(Error::invalid(format!(
                "patch at {origin:?} exceeds {}x{} image",
                series.height(),
                series.width()
            )));
        }
        let d0 = series.timestamps[t0];
        let d1 = series.timestamps[t1];
        let delta = d1.months_since(d0);
        if delta < 1 {
            return Err(Error::invalid(format!("pair {d0} -> {d1} is not forward in time")));
        }
        let window = s![r..r + PATCH_SIZE, c..c + PATCH_SIZE];
        let crop_image = |t: usize| -> Array3<f32> {
            series.images[t]
                .slice(s![.., r..r + PATCH_SIZE, c..c + PATCH_SIZE])
                .mapv(|v| f32::from(v) / 255.0)
        };
        let change_mask = derive_change_mask(
            series.builtup_masks[t0].slice(window),
            series.builtup_masks[t1].slice(window),
        )?;

        let horizon = (delta as u32).max(TIME_RANGE_HORIZON);
        let mut dates = Vec::new();
        let mut masks = Vec::new();
        for (d, m) in series.timestamps[t0..].iter().zip(&series.builtup_masks[t0..]) {
            if d.months_since(d0) > i64::from(horizon) {
                break;
            }
            dates.push(*d);
            masks.push(m.slice(window));
        }
        let first_change_month = compute_first_change_map(&dates, &masks, horizon)?;

        let n_change = change_mask.iter().map(|&v| u64::from(v)).sum();
        Ok(Self {
            meta: PatchMeta {
                location_id: series.location_id.clone(),
                origin,
                t0: d0,
                t1: d1,
                delta_months: delta as u32,
                n_change,
            },
            image_t0: crop_image(t0),
            image_t1: Some(crop_image(t1)),
            change_mask,
            first_change_month,
        })
    }
}

pub(crate) fn check_binary(mask: ArrayView2<u8>, what: &str) -> Result<()> {
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(Error::invalid(format!("{what} has non-binary value {v}")));
    }
    Ok(())
}

/// Construction-only difference: 1 where `t1` is built up and `t0` is not.
/// Removals (1 → 0) are labeled 0.
pub fn derive_change_mask(mask_t0: ArrayView2<u8>, mask_t1: ArrayView2<u8>) -> Result<Array2<u8>> {
    if mask_t0.dim() != mask_t1.dim() {
        return Err(Error::shape(format!(
            "change mask inputs {:?} vs {:?}",
            mask_t0.dim(),
            mask_t1.dim()
        )));
    }
    check_binary(mask_t0, "mask_t0")?;
    check_binary(mask_t1, "mask_t1")?;
    Ok(ndarray::Zip::from(&mask_t0)
        .and(&mask_t1)
        .map_collect(|&a, &b| u8::from(b == 1 && a == 0)))
}

/// Per-pixel month offset of the first construction after `dates[0]`.
///
/// `dates[0]`/`masks[0]` is the reference t0. Later entries may have gaps; a
/// change first visible at the next available month gets that month's offset.
/// Only timestamps within `horizon` months of t0 are considered.
pub fn compute_first_change_map(
    dates: &[YearMonth],
    masks: &[ArrayView2<u8>],
    horizon: u32,
) -> Result<Array2<u16>> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1 month"));
    }
    if dates.len() != masks.len() {
        return Err(Error::shape(format!("{} dates vs {} masks", dates.len(), masks.len())));
    }
    if dates.len() < 2 {
        return Err(Error::invalid("need t0 and at least one later timestamp"));
    }
    let t0 = dates[0];
    let base = masks[0];
    let mut out = Array2::<u16>::zeros(base.dim());
    for (d, m) in dates.iter().zip(masks).skip(1) {
        let k = d.months_since(t0);
        if k < 1 {
            return Err(Error::invalid(format!("timestamp {d} is not after t0 {t0}")));
        }
        if k > i64::from(horizon) {
            break;
        }
        if m.dim() != base.dim() {
            return Err(Error::shape(format!("mask at {d} is {:?}, expected {:?}", m.dim(), base.dim())));
        }
        ndarray::Zip::from(&mut out)
            .and(&base)
            .and(m)
            .for_each(|o, &b0, &bk| {
                if *o == 0 && bk == 1 && b0 == 0 {
                    *o = k as u16;
                }
            });
    }
    Ok(out)
}

/// All index pairs `(i, j)` whose calendar-month difference is exactly `r`.
pub fn enumerate_pairs(dates: &[YearMonth], r: u32) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, a) in dates.iter().enumerate() {
        for (j, b) in dates.iter().enumerate().skip(i + 1) {
            if b.months_since(*a) == i64::from(r) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Origins of the non-overlapping 224×224 grid anchored at (0, 0).
pub fn tile_origins(height: usize, width: usize) -> Vec<(usize, usize)> {
    let rows = height / PATCH_SIZE;
    let cols = width / PATCH_SIZE;
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i * PATCH_SIZE, j * PATCH_SIZE)))
        .collect()
}

/// Materialize all patches for the given date pairs. Locations smaller than
/// one patch are skipped with a warning.
pub fn tile_patches(series: &LocationSeries, pairs: &[(usize, usize)]) -> Result<Vec<PatchSample>> {
    let (h, w) = (series.height(), series.width());
    if h < PATCH_SIZE || w < PATCH_SIZE {
        warn!(
            "skipping {}: {h}x{w} is smaller than one {PATCH_SIZE}px patch",
            series.location_id
        );
        return Ok(Vec::new());
    }
    let origins = tile_origins(h, w);
    let mut out = Vec::with_capacity(pairs.len() * origins.len());
    for &(t0, t1) in pairs {
        for &origin in &origins {
            out.push(PatchSample::from_series(series, t0, t1, origin)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn monthly(n: usize) -> Vec<YearMonth> {
        let start = ym("2018-01");
        (0..n).map(|k| start.plus_months(k as i64)).collect()
    }

    #[test]
    fn change_mask_excludes_removal() {
        let t0 = array![[0u8, 0], [1, 0]];
        let t1 = array![[1u8, 0], [0, 0]];
        let out = derive_change_mask(t0.view(), t1.view()).unwrap();
        assert_eq!(out, array![[1u8, 0], [0, 0]]);
    }

    #[test]
    fn change_mask_identity_is_zero() {
        let m = array![[1u8, 0, 1], [0, 1, 1]];
        let out = derive_change_mask(m.view(), m.view()).unwrap();
        assert!(out.iter().all(|&v| v == 0));
    }

    #[test]
    fn change_mask_rejects_bad_input() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(matches!(
            derive_change_mask(a.view(), b.view()),
            Err(Error::ShapeMismatch(_))
        ));
        let c = array![[0u8, 255], [0, 0]];
        assert!(matches!(
            derive_change_mask(a.view(), c.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn change_mask_matches_pixel_loop_on_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..2u8));
            let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..2u8));
            let out = derive_change_mask(a.view(), b.view()).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let expected = (1 - a[[i, j]]) * b[[i, j]];
                    assert_eq!(out[[i, j]], expected);
                }
            }
        }
    }

    fn pixel_series(built_at: Option<usize>, n: usize) -> Vec<Array2<u8>> {
        (0..n)
            .map(|k| {
                let v = u8::from(built_at.is_some_and(|m| k >= m));
                Array2::from_elem((1, 1), v)
            })
            .collect()
    }

    #[test]
    fn first_change_month_basic() {
        let dates = monthly(25);
        let masks = pixel_series(Some(3), 25);
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let out = compute_first_change_map(&dates, &views, 24).unwrap();
        assert_eq!(out[[0, 0]], 3);

        let masks = pixel_series(None, 25);
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let out = compute_first_change_map(&dates, &views, 24).unwrap();
        assert_eq!(out[[0, 0]], 0);
    }

    #[test]
    fn first_change_month_beyond_horizon_is_zero() {
        let dates = monthly(25);
        let masks = pixel_series(Some(10), 25);
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let out = compute_first_change_map(&dates, &views, 6).unwrap();
        assert_eq!(out[[0, 0]], 0);
    }

    #[test]
    fn first_change_month_with_missing_month() {
        // Month 2 is absent; the pixel is first built in the month-3 mask.
        let all = monthly(6);
        let dates: Vec<_> = all.iter().enumerate().filter(|(k, _)| *k != 2).map(|(_, d)| *d).collect();
        let full = pixel_series(Some(2), 6);
        let masks: Vec<_> = full.iter().enumerate().filter(|(k, _)| *k != 2).map(|(_, m)| m.clone()).collect();
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let out = compute_first_change_map(&dates, &views, 12).unwrap();
        // brute force: scan available months for the first one showing the change
        let expected = dates
            .iter()
            .zip(&masks)
            .skip(1)
            .find(|(_, m)| m[[0, 0]] == 1)
            .map(|(d, _)| d.months_since(dates[0]) as u16)
            .unwrap();
        assert_eq!(expected, 3);
        assert_eq!(out[[0, 0]], expected);
    }

    #[test]
    fn first_change_month_rejects_zero_horizon() {
        let dates = monthly(3);
        let masks = pixel_series(None, 3);
        let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
        assert!(compute_first_change_map(&dates, &views, 0).is_err());
    }

    #[test]
    fn pair_enumeration_counts() {
        let dates = monthly(24);
        assert_eq!(enumerate_pairs(&dates, 1).len(), 23);
        assert_eq!(enumerate_pairs(&dates, 3).len(), 21);
        assert_eq!(enumerate_pairs(&dates, 24).len(), 0);
    }

    #[test]
    fn pair_enumeration_uses_calendar_months() {
        let dates = vec![ym("2020-01"), ym("2020-02"), ym("2020-04")];
        // exhaustive scan oracle
        let mut expected = Vec::new();
        for i in 0..dates.len() {
            for j in 0..dates.len() {
                if dates[j].months_since(dates[i]) == 2 {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(expected, vec![(1, 2)]);
        assert_eq!(enumerate_pairs(&dates, 2), expected);
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_origins(1024, 1024).len(), 16);
        assert_eq!(tile_origins(224, 224).len(), 1);
        assert_eq!(tile_origins(1000, 1000).len(), 16);
        assert_eq!(tile_origins(223, 1000).len(), 0);
    }

    #[test]
    fn small_location_is_skipped() {
        let dates = monthly(2);
        let series = LocationSeries::new(
            "tiny",
            "Europe",
            dates,
            vec![Array3::zeros((3, 100, 300)); 2],
            vec![Array2::zeros((100, 300)); 2],
        )
        .unwrap();
        assert!(tile_patches(&series, &[(0, 1)]).unwrap().is_empty());
    }

    #[test]
    fn series_validation() {
        let dates = vec![ym("2020-02"), ym("2020-01")];
        let r = LocationSeries::new(
            "x",
            "Asia",
            dates,
            vec![Array3::zeros((3, 4, 4)); 2],
            vec![Array2::zeros((4, 4)); 2],
        );
        assert!(r.is_err());
        let r = LocationSeries::new(
            "x",
            "Asia",
            monthly(2),
            vec![Array3::zeros((3, 4, 4)), Array3::zeros((3, 4, 5))],
            vec![Array2::zeros((4, 4)); 2],
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn tiles_are_disjoint_and_cover_grid(h in 0usize..1200, w in 0usize..1200) {
            let origins = tile_origins(h, w);
            let mut covered = std::collections::HashSet::new();
            for &(r, c) in &origins {
                prop_assert!(r + PATCH_SIZE <= h && c + PATCH_SIZE <= w);
                // disjoint grid cells: origins are multiples of the patch size
                prop_assert!(r % PATCH_SIZE == 0 && c % PATCH_SIZE == 0);
                prop_assert!(covered.insert((r, c)));
            }
            let area: usize = origins.len() * PATCH_SIZE * PATCH_SIZE;
            prop_assert_eq!(area, (h / PATCH_SIZE) * (w / PATCH_SIZE) * PATCH_SIZE * PATCH_SIZE);
        }

        #[test]
        fn no_removal_leaks(bits0 in proptest::collection::vec(0u8..2, 36), bits1 in proptest::collection::vec(0u8..2, 36)) {
            let a = Array2::from_shape_vec((6, 6), bits0).unwrap();
            let b = Array2::from_shape_vec((6, 6), bits1).unwrap();
            let out = derive_change_mask(a.view(), b.view()).unwrap();
            for ((&o, &x0), &x1) in out.iter().zip(a.iter()).zip(b.iter()) {
                if o == 1 {
                    prop_assert!(x1 == 1 && x0 == 0);
                }
            }
        }
    }
}
