//! On-disk layouts.
//!
//! Input: `<root>/<location_id>/index.json` with `images/YYYY-MM.png` (8-bit RGB)
//! and `masks/YYYY-MM.png` (single channel, 0/255).
//!
//! Derived output: `<out>/pairs/r<r>/<split>/<stem>.npz` plus a `<stem>.json`
//! sidecar, `split_manifest.json` and `bucket_stats.csv`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use log::{info, warn};
use ndarray::{Array2, Array3};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use super::split::{make_split, Split, SplitManifest};
use super::{enumerate_pairs, tile_patches, LocationSeries, PatchMeta, PatchSample, YearMonth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationIndex {
    pub location_id: String,
    pub continent: String,
    pub dates: Vec<YearMonth>,
    pub images: Vec<String>,
    pub masks: Vec<String>,
}

pub fn write_location(root: &Path, series: &LocationSeries) -> Result<PathBuf> {
    let dir = root.join(&series.location_id);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let (h, w) = (series.height() as u32, series.width() as u32);
    let mut index = LocationIndex {
        location_id: series.location_id.clone(),
        continent: series.continent.clone(),
        dates: series.timestamps.clone(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    for (t, date) in series.timestamps.iter().enumerate() {
        let img = &series.images[t];
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let (r, c) = (y as usize, x as usize);
            image::Rgb([img[[0, r, c]], img[[1, r, c]], img[[2, r, c]]])
        });
        let mask = &series.builtup_masks[t];
        let gray = GrayImage::from_fn(w, h, |x, y| image::Luma([mask[[y as usize, x as usize]] * 255]));
        let image_rel = format!("images/{date}.png");
        let mask_rel = format!("masks/{date}.png");
        rgb.save(dir.join(&image_rel))?;
        gray.save(dir.join(&mask_rel))?;
        index.images.push(image_rel);
        index.masks.push(mask_rel);
    }
    let file = BufWriter::new(File::create(dir.join("index.json"))?);
    serde_json::to_writer_pretty(file, &index)?;
    Ok(dir)
}

pub fn read_location(dir: &Path) -> Result<LocationSeries> {
    let index_path = dir.join("index.json");
    let index: LocationIndex = serde_json::from_reader(BufReader::new(File::open(&index_path)?))
        .map_err(|e| Error::archive(&index_path, e))?;
    if index.images.len() != index.dates.len() || index.masks.len() != index.dates.len() {
        return Err(Error::archive(
            &index_path,
            format!(
                "{} dates, {} images, {} masks",
                index.dates.len(),
                index.images.len(),
                index.masks.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(index.dates.len());
    let mut masks = Vec::with_capacity(index.dates.len());
    for (img_rel, mask_rel) in index.images.iter().zip(&index.masks) {
        let rgb = image::open(dir.join(img_rel))?.to_rgb8();
        let (w, h) = rgb.dimensions();
        images.push(Array3::from_shape_fn((3, h as usize, w as usize), |(ch, r, c)| {
            rgb.get_pixel(c as u32, r as u32)[ch]
        }));
        let gray = image::open(dir.join(mask_rel))?.to_luma8();
        let (w, h) = gray.dimensions();
        masks.push(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            u8::from(gray.get_pixel(c as u32, r as u32)[0] >= 128)
        }));
    }
    LocationSeries::new(index.location_id, index.continent, index.dates, images, masks)
}

/// Read every location directory under `root`. Failures are collected per
/// location instead of aborting the whole read.
pub fn read_locations(root: &Path) -> Result<(Vec<LocationSeries>, Vec<(PathBuf, Error)>)> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for dir in dirs {
        match read_location(&dir) {
            Ok(s) => ok.push(s),
            Err(e) => failed.push((dir, e)),
        }
    }
    Ok((ok, failed))
}

/// JSON sidecar written next to each patch archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSidecar {
    #[serde(flatten)]
    pub meta: PatchMeta,
    pub split: Split,
    pub archive: String,
}

fn to_u8_image(img: &Array3<f32>) -> Array3<u8> {
    img.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn to_f32_image(img: &Array3<u8>) -> Array3<f32> {
    img.mapv(|v| f32::from(v) / 255.0)
}

pub fn write_patch_archive(dir: &Path, sample: &PatchSample, split: Split) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stem = sample.meta.stem();
    let path = dir.join(format!("{stem}.npz"));
    let mut npz = NpzWriter::new_compressed(BufWriter::new(File::create(&path)?));
    let err = |e: ndarray_npy::WriteNpzError| Error::archive(&path, e);
    npz.add_array("image_t0", &to_u8_image(&sample.image_t0)).map_err(err)?;
    if let Some(t1) = &sample.image_t1 {
        npz.add_array("image_t1", &to_u8_image(t1)).map_err(err)?;
    }
    npz.add_array("change_mask", &sample.change_mask).map_err(err)?;
    npz.add_array("first_change_month", &sample.first_change_month).map_err(err)?;
    npz.finish().map_err(err)?;

    let sidecar = PatchSidecar {
        meta: sample.meta.clone(),
        split,
        archive: format!("{stem}.npz"),
    };
    let file = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
    serde_json::to_writer_pretty(file, &sidecar)?;
    Ok(path)
}

pub fn read_patch_archive(path: &Path, meta: PatchMeta) -> Result<PatchSample> {
    let mut npz = NpzReader::new(BufReader::new(File::open(path)?)).map_err(|e| Error::archive(path, e))?;
    let err = |e: ndarray_npy::ReadNpzError| Error::archive(path, e);
    let image_t0: Array3<u8> = npz.by_name("image_t0").map_err(err)?;
    let names = npz.names().map_err(err)?;
    let image_t1 = if names.iter().any(|n| n.starts_with("image_t1")) {
        let a: Array3<u8> = npz.by_name("image_t1").map_err(err)?;
        Some(to_f32_image(&a))
    } else {
        None
    };
    let change_mask: Array2<u8> = npz.by_name("change_mask").map_err(err)?;
    let first_change_month: Array2<u16> = npz.by_name("first_change_month").map_err(err)?;
    Ok(PatchSample {
        meta,
        image_t0: to_f32_image(&image_t0),
        image_t1,
        change_mask,
        first_change_month,
    })
}

pub fn bucket_dir(out: &Path, range: u32) -> PathBuf {
    out.join("pairs").join(format!("r{range}"))
}

#[derive(Debug, Clone)]
pub struct DeriveOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub ranges: Vec<u32>,
    pub seed: u64,
}

/// Per-bucket statistics: number of image pairs, number of patches, and the
/// mean fraction of changed pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub range_months: u32,
    pub pairs: u64,
    pub patches: u64,
    pub changed_pixels: u64,
    pub total_pixels: u64,
}

impl BucketStats {
    pub fn change_fraction(&self) -> f64 {
        if self.total_pixels == 0 {
            0.0
        } else {
            self.changed_pixels as f64 / self.total_pixels as f64
        }
    }
}

#[derive(Debug)]
pub struct DeriveSummary {
    pub buckets: Vec<BucketStats>,
    pub split: SplitManifest,
    pub failures: Vec<(String, Error)>,
}

pub fn write_bucket_stats(path: &Path, buckets: &[BucketStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["range_months", "pairs", "patches", "change_fraction"])?;
    for b in buckets {
        w.write_record([
            b.range_months.to_string(),
            b.pairs.to_string(),
            b.patches.to_string(),
            format!("{:.9}", b.change_fraction()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Derive bucketed patch archives from an input root of location series.
pub fn derive_dataset(opts: &DeriveOptions) -> Result<DeriveSummary> {
    let (series, read_failures) = read_locations(&opts.input)?;
    let mut failures: Vec<(String, Error)> = read_failures
        .into_iter()
        .map(|(p, e)| (p.display().to_string(), e))
        .collect();
    for (loc, e) in &failures {
        warn!("failed to read {loc}: {e}");
    }
    derive_from_series(&series, opts, &mut failures)
        .map(|(buckets, split)| DeriveSummary { buckets, split, failures })
}

/// Same as [`derive_dataset`] for series already in memory.
pub fn derive_from_series(
    series: &[LocationSeries],
    opts: &DeriveOptions,
    failures: &mut Vec<(String, Error)>,
) -> Result<(Vec<BucketStats>, SplitManifest)> {
    let locs: Vec<(String, String)> = series
        .iter()
        .map(|s| (s.location_id.clone(), s.continent.clone()))
        .collect();
    let split = make_split(&locs, opts.seed)?;
    fs::create_dir_all(&opts.out)?;
    let file = BufWriter::new(File::create(opts.out.join("split_manifest.json"))?);
    serde_json::to_writer_pretty(file, &split)?;

    let mut stats: BTreeMap<u32, BucketStats> = opts
        .ranges
        .iter()
        .map(|&r| (r, BucketStats { range_months: r, ..Default::default() }))
        .collect();
    for s in series {
        let split_of = split.split_of(&s.location_id).expect("every location is assigned");
        for &r in &opts.ranges {
            let pairs = enumerate_pairs(&s.timestamps, r);
            let dir = bucket_dir(&opts.out, r).join(split_of.as_str());
            let result = (|| -> Result<(u64, u64, u64)> {
                let mut patches = 0;
                let mut changed = 0;
                let mut total = 0;
                for pair in &pairs {
                    for sample in tile_patches(s, std::slice::from_ref(pair))? {
                        changed += sample.meta.n_change;
                        total += sample.change_mask.len() as u64;
                        patches += 1;
                        write_patch_archive(&dir, &sample, split_of)?;
                    }
                }
                Ok((patches, changed, total))
            })();
            match result {
                Ok((patches, changed, total)) => {
                    let b = stats.get_mut(&r).expect("range registered");
                    b.pairs += pairs.len() as u64;
                    b.patches += patches;
                    b.changed_pixels += changed;
                    b.total_pixels += total;
                }
                Err(e) => {
                    warn!("{} r={r}: {e}", s.location_id);
                    failures.push((s.location_id.clone(), e));
                }
            }
        }
    }
    let buckets: Vec<BucketStats> = stats.into_values().collect();
    for b in &buckets {
        info!(
            "bucket r={:>2}: {} pairs, {} patches, {:.4}% changed",
            b.range_months,
            b.pairs,
            b.patches,
            100.0 * b.change_fraction()
        );
    }
    write_bucket_stats(&opts.out.join("bucket_stats.csv"), &buckets)?;
    Ok((buckets, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synth_generate, SynthConfig};

    #[test]
    fn location_round_trip() {
        let cfg = SynthConfig {
            n_locations: 1,
            height: 40,
            width: 30,
            n_months: 3,
            ..SynthConfig::default()
        };
        let s = synth_generate(&cfg, 1).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let loc_dir = write_location(dir.path(), &s).unwrap();
        let back = read_location(&loc_dir).unwrap();
        assert_eq!(back.timestamps, s.timestamps);
        assert_eq!(back.images, s.images);
        assert_eq!(back.builtup_masks, s.builtup_masks);
        assert_eq!(back.continent, s.continent);
    }

    #[test]
    fn malformed_index_is_reported_per_location() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("broken");
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join("index.json"), "{ not json").unwrap();
        let (ok, failed) = read_locations(dir.path()).unwrap();
        assert!(ok.is_empty());
        assert_eq!(failed.len(), 1);
        assert!(failed[0].0.ends_with("broken"));
    }
}
