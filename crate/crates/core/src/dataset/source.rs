//! Random-access patch collections used by training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::s;
use sha2::{Digest, Sha256};

use super::io::{read_patch_archive, PatchSidecar};
use super::{derive_change_mask, enumerate_pairs, tile_origins, LocationSeries, PatchMeta, PatchSample, PATCH_SIZE};
use crate::error::{Error, Result};

pub trait PatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn meta(&self, index: usize) -> &PatchMeta;

    fn load(&self, index: usize) -> Result<PatchSample>;

    /// Content hash identifying exactly which data this source serves.
    fn data_hash(&self) -> Result<String>;

    fn n_change_counts(&self) -> Vec<u64> {
        (0..self.len()).map(|i| self.meta(i).n_change).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct PatchRef {
    location: usize,
    t0: usize,
    t1: usize,
    origin: (usize, usize),
}

/// Patches cut on demand from in-memory location series.
#[derive(Debug, Clone)]
pub struct MemorySource {
    series: Vec<Arc<LocationSeries>>,
    refs: Vec<PatchRef>,
    metas: Vec<PatchMeta>,
}

impl MemorySource {
    /// Patches of every pair `pairs_of` lists for each series.
    fn build(series: &[Arc<LocationSeries>], pairs_of: impl Fn(&LocationSeries) -> Vec<(usize, usize)>) -> Self {
        let mut refs = Vec::new();
        let mut metas = Vec::new();
        for (location, s) in series.iter().enumerate() {
            let origins = tile_origins(s.height(), s.width());
            for (t0, t1) in pairs_of(s) {
                for &origin in &origins {
                    let (r, c) = origin;
                    let window = s![r..r + PATCH_SIZE, c..c + PATCH_SIZE];
                    let change = derive_change_mask(
                        s.builtup_masks[t0].slice(window),
                        s.builtup_masks[t1].slice(window),
                    )
                    .expect("validated series");
                    refs.push(PatchRef { location, t0, t1, origin });
                    metas.push(PatchMeta {
                        location_id: s.location_id.clone(),
                        origin,
                        t0: s.timestamps[t0],
                        t1: s.timestamps[t1],
                        delta_months: s.timestamps[t1].months_since(s.timestamps[t0]) as u32,
                        n_change: change.iter().map(|&v| u64::from(v)).sum(),
                    });
                }
            }
        }
        Self {
            series: series.to_vec(),
            refs,
            metas,
        }
    }

    /// Patches of pairs exactly `range` calendar months apart.
    pub fn bucket(series: &[Arc<LocationSeries>], range: u32) -> Self {
        Self::build(series, |s| enumerate_pairs(&s.timestamps, range))
    }

    /// Patches of every forward pair at most `max_delta` months apart, the
    /// mixed-interval set used for change detection.
    pub fn all_pairs(series: &[Arc<LocationSeries>], max_delta: u32) -> Self {
        Self::build(series, |s| {
            (1..=max_delta).flat_map(|r| enumerate_pairs(&s.timestamps, r)).collect()
        })
    }

    pub fn series(&self) -> &[Arc<LocationSeries>] {
        &self.series
    }
}

impl PatchSource for MemorySource {
    fn len(&self) -> usize {
        self.refs.len()
    }

    fn meta(&self, index: usize) -> &PatchMeta {
        &self.metas[index]
    }

    fn load(&self, index: usize) -> Result<PatchSample> {
        let r = self.refs[index];
        PatchSample::from_series(&self.series[r.location], r.t0, r.t1, r.origin)
    }

    fn data_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.series {
            h.update(s.location_id.as_bytes());
            for (d, (img, mask)) in s.timestamps.iter().zip(s.images.iter().zip(&s.builtup_masks)) {
                h.update(d.to_string().as_bytes());
                h.update(img.as_standard_layout().as_slice().expect("standard layout"));
                h.update(mask.as_standard_layout().as_slice().expect("standard layout"));
            }
        }
        for m in &self.metas {
            h.update(m.stem().as_bytes());
        }
        Ok(hex(&h.finalize()))
    }
}

/// Patches stored as `.npz` archives with JSON sidecars.
#[derive(Debug, Clone)]
pub struct ArchiveSource {
    entries: Vec<(PathBuf, PatchMeta)>,
}

impl ArchiveSource {
    /// Open every sidecar in the given directories. Missing directories are
    /// an error so that a missing bucket is reported by name.
    pub fn open<P: AsRef<Path>>(dirs: &[P]) -> Result<Self> {
        let mut entries = Vec::new();
        for dir in dirs {
            let dir = dir.as_ref();
            if !dir.is_dir() {
                return Err(Error::MissingData(format!("{} does not exist", dir.display())));
            }
            let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            sidecars.sort();
            for path in sidecars {
                let text = fs::read_to_string(&path)?;
                let side: PatchSidecar = serde_json::from_str(&text).map_err(|e| Error::archive(&path, e))?;
                entries.push((dir.join(&side.archive), side.meta));
            }
        }
        Ok(Self { entries })
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().map(|(p, _)| p.as_path())
    }
}

impl PatchSource for ArchiveSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn meta(&self, index: usize) -> &PatchMeta {
        &self.entries[index].1
    }

    fn load(&self, index: usize) -> Result<PatchSample> {
        let (path, meta) = &self.entries[index];
        read_patch_archive(path, meta.clone())
    }

    fn data_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (path, _) in &self.entries {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(name.as_bytes());
            h.update(fs::read(path)?);
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
