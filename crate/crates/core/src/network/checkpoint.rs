//! Checkpoints: an `.npz` parameter archive plus a JSON sidecar with the same
//! stem.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn, OwnedRepr};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, Head, HeadConfig, ModelBundle, Provenance, Task};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::thresholding::ThresholdTracker;

/// Architectural conventions not implied by the configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub padding: String,
    pub skip_connections: String,
    pub upsampling: String,
    pub head_activation: String,
    pub pair_order: String,
    pub timerange_logit_order: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            padding: "same (zero), stride 1".into(),
            skip_connections: "encoder level output concatenated after upsampling, before each decoder conv".into(),
            upsampling: "nearest neighbour x2".into(),
            head_activation: "relu".into(),
            pair_order: "[features(t0); features(t1)]".into(),
            timerange_logit_order: "early, late, no-change".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    pub task: Task,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub provenance: Provenance,
    pub step: u64,
    pub tracker: ThresholdTracker,
    pub conventions: Conventions,
    pub archive: String,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

fn add_store(npz: &mut NpzWriter<BufWriter<File>>, prefix: &str, store: &ParamStore, path: &Path) -> Result<()> {
    for (name, value) in store.iter() {
        npz.add_array(format!("{prefix}/{name}"), value)
            .map_err(|e| Error::archive(path, e))?;
    }
    Ok(())
}

/// Write `<path>` (parameters) and `<path>.json` (metadata). Both files are
/// written to temporaries first, so an interrupted save leaves any previous
/// checkpoint intact.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("npz.tmp");
    {
        let mut npz = NpzWriter::new_compressed(BufWriter::new(File::create(&tmp)?));
        add_store(&mut npz, "backbone", bundle.backbone.store(), path)?;
        add_store(&mut npz, "head", bundle.head.store(), path)?;
        npz.finish().map_err(|e| Error::archive(path, e))?;
    }
    let sidecar = CheckpointSidecar {
        task: bundle.task,
        backbone: *bundle.backbone.config(),
        head: *bundle.head.config(),
        provenance: bundle.provenance,
        step: bundle.step,
        tracker: bundle.tracker.clone(),
        conventions: Conventions::default(),
        archive: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let json_path = sidecar_path(path);
    let json_tmp = json_path.with_extension("json.tmp");
    fs::write(&json_tmp, serde_json::to_string_pretty(&sidecar)?)?;
    fs::rename(&tmp, path)?;
    fs::rename(&json_tmp, &json_path)?;
    Ok(())
}

fn read_arrays(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let file = File::open(path).map_err(|e| Error::archive(path, e))?;
    let mut npz = NpzReader::new(BufReader::new(file)).map_err(|e| Error::archive(path, e))?;
    let names = npz.names().map_err(|e| Error::archive(path, e))?;
    let mut out = BTreeMap::new();
    for name in names {
        let array = npz
            .by_name::<OwnedRepr<f32>, IxDyn>(&name)
            .map_err(|e| Error::archive(path, format!("{name}: {e}")))?;
        out.insert(name, array);
    }
    Ok(out)
}

/// Overwrite every parameter of `store` from `arrays[prefix + name]`.
fn fill_store(store: &mut ParamStore, arrays: &BTreeMap<String, ArrayD<f32>>, prefix: &str, path: &Path) -> Result<()> {
    for i in 0..store.len() {
        let key = format!("{prefix}{}", store.names()[i]);
        let value = arrays
            .get(&key)
            .ok_or_else(|| Error::archive(path, format!("missing parameter '{key}'")))?;
        if value.shape() != store.get(i).shape() {
            return Err(Error::archive(
                path,
                format!("parameter '{key}' has shape {:?}, expected {:?}", value.shape(), store.get(i).shape()),
            ));
        }
        store.get_mut(i).assign(value);
    }
    Ok(())
}

// Parameters are overwritten right after construction; the seed is irrelevant.
fn placeholder_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let json_path = sidecar_path(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::archive(&json_path, e))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text).map_err(|e| Error::archive(&json_path, e))?;
    if sidecar.head.out_logits != sidecar.task.out_logits() {
        return Err(Error::archive(
            &json_path,
            format!("head has {} logits but task {} needs {}", sidecar.head.out_logits, sidecar.task, sidecar.task.out_logits()),
        ));
    }
    let arrays = read_arrays(path)?;
    let mut rng = placeholder_rng();
    let mut backbone = Backbone::new(sidecar.backbone, &mut rng)?;
    let mut head = Head::new(sidecar.head, sidecar.task.head_inputs(sidecar.backbone.feature_dim), &mut rng)?;
    fill_store(backbone.store_mut(), &arrays, "backbone/", path)?;
    fill_store(head.store_mut(), &arrays, "head/", path)?;
    Ok(ModelBundle {
        backbone,
        head,
        task: sidecar.task,
        provenance: sidecar.provenance,
        step: sidecar.step,
        tracker: sidecar.tracker,
    })
}

/// Backbone weights from a user-supplied archive, named either as in a
/// checkpoint (`backbone/<name>`) or bare (`<name>`).
pub fn load_external_backbone(path: &Path, config: BackboneConfig) -> Result<Backbone> {
    let arrays = read_arrays(path)?;
    let mut backbone = Backbone::new(config, &mut placeholder_rng())?;
    let prefixed = arrays.keys().any(|k| k.starts_with("backbone/"));
    fill_store(backbone.store_mut(), &arrays, if prefixed { "backbone/" } else { "" }, path)?;
    Ok(backbone)
}
