//! Checkpoint directories.
//!
//! ```text
//! manifest.json   version, config, tensor table
//! tensors.bin     little-endian blobs at the offsets listed in the table
//! mesh/           copy of the morphable mesh the model was trained against
//! ```
//!
//! Model tensors are stored as f32 (they live on the f32 grid already);
//! optimiser moments and prior-cache data are stored as f64 so a resumed run
//! continues bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GradStats, Model, TrainConfig, TrainState, GAUSS_PARAM_BASE};
use crate::autodiff::optim::Moments;
use crate::autodiff::{Adam, ParamStore, Tensor};
use crate::deform::{DeformationConfig, DeformationField, PriorCache, SceneBox};
use crate::error::{Error, Result};
use crate::mesh::MorphableMesh;
use crate::scene::{Camera, GaussianCloud, SourceTag};

pub const CHECKPOINT_VERSION: u32 = 1;
const BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub file: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
    pub field_config: DeformationConfig,
    pub scene_box: SceneBox,
    pub expression_count: usize,
    pub train_frames: Vec<usize>,
    pub dataset_fingerprint: String,
    pub scene_extent: f64,
    pub adam_steps: BTreeMap<String, u64>,
    pub adam_rejected: u64,
    #[serde(default)]
    pub cameras: Vec<Camera>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Default)]
struct Writer {
    blob: Vec<u8>,
    table: Vec<TensorEntry>,
}

impl Writer {
    fn put(&mut self, name: &str, rows: usize, cols: usize, dtype: Dtype, data: impl IntoIterator<Item = f64>) {
        let offset = self.blob.len() as u64;
        for v in data {
            match dtype {
                Dtype::F32 => self.blob.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => self.blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
        debug_assert_eq!(self.blob.len() as u64 - offset, (rows * cols * dtype.size()) as u64);
        self.table.push(TensorEntry { name: name.into(), shape: [rows, cols], dtype, file: BLOB.into(), offset });
    }

    fn tensor(&mut self, name: &str, t: &Tensor, dtype: Dtype) {
        self.put(name, t.rows, t.cols, dtype, t.data.iter().copied());
    }
}

struct Reader<'a> {
    blob: &'a [u8],
    table: BTreeMap<&'a str, &'a TensorEntry>,
    path: PathBuf,
}

impl Reader<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        let e = self.table.get(name).ok_or_else(|| Error::Schema(format!("checkpoint has no tensor {name}")))?;
        let [rows, cols] = e.shape;
        let size = e.dtype.size();
        let start = e.offset as usize;
        let end = start + rows * cols * size;
        let bytes = self
            .blob
            .get(start..end)
            .ok_or_else(|| Error::load(&self.path, format!("tensor {name} runs past the end of the blob")))?;
        let data = match e.dtype {
            Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        Ok(Tensor { rows, cols, data })
    }

    fn get_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.get(name)?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(Error::Shape(format!("{name}: expected {rows}x{cols}, found {}x{}", t.rows, t.cols)));
        }
        Ok(t)
    }
}

/// A loaded checkpoint: the model plus whatever is needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub mesh: MorphableMesh,
    pub adam: Adam,
    pub stats: GradStats,
}

fn write_model(w: &mut Writer, model: &Model) {
    let gauss = model.gauss_params();
    for (_, name, t) in gauss.iter() {
        w.tensor(&format!("gauss.{name}"), t, Dtype::F32);
    }
    let tags = &model.cloud.source_tags;
    w.put("gauss.source_tags", tags.len(), 1, Dtype::F32, tags.iter().map(|t| t.code() as f64));
    for (_, name, t) in model.field.params.iter() {
        w.tensor(&format!("field.{name}"), t, Dtype::F32);
    }
    let c = &model.cache;
    let n = c.len();
    w.put("cache.knn", n, c.k, Dtype::F64, c.knn.iter().map(|&i| i as f64));
    w.put("cache.knn_dist", n, c.k, Dtype::F64, c.knn_dist.iter().copied());
    w.put("cache.idw", n, c.k, Dtype::F64, c.idw.iter().copied());
    w.put("cache.mesh_dist", n, 1, Dtype::F64, c.mesh_dist.iter().copied());
    w.put("cache.near_mesh", n, 1, Dtype::F64, c.near_mesh.iter().map(|&b| b as u8 as f64));
    w.put("cache.decay", n, 1, Dtype::F64, c.decay.iter().copied());
}

/// Writes `state` to `dir` through a temporary sibling directory and a rename.
pub fn save(state: &TrainState, mesh: &MorphableMesh, dir: &Path) -> Result<()> {
    let mut w = Writer::default();
    write_model(&mut w, &state.model);
    for (name, m) in &state.adam.moments {
        w.put(&format!("adam.{name}.m"), m.m.len(), 1, Dtype::F64, m.m.iter().copied());
        w.put(&format!("adam.{name}.v"), m.v.len(), 1, Dtype::F64, m.v.iter().copied());
    }
    let s = &state.stats;
    w.put("stats.accum", s.accum.len(), 1, Dtype::F64, s.accum.iter().copied());
    w.put("stats.count", s.count.len(), 1, Dtype::F64, s.count.iter().map(|&c| c as f64));

    let field = &state.model.field;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        iteration: state.iteration,
        config: state.config.clone(),
        field_config: field.config.clone(),
        scene_box: field.scene_box,
        expression_count: field.expression_count,
        train_frames: field.train_frames.clone(),
        dataset_fingerprint: state.dataset_fingerprint.clone(),
        scene_extent: state.scene_extent,
        adam_steps: state.adam.moments.iter().map(|(k, m)| (k.clone(), m.step)).collect(),
        adam_rejected: state.adam.rejected,
        cameras: state.cameras.clone(),
        tensors: w.table,
    };
    write_dir_atomic(dir, |tmp| {
        let p = tmp.join(BLOB);
        fs::write(&p, &w.blob).map_err(|e| Error::io(&p, e))?;
        mesh.save(&tmp.join("mesh"))?;
        crate::dataset::write_json(&tmp.join("manifest.json"), &manifest)
    })
}

fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir.file_name().ok_or_else(|| Error::Argument(format!("bad checkpoint path {}", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tag = format!(".{}.{}", name.to_string_lossy(), std::process::id());
    let tmp = parent.join(format!("{tag}.tmp"));
    let old = parent.join(format!("{tag}.old"));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_dir_all(&old);
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join("manifest.json");
    if !mp.is_file() {
        return Err(Error::load(&mp, "missing checkpoint manifest"));
    }
    let manifest: CheckpointManifest = crate::dataset::read_json(&mp)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mesh = MorphableMesh::load(&dir.join("mesh"))?;
    let bp = dir.join(BLOB);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if let Some(e) = manifest.tensors.iter().find(|e| e.file != BLOB) {
        return Err(Error::Schema(format!("tensor {} refers to unknown file {}", e.name, e.file)));
    }
    let r = Reader { blob: &blob, table: manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect(), path: bp };

    let pos = r.get("gauss.positions")?;
    let n = pos.rows;
    let mut gauss = ParamStore::new(GAUSS_PARAM_BASE);
    gauss.insert("positions", r.get_shaped("gauss.positions", n, 3)?);
    for (name, width) in &super::GAUSS_TENSORS[1..] {
        gauss.insert(name, r.get_shaped(&format!("gauss.{name}"), n, *width)?);
    }
    let tags = r.get_shaped("gauss.source_tags", n, 1)?;
    let source_tags = tags
        .data
        .iter()
        .map(|&c| SourceTag::from_code(c as u8).ok_or_else(|| Error::Schema(format!("bad source tag code {c}"))))
        .collect::<Result<Vec<_>>>()?;

    let fc = manifest.field_config.clone();
    fc.validate(mesh.vertex_count())?;
    let mut field =
        DeformationField::new(fc.clone(), manifest.scene_box, manifest.expression_count, &manifest.train_frames, 0)?;
    let names: Vec<String> = field.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(field.params.iter_mut().map(|(_, t)| t)) {
        *t = r.get_shaped(&format!("field.{name}"), t.rows, t.cols)?;
    }

    let k = fc.k;
    let idx = r.get_shaped("cache.knn", n, k)?;
    let cache = PriorCache {
        k,
        knn: idx.data.iter().map(|&v| v as usize).collect(),
        knn_dist: r.get_shaped("cache.knn_dist", n, k)?.data,
        idw: r.get_shaped("cache.idw", n, k)?.data,
        mesh_dist: r.get_shaped("cache.mesh_dist", n, 1)?.data,
        near_mesh: r.get_shaped("cache.near_mesh", n, 1)?.data.iter().map(|&v| v != 0.0).collect(),
        decay: r.get_shaped("cache.decay", n, 1)?.data,
    };
    if cache.knn.iter().any(|&i| i >= mesh.vertex_count()) {
        return Err(Error::Schema("prior cache references a vertex outside the mesh".into()));
    }

    let mut adam = Adam::new();
    adam.rejected = manifest.adam_rejected;
    for (name, &step) in &manifest.adam_steps {
        let m = r.get(&format!("adam.{name}.m"))?.data;
        let v = r.get(&format!("adam.{name}.v"))?.data;
        adam.moments.insert(name.clone(), Moments { m, v, step });
    }
    let stats = match (r.get("stats.accum"), r.get("stats.count")) {
        (Ok(a), Ok(c)) if a.rows == n && c.rows == n => {
            GradStats { accum: a.data, count: c.data.iter().map(|&v| v as u32).collect() }
        }
        _ => GradStats::new(n),
    };

    let cloud = GaussianCloud {
        positions: gauss.require("positions")?.to_rows(),
        rotations: gauss.require("rotations")?.to_rows(),
        log_scales: gauss.require("log_scales")?.to_rows(),
        opacity_logits: gauss.require("opacity_logits")?.data.clone(),
        colors: gauss.require("colors")?.to_rows(),
        source_tags,
    };
    cloud.validate()?;
    Ok(Checkpoint { manifest, model: Model { cloud, field, cache }, mesh, adam, stats })
}

impl Checkpoint {
    /// Rebuilds the training state for resuming against `dataset`.
    pub fn into_state(self, dataset: &crate::dataset::Dataset) -> Result<TrainState> {
        if dataset.fingerprint() != self.manifest.dataset_fingerprint {
            log::warn!("checkpoint was trained on a different dataset (fingerprint mismatch)");
        }
        let mut st = TrainState::from_model(dataset, self.manifest.config, self.model, self.adam, self.manifest.iteration)?;
        st.stats = self.stats;
        st.scene_extent = self.manifest.scene_extent;
        Ok(st)
    }
}
