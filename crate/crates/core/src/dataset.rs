//! Dataset directories: rig parameters, cameras, ground-truth frames and
//! head masks.
//!
//! ```text
//! manifest.json          version, image size, splits, camera table
//! init_points.json       background points {positions, colors}
//! mesh/                  morphable mesh
//! frames/00000.png       8-bit image, x^(1/2.2) encoded
//! frames/00000.rgbf      lossless float copy (preferred when present)
//! frames/00000.params.json   {exp: [E], pose: [4], camera_index}
//! masks/00000.png        255 = head
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgbuf::{Image, Mask, PngEncoding};
use crate::mesh::MorphableMesh;
use crate::scene::{Camera, FrameRecord};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Setting1,
    Setting2,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Setting1 => "setting1",
            Split::Setting2 => "setting2",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "setting1" => Ok(Split::Setting1),
            "setting2" => Ok(Split::Setting2),
            other => Err(Error::Argument(format!("unknown split {other:?} (train, setting1, setting2)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub setting1: Vec<usize>,
    pub setting2: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Setting1 => &self.setting1,
            Split::Setting2 => &self.setting2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub expression_count: usize,
    pub frame_count: usize,
    pub splits: Splits,
    pub cameras: Vec<Camera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub exp: Vec<f64>,
    pub pose: [f64; 4],
    pub camera_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitPoints {
    pub positions: Vec<[f64; 3]>,
    /// Empty when the points carry no color.
    #[serde(default)]
    pub colors: Vec<[f64; 3]>,
}

pub fn frame_stem(i: usize) -> String {
    format!("{i:05}")
}

pub fn frame_png_path(root: &Path, i: usize) -> PathBuf {
    root.join("frames").join(format!("{}.png", frame_stem(i)))
}

pub fn frame_dump_path(root: &Path, i: usize) -> PathBuf {
    root.join("frames").join(format!("{}.rgbf", frame_stem(i)))
}

pub fn frame_params_path(root: &Path, i: usize) -> PathBuf {
    root.join("frames").join(format!("{}.params.json", frame_stem(i)))
}

pub fn mask_path(root: &Path, i: usize) -> PathBuf {
    root.join("masks").join(format!("{}.png", frame_stem(i)))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::load(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub mesh: MorphableMesh,
    pub params: Vec<FrameParams>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub init_points: InitPoints,
    fingerprint: String,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::load(&manifest_path, "missing dataset manifest"));
        }
        let manifest_bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.frame_count == 0 {
            return Err(Error::Schema("dataset has no frames".into()));
        }
        if manifest.cameras.is_empty() {
            return Err(Error::Schema("dataset has no cameras".into()));
        }
        for c in &manifest.cameras {
            c.validate()?;
            if (c.width, c.height) != (manifest.width, manifest.height) {
                return Err(Error::Schema(format!(
                    "camera image size {}x{} differs from dataset {}x{}",
                    c.width, c.height, manifest.width, manifest.height
                )));
            }
        }
        let n = manifest.frame_count;
        for split in [Split::Train, Split::Setting1, Split::Setting2] {
            if let Some(&i) = manifest.splits.get(split).iter().find(|&&i| i >= n) {
                return Err(Error::Schema(format!("{split} split references frame {i} >= {n}")));
            }
        }
        if manifest.splits.train.is_empty() {
            return Err(Error::Schema("dataset has no training frames".into()));
        }
        let mesh = MorphableMesh::load(&root.join("mesh"))?;
        if mesh.expression_count() != manifest.expression_count {
            return Err(Error::Schema(format!(
                "manifest says {} expressions, mesh has {}",
                manifest.expression_count,
                mesh.expression_count()
            )));
        }
        let mut hasher = Sha256::new();
        hasher.update(&manifest_bytes);
        let mut params = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let pp = frame_params_path(root, i);
            if !pp.is_file() {
                return Err(Error::load(&pp, "missing frame parameters"));
            }
            let p: FrameParams = read_json(&pp)?;
            if p.exp.len() != manifest.expression_count {
                return Err(Error::Schema(format!(
                    "frame {i}: {} expression values, expected {}",
                    p.exp.len(),
                    manifest.expression_count
                )));
            }
            if p.camera_index >= manifest.cameras.len() {
                return Err(Error::Schema(format!("frame {i}: camera index {} out of range", p.camera_index)));
            }
            let dump = frame_dump_path(root, i);
            let png = frame_png_path(root, i);
            let image = if dump.is_file() {
                let bytes = fs::read(&dump).map_err(|e| Error::io(&dump, e))?;
                hasher.update(&bytes);
                Image::decode_dump(&bytes).map_err(|r| Error::load(&dump, r))?
            } else if png.is_file() {
                let bytes = fs::read(&png).map_err(|e| Error::io(&png, e))?;
                hasher.update(&bytes);
                Image::load_png(&png, PngEncoding::Gamma22)?
            } else {
                return Err(Error::load(&png, "missing frame image"));
            };
            if (image.width, image.height) != (manifest.width, manifest.height) {
                return Err(Error::Schema(format!(
                    "frame {i} is {}x{}, dataset is {}x{}",
                    image.width, image.height, manifest.width, manifest.height
                )));
            }
            let mp = mask_path(root, i);
            let mask = if mp.is_file() { Mask::load_png(&mp)? } else { Mask::full(manifest.width, manifest.height) };
            hasher.update(serde_json::to_vec(&p).unwrap_or_default());
            params.push(p);
            images.push(image);
            masks.push(mask);
        }
        let ip = root.join("init_points.json");
        let init_points: InitPoints = if ip.is_file() { read_json(&ip)? } else { InitPoints::default() };
        if !init_points.colors.is_empty() && init_points.colors.len() != init_points.positions.len() {
            return Err(Error::Schema("init point colors do not match positions".into()));
        }
        hasher.update(serde_json::to_vec(&init_points).unwrap_or_default());
        let fingerprint = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Dataset { root: root.to_path_buf(), manifest, mesh, params, images, masks, init_points, fingerprint })
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.manifest.splits.get(split)
    }

    pub fn camera(&self, frame: usize) -> &Camera {
        &self.manifest.cameras[self.params[frame].camera_index]
    }

    pub fn frame(&self, i: usize) -> Result<FrameRecord> {
        if i >= self.frame_count() {
            return Err(Error::Argument(format!("frame {i} out of range (dataset has {})", self.frame_count())));
        }
        let p = &self.params[i];
        Ok(FrameRecord {
            image: self.images[i].clone(),
            camera: self.camera(i).clone(),
            gamma_exp: p.exp.clone(),
            gamma_pose: p.pose,
            frame_index: i,
        })
    }

    /// SHA-256 over the manifest, frame parameters, images and init points.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}
