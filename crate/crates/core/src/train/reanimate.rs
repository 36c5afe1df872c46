//! Driving a trained rig with new parameters.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::mesh::MorphableMesh;
use crate::scene::Camera;

/// A camera given either as an index into a camera table or inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraRef {
    Index(usize),
    Inline(Box<Camera>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveEntry {
    pub exp: Vec<f64>,
    pub pose: [f64; 4],
    pub camera: CameraRef,
}

impl CameraRef {
    pub fn resolve<'a>(&'a self, table: &'a [Camera]) -> Result<&'a Camera> {
        match self {
            CameraRef::Index(i) => table
                .get(*i)
                .ok_or_else(|| Error::Argument(format!("camera index {i} out of range ({} cameras)", table.len()))),
            CameraRef::Inline(c) => {
                c.validate()?;
                Ok(c)
            }
        }
    }
}

pub fn read_drive(path: &std::path::Path) -> Result<Vec<DriveEntry>> {
    crate::dataset::read_json(path)
}

/// Renders each drive entry with no per-frame code.
pub fn reanimate(model: &Model, mesh: &MorphableMesh, drive: &[DriveEntry], cameras: &[Camera]) -> Result<Vec<Image>> {
    drive
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let cam = d.camera.resolve(cameras)?;
            model
                .render(mesh, &d.exp, d.pose, None, cam)
                .map_err(|e| match e {
                    Error::Argument(m) => Error::Argument(format!("drive entry {i}: {m}")),
                    other => other,
                })
        })
        .collect()
}
