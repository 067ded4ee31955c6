//! Frame sequences with optional ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::PanoramaView;
use crate::moving::{ObjectClass, ObjectInstance};
use crate::raster::{Image, Mask, Plane};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLabel {
    pub class: ObjectClass,
    pub is_moving: bool,
}

/// Consecutive captures. `instances` rasters hold `0` for background and an
/// instance id elsewhere; ids are stable across frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub views: Vec<PanoramaView>,
    pub instances: Option<Vec<Plane<u8>>>,
    pub labels: BTreeMap<u32, InstanceLabel>,
    /// Renders without moving objects, where available.
    pub clean: Option<Vec<Image>>,
}

impl Sequence {
    pub fn new(views: Vec<PanoramaView>) -> Result<Self> {
        let seq = Self {
            views,
            instances: None,
            labels: BTreeMap::new(),
            clean: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::format("sequence has no frames"))?;
        for (k, v) in self.views.iter().enumerate() {
            if v.frame_index != first.frame_index + k {
                return Err(Error::format(format!(
                    "frame indices not contiguous: position {k} holds frame {}",
                    v.frame_index
                )));
            }
            if v.grid != first.grid {
                return Err(Error::format(format!("frame {} has a different grid", v.frame_index)));
            }
        }
        let n = self.views.len();
        let dims = (first.grid.width, first.grid.height);
        if let Some(inst) = &self.instances {
            if inst.len() != n || inst.iter().any(|p| p.dims() != dims) {
                return Err(Error::format("instance rasters do not match the frames"));
            }
        }
        if let Some(clean) = &self.clean {
            if clean.len() != n || clean.iter().any(|p| p.dims() != dims) {
                return Err(Error::format("clean renders do not match the frames"));
            }
        }
        Ok(())
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.frame_index).collect()
    }

    fn position(&self, frame: usize) -> Result<usize> {
        self.views
            .iter()
            .position(|v| v.frame_index == frame)
            .ok_or_else(|| Error::Boundary {
                t: frame,
                missing: vec![frame as i64],
            })
    }

    pub fn view(&self, frame: usize) -> Result<&PanoramaView> {
        Ok(&self.views[self.position(frame)?])
    }

    pub fn instance_raster(&self, frame: usize) -> Result<&Plane<u8>> {
        let k = self.position(frame)?;
        self.instances
            .as_ref()
            .map(|r| &r[k])
            .ok_or_else(|| Error::format("sequence has no instance rasters"))
    }

    pub fn clean(&self, frame: usize) -> Option<&Image> {
        let k = self.position(frame).ok()?;
        self.clean.as_ref().map(|c| &c[k])
    }

    /// Visible labeled instances of `frame`, in id order.
    pub fn instances_at(&self, frame: usize) -> Result<Vec<ObjectInstance>> {
        let raster = self.instance_raster(frame)?;
        let mut pixels: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in raster.data().iter().enumerate() {
            if id != 0 {
                pixels.entry(id as u32).or_default().push(i);
            }
        }
        pixels
            .into_iter()
            .map(|(id, px)| {
                let label = self
                    .labels
                    .get(&id)
                    .ok_or_else(|| Error::Consistency(format!("instance {id} has no label")))?;
                Ok(ObjectInstance::new(id, label.class, px))
            })
            .collect()
    }

    /// Union of the pixels of the given instance ids at `frame`.
    pub fn mask_of(&self, frame: usize, ids: &[u32]) -> Result<Mask> {
        let raster = self.instance_raster(frame)?;
        Ok(raster.map(|&id| id != 0 && ids.contains(&(id as u32))))
    }

    pub fn moving_ids(&self) -> Vec<u32> {
        self.labels
            .iter()
            .filter(|(_, l)| l.is_moving)
            .map(|(&id, _)| id)
            .collect()
    }
}
