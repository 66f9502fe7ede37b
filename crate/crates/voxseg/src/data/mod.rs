//! Volume/label data model, the on-disk file format, and the synthetic
//! lifespan-phantom generator.

mod io;
mod phantom;

pub use io::{
    read_labels, read_manifest, read_volume, write_labels, write_manifest, write_volume,
    ManifestEntry, Pool,
};
pub use phantom::{corrupt_labels, generate_phantom, ContrastSchedule, PhantomSpec};

use crate::error::{Error, Result};

/// Multi-channel 3D intensity grid with physical voxel spacing. Voxels are
/// stored channel-major (`[channels][X][Y][Z]`, Z fastest) as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub spacing_mm: (f64, f64, f64),
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        channels: usize,
        spacing_mm: (f64, f64, f64),
        voxels: Vec<f32>,
    ) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2 * channels;
        if voxels.len() != n {
            return Err(Error::shape("Volume::new", n, voxels.len()));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(Error::domain("Volume::new", "spacing must be positive"));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 || channels == 0 {
            return Err(Error::domain("Volume::new", "dims and channels must be positive"));
        }
        Ok(Volume {
            dims,
            channels,
            spacing_mm,
            voxels,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// One channel's contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxel_count();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }
}

/// 3D grid of class indices aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: (usize, usize, usize),
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u8>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if labels.len() != n {
            return Err(Error::shape("LabelMap::new", n, labels.len()));
        }
        Ok(LabelMap { dims, labels })
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }

    /// Checks every label against the class count; files with out-of-range
    /// labels read back unchanged, this is the separate validation step.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = self.labels.iter().filter(|&&l| (l as usize) >= classes).count();
        if bad > 0 {
            return Err(Error::domain(
                "LabelMap::validate",
                format!("{bad} voxels carry labels >= {classes}"),
            ));
        }
        Ok(())
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Flat index helper for (x, y, z) in a given grid, Z fastest.
pub fn flat_index(dims: (usize, usize, usize), x: usize, y: usize, z: usize) -> usize {
    (x * dims.1 + y) * dims.2 + z
}
