use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Valid tumour segmentation labels: background, NET, ED, ET.
pub const SEG_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Anatomical labels: L/R cerebrum, L/R cerebellum, L/R ventricle.
pub const ANAT_LABELS: std::ops::RangeInclusive<u8> = 1..=6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    T1,
    T1Gd,
    T2,
    Flair,
    Seg,
    Anat,
}

impl Modality {
    /// Image channels in their fixed stacking order.
    pub const IMAGING: [Modality; 4] = [Modality::T1, Modality::T1Gd, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1Gd => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
            Modality::Seg => "seg",
            Modality::Anat => "anat",
        }
    }

    fn check_value(self, v: f32) -> bool {
        match self {
            Modality::Seg => SEG_LABELS.iter().any(|&l| l as f32 == v),
            Modality::Anat => v == v.trunc() && (0.0..=6.0).contains(&v),
            _ => v.is_finite(),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t1ce" | "t1gd" => Ok(Modality::T1Gd),
            "t2" => Ok(Modality::T2),
            "flair" => Ok(Modality::Flair),
            "seg" => Ok(Modality::Seg),
            "anat" => Ok(Modality::Anat),
            _ => Err(Error::invalid(format!("unknown modality {s:?}"))),
        }
    }
}

/// One modality's 3-D grid; voxel `(x, y, z)` lives at `x + X·(y + Y·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    data: Vec<f32>,
    modality: Modality,
    pub voxel_size: [f32; 3],
}

impl Volume {
    pub fn new(extents: [usize; 3], data: Vec<f32>, modality: Modality) -> Result<Self> {
        let n: usize = extents.iter().product();
        if extents.contains(&0) || n != data.len() {
            return Err(Error::shape("volume", &extents, &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|&&v| !modality.check_value(v)) {
            return Err(Error::invalid(format!("{modality} volume holds invalid value {bad}")));
        }
        Ok(Volume {
            extents,
            data,
            modality,
            voxel_size: [1.0; 3],
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Plane `z` as a row-major `Y × X` image.
    pub fn plane(&self, z: usize) -> &[f32] {
        let n = self.extents[0] * self.extents[1];
        &self.data[z * n..(z + 1) * n]
    }

    /// Same voxels under a different modality tag (validated).
    pub fn with_modality(self, modality: Modality) -> Result<Self> {
        let mut v = Volume::new(self.extents, self.data, modality)?;
        v.voxel_size = self.voxel_size;
        Ok(v)
    }
}
