use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::volume::{Modality, Volume};

/// One subject: the four imaging volumes plus optional label volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// T1, T1Gd, T2, FLAIR.
    pub modalities: [Volume; 4],
    pub seg: Option<Volume>,
    pub anat: Option<Volume>,
}

/// A 4-channel axial slice with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub z: usize,
    /// `[4, H, W]` in `[-1, 1]`, channels T1, T1Gd, T2, FLAIR.
    pub image: Tensor<f32>,
    pub tumour_present: bool,
    /// Tumour labels {0, 1, 2, 4}; the binary mask is `seg != 0`.
    pub seg: Vec<u8>,
    /// Anatomical labels {0..6}.
    pub anat: Vec<u8>,
    /// False when the source case had no anatomical volume.
    pub has_anatomy: bool,
}

impl SliceSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn tumour_mask(&self) -> Vec<bool> {
        self.seg.iter().map(|&l| l != 0).collect()
    }

    pub fn tumour_area(&self) -> usize {
        self.seg.iter().filter(|&&l| l != 0).count()
    }

    /// True when every channel of the raw slice was constant.
    pub fn is_blank(&self) -> bool {
        self.image.data().iter().all(|&v| v == 0.0)
    }
}

/// Per-slice min–max mapping onto `[-1, 1]`; a constant plane maps to zeros.
pub fn normalize_slice(plane: &[f32]) -> Result<Vec<f32>> {
    if let Some(bad) = plane.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("slice value {bad}")));
    }
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if plane.is_empty() || lo == hi {
        return Ok(vec![0.0; plane.len()]);
    }
    let span = hi - lo;
    Ok(plane
        .iter()
        .map(|&v| ((2.0 * (v as f64 - lo) / span - 1.0).clamp(-1.0, 1.0)) as f32)
        .collect())
}

fn to_labels(v: &Volume, z: usize) -> Vec<u8> {
    v.plane(z).iter().map(|&l| l as u8).collect()
}

/// Splits a case into its Z axial slices, normalizing each channel.
/// With `keep_empty` off, slices whose four channels are all constant are
/// dropped.
pub fn slice_volume(case: &Case, keep_empty: bool) -> Result<Vec<SliceSample>> {
    let extents = case.modalities[0].extents();
    let expected = Modality::IMAGING.iter().map(Some).chain([
        case.seg.as_ref().map(|_| &Modality::Seg),
        case.anat.as_ref().map(|_| &Modality::Anat),
    ]);
    let volumes = case.modalities.iter().map(Some).chain([case.seg.as_ref(), case.anat.as_ref()]);
    for (v, want) in volumes.zip(expected) {
        let (Some(v), Some(&want)) = (v, want) else { continue };
        if v.modality() != want {
            return Err(Error::invalid(format!(
                "case {}: expected {want} volume, found {}",
                case.id,
                v.modality()
            )));
        }
        if v.extents() != extents {
            return Err(Error::invalid(format!(
                "case {}: {want} volume has extents {:?}, expected {:?}",
                case.id,
                v.extents(),
                extents
            )));
        }
    }

    let [w, h, depth] = extents;
    let mut out = Vec::with_capacity(depth);
    for z in 0..depth {
        let mut image = Vec::with_capacity(4 * h * w);
        for m in &case.modalities {
            image.extend(normalize_slice(m.plane(z))?);
        }
        let seg = case.seg.as_ref().map_or_else(|| vec![0; h * w], |s| to_labels(s, z));
        let anat = case.anat.as_ref().map_or_else(|| vec![0; h * w], |a| to_labels(a, z));
        let sample = SliceSample {
            case_id: case.id.clone(),
            z,
            image: Tensor::new(&[4, h, w], image)?,
            tumour_present: seg.iter().any(|&l| l != 0),
            seg,
            anat,
            has_anatomy: case.anat.is_some(),
        };
        if keep_empty || !sample.is_blank() {
            out.push(sample);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_maps_to_zero() {
        let out = normalize_slice(&[0.0, 50.0, 100.0]).unwrap();
        assert_eq!(out, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_plane_is_zero() {
        assert_eq!(normalize_slice(&[3.0; 5]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(normalize_slice(&[0.0, f32::NAN]).is_err());
    }

    fn case(z: usize) -> Case {
        let vol = |m| {
            Volume::new([3, 2, z], (0..6 * z).map(|i| i as f32).collect(), m).unwrap()
        };
        let mut seg = vec![0.0; 6 * z];
        seg[6 * (z - 1)] = 2.0;
        Case {
            id: "c".into(),
            modalities: Modality::IMAGING.map(vol),
            seg: Some(Volume::new([3, 2, z], seg, Modality::Seg).unwrap()),
            anat: None,
        }
    }

    #[test]
    fn single_plane_gives_one_sample() {
        let s = slice_volume(&case(1), true).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].tumour_present);
        assert!(!s[0].has_anatomy);
        assert_eq!(s[0].image.shape(), &[4, 2, 3]);
    }

    #[test]
    fn extent_mismatch_names_the_modality() {
        let mut c = case(2);
        c.modalities[2] = Volume::new([3, 2, 1], vec![0.0; 6], Modality::T2).unwrap();
        let err = slice_volume(&c, true).unwrap_err().to_string();
        assert!(err.contains("t2"), "{err}");
    }
}
