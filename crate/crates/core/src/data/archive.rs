//! The slice archive: `MOCDS\0`, version, sample count, then one record
//! per sample.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::wire::{Reader, WriteLe};

use super::slice::SliceSample;
use super::volume::SEG_LABELS;

pub const DATASET_MAGIC: &[u8; 6] = b"MOCDS\0";
pub const DATASET_VERSION: u32 = 1;

/// An ordered collection of slices, usually grouped by case.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SliceSample>,
}

impl Dataset {
    pub fn new(samples: Vec<SliceSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Case ids in order of first appearance.
    pub fn case_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.case_id.as_str()))
            .map(|s| s.case_id.clone())
            .collect()
    }

    /// Sample indices per case, each list in dataset order.
    pub fn by_case(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            m.entry(s.case_id.as_str()).or_default().push(i);
        }
        m
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Samples whose case id is in `cases`, in dataset order.
    pub fn select_cases(&self, cases: &[String]) -> Dataset {
        let keep: std::collections::HashSet<&str> = cases.iter().map(String::as_str).collect();
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| keep.contains(s.case_id.as_str()))
                .cloned()
                .collect(),
        )
    }

    /// Common `(H, W)` of every sample; errors if sizes differ.
    pub fn image_size(&self) -> Result<Option<(usize, usize)>> {
        let Some(first) = self.samples.first() else {
            return Ok(None);
        };
        let size = (first.height(), first.width());
        if let Some(s) = self.samples.iter().find(|s| (s.height(), s.width()) != size) {
            return Err(Error::invalid(format!(
                "slice {}:{} is {}x{}, expected {}x{}",
                s.case_id,
                s.z,
                s.height(),
                s.width(),
                size.0,
                size.1
            )));
        }
        Ok(Some(size))
    }

    pub fn tumour_count(&self) -> usize {
        self.samples.iter().filter(|s| s.tumour_present).count()
    }

    /// Stacks the images of `indices` into `[N, 4, H, W]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = indices
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let shape = self.samples[*first].image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.samples[*first].image.len());
        for &i in indices {
            let img = &self.samples[i].image;
            if img.shape() != shape.as_slice() {
                return Err(Error::shape("batch", img.shape(), &shape));
            }
            data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(&[indices.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Tumour flags of `indices` as 0/1.
    pub fn labels<T: Scalar>(&self, indices: &[usize]) -> Vec<T> {
        indices
            .iter()
            .map(|&i| if self.samples[i].tumour_present { T::one() } else { T::zero() })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.put_u32(DATASET_VERSION);
        out.put_u64(self.samples.len() as u64);
        for s in &self.samples {
            out.put_str(&s.case_id);
            out.put_u32(s.z as u32);
            out.put_u32(s.height() as u32);
            out.put_u32(s.width() as u32);
            out.put_u8(s.tumour_present as u8);
            out.put_u8(s.has_anatomy as u8);
            for &v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.seg);
            out.extend_from_slice(&s.anat);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC, "dataset archive")?;
        r.version(DATASET_VERSION)?;
        let n = r.count("sample count", 18)?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(read_sample(&mut r)?);
        }
        r.finish()?;
        Ok(Dataset { samples })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn flag(r: &mut Reader<'_>, what: &str) -> Result<bool> {
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Parse {
            offset: r.offset() - 1,
            message: format!("{what} byte {v} is not 0 or 1"),
        }),
    }
}

fn read_sample(r: &mut Reader<'_>) -> Result<SliceSample> {
    let case_id = r.string("case id")?;
    let z = r.u32("z index")? as usize;
    let at = r.offset();
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let pixels = h
        .checked_mul(w)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::Parse {
            offset: at,
            message: format!("invalid slice size {h}x{w}"),
        })?;
    let tumour_present = flag(r, "tumour flag")?;
    let has_anatomy = flag(r, "anatomy flag")?;

    let at = r.offset();
    let raw = r.take(
        pixels.checked_mul(16).ok_or_else(|| r.error("slice size overflow"))?,
        "image",
    )?;
    let image: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = image.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Parse {
            offset: at,
            message: format!("slice {case_id}:{z}: image value {bad} outside [-1, 1]"),
        });
    }
    let at = r.offset();
    let seg = r.take(pixels, "segmentation")?.to_vec();
    if let Some(bad) = seg.iter().find(|l| !SEG_LABELS.contains(l)) {
        return Err(Error::Parse {
            offset: at,
            message: format!("slice {case_id}:{z}: segmentation label {bad}"),
        });
    }
    if tumour_present != seg.iter().any(|&l| l != 0) {
        return Err(Error::Parse {
            offset: at,
            message: format!("slice {case_id}:{z}: tumour flag disagrees with the mask"),
        });
    }
    let at = r.offset();
    let anat = r.take(pixels, "anatomy")?.to_vec();
    if let Some(bad) = anat.iter().find(|&&l| l > 6) {
        return Err(Error::Parse {
            offset: at,
            message: format!("slice {case_id}:{z}: anatomical label {bad}"),
        });
    }
    Ok(SliceSample {
        case_id,
        z,
        image: Tensor::new(&[4, h, w], image)?,
        tumour_present,
        seg,
        anat,
        has_anatomy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(case: &str, z: usize, tumour: bool) -> SliceSample {
        let mut seg = vec![0u8; 6];
        if tumour {
            seg[2] = 4;
        }
        SliceSample {
            case_id: case.into(),
            z,
            image: Tensor::from_fn(&[4, 2, 3], |i| (i as f32 / 12.0) - 1.0),
            tumour_present: tumour,
            seg,
            anat: vec![0, 1, 2, 3, 4, 6],
            has_anatomy: true,
        }
    }

    #[test]
    fn empty_round_trip() {
        let d = Dataset::default();
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = Dataset::new(vec![sample("a", 0, false), sample("a", 1, true)]);
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_count_is_a_parse_error() {
        let d = Dataset::new(vec![sample("a", 0, false)]);
        let mut bytes = d.to_bytes();
        bytes[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = Dataset::default().to_bytes();
        bytes[6..10].copy_from_slice(&7u32.to_le_bytes());
        match Dataset::from_bytes(&bytes) {
            Err(Error::Version { found: 7, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn case_grouping() {
        let d = Dataset::new(vec![sample("b", 0, false), sample("a", 0, true), sample("b", 1, true)]);
        assert_eq!(d.case_ids(), vec!["b".to_string(), "a".to_string()]);
        assert_eq!(d.by_case()["b"], vec![0, 2]);
        assert_eq!(d.tumour_count(), 2);
    }
}
