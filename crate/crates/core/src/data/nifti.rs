//! Single-file NIfTI-1 (`.nii`) reader and writer.

use std::path::Path;

use crate::error::{Error, Result};

use super::volume::{Modality, Volume};

const HEADER_SIZE: usize = 348;
const WRITE_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().expect("in header");
        if self.endian == Endian::Big {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

/// Decodes a `.nii` byte buffer; either byte order is accepted.
pub fn parse_nifti(bytes: &[u8], modality: Modality) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            actual: bytes.len(),
        });
    }
    let probe: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    let endian = if i32::from_le_bytes(probe) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(probe) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::UnsupportedFormat(format!(
            "sizeof_hdr is neither 348 little- nor big-endian ({probe:?})"
        )));
    };
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?} is not \"n+1\\0\"",
            String::from_utf8_lossy(&bytes[OFF_MAGIC..OFF_MAGIC + 4])
        )));
    }
    let h = Fields { buf: bytes, endian };

    let rank = h.i16(OFF_DIM);
    if !(1..=7).contains(&rank) {
        return Err(Error::UnsupportedFormat(format!("dim[0] = {rank}")));
    }
    let mut extents = [1usize; 3];
    for d in 1..=rank as usize {
        let e = h.i16(OFF_DIM + 2 * d);
        if e < 1 {
            return Err(Error::UnsupportedFormat(format!("dim[{d}] = {e}")));
        }
        if d <= 3 {
            extents[d - 1] = e as usize;
        } else if e != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "dim[{d}] = {e}: only 3-D volumes are supported"
            )));
        }
    }

    let datatype = NiftiDatatype::from_code(h.i16(OFF_DATATYPE))?;
    let bitpix = h.i16(OFF_BITPIX);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::UnsupportedFormat(format!(
            "bitpix {bitpix} does not match datatype {}",
            datatype.code()
        )));
    }
    let vox_offset = h.f32(OFF_VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(Error::UnsupportedFormat(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n: usize = extents.iter().product();
    let expected = start + n * datatype.bytes();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }

    let (slope, inter) = match (h.f32(OFF_SCL_SLOPE), h.f32(OFF_SCL_INTER)) {
        (s, i) if s != 0.0 && s.is_finite() && i.is_finite() => (s, i),
        _ => (1.0, 0.0),
    };
    let payload = Fields {
        buf: &bytes[start..expected],
        endian,
    };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let raw = match datatype {
            NiftiDatatype::Uint8 => payload.buf[i] as f32,
            NiftiDatatype::Int16 => payload.i16(2 * i) as f32,
            NiftiDatatype::Float32 => payload.f32(4 * i),
        };
        data.push(if (slope, inter) == (1.0, 0.0) { raw } else { raw * slope + inter });
    }
    let mut volume = Volume::new(extents, data, modality)?;
    for (d, size) in volume.voxel_size.iter_mut().enumerate() {
        let p = h.f32(OFF_PIXDIM + 4 * (d + 1));
        if p.is_finite() && p > 0.0 {
            *size = p;
        }
    }
    Ok(volume)
}

pub fn read_nifti(path: impl AsRef<Path>, modality: Modality) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes, modality)
}

struct Out {
    buf: Vec<u8>,
    endian: Endian,
}

impl Out {
    fn put<const N: usize>(&mut self, at: usize, mut b: [u8; N]) {
        if self.endian == Endian::Big {
            b.reverse();
        }
        self.buf[at..at + N].copy_from_slice(&b);
    }
}

/// Encodes a volume with unit slope and zero intercept. Integer datatypes
/// require every voxel to be an in-range integer.
pub fn write_nifti(volume: &Volume, datatype: NiftiDatatype, endian: Endian) -> Result<Vec<u8>> {
    let [x, y, z] = volume.extents();
    if [x, y, z].iter().any(|&e| e > i16::MAX as usize) {
        return Err(Error::invalid(format!("extents {:?} exceed the NIfTI-1 limit", volume.extents())));
    }
    let fits = |v: f32, lo: f32, hi: f32| v == v.trunc() && (lo..=hi).contains(&v);
    let ok = match datatype {
        NiftiDatatype::Uint8 => volume.data().iter().all(|&v| fits(v, 0.0, 255.0)),
        NiftiDatatype::Int16 => volume.data().iter().all(|&v| fits(v, -32768.0, 32767.0)),
        NiftiDatatype::Float32 => true,
    };
    if !ok {
        return Err(Error::invalid(format!(
            "{} volume cannot be stored losslessly as datatype {}",
            volume.modality(),
            datatype.code()
        )));
    }

    let mut o = Out {
        buf: vec![0u8; WRITE_OFFSET + volume.data().len() * datatype.bytes()],
        endian,
    };
    o.put(0, (HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, x as i16, y as i16, z as i16, 1, 1, 1, 1];
    for (d, v) in dims.iter().enumerate() {
        o.put(OFF_DIM + 2 * d, v.to_le_bytes());
    }
    o.put(OFF_DATATYPE, datatype.code().to_le_bytes());
    o.put(OFF_BITPIX, (8 * datatype.bytes() as i16).to_le_bytes());
    o.put(OFF_PIXDIM, 1.0f32.to_le_bytes());
    for (d, &p) in volume.voxel_size.iter().enumerate() {
        o.put(OFF_PIXDIM + 4 * (d + 1), p.to_le_bytes());
    }
    o.put(OFF_VOX_OFFSET, (WRITE_OFFSET as f32).to_le_bytes());
    o.put(OFF_SCL_SLOPE, 1.0f32.to_le_bytes());
    o.put(OFF_SCL_INTER, 0.0f32.to_le_bytes());
    o.buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);

    for (i, &v) in volume.data().iter().enumerate() {
        let at = WRITE_OFFSET + i * datatype.bytes();
        match datatype {
            NiftiDatatype::Uint8 => o.buf[at] = v as u8,
            NiftiDatatype::Int16 => o.put(at, (v as i16).to_le_bytes()),
            NiftiDatatype::Float32 => o.put(at, v.to_le_bytes()),
        }
    }
    Ok(o.buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(modality: Modality) -> Volume {
        let data = (0..48).map(|i| (i % 7) as f32 - 2.0).collect();
        Volume::new([4, 4, 3], data, modality).unwrap()
    }

    #[test]
    fn float32_round_trip() {
        let v = Volume::new(
            [4, 4, 3],
            (0..48).map(|i| (i as f32 * 0.37).sin()).collect(),
            Modality::Flair,
        )
        .unwrap();
        let bytes = write_nifti(&v, NiftiDatatype::Float32, Endian::Little).unwrap();
        assert_eq!(bytes.len(), 352 + 48 * 4);
        assert_eq!(parse_nifti(&bytes, Modality::Flair).unwrap(), v);
    }

    #[test]
    fn big_endian_header_is_detected() {
        let v = sample(Modality::T1);
        let bytes = write_nifti(&v, NiftiDatatype::Int16, Endian::Big).unwrap();
        assert_eq!(&bytes[0..4], &348i32.to_be_bytes());
        assert_eq!(parse_nifti(&bytes, Modality::T1).unwrap(), v);
    }

    #[test]
    fn bad_magic_is_unsupported() {
        let mut bytes = write_nifti(&sample(Modality::T2), NiftiDatatype::Float32, Endian::Little).unwrap();
        bytes[344..348].copy_from_slice(b"bad\0");
        assert!(matches!(parse_nifti(&bytes, Modality::T2), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn unknown_datatype_is_named() {
        let mut bytes = write_nifti(&sample(Modality::T2), NiftiDatatype::Float32, Endian::Little).unwrap();
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes, Modality::T2), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let bytes = write_nifti(&sample(Modality::T2), NiftiDatatype::Float32, Endian::Little).unwrap();
        let short = &bytes[..bytes.len() - 5];
        match parse_nifti(short, Modality::T2) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slope_and_intercept_are_applied() {
        let v = Volume::new([2, 1, 1], vec![1.0, 3.0], Modality::T1).unwrap();
        let mut bytes = write_nifti(&v, NiftiDatatype::Uint8, Endian::Little).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(parse_nifti(&bytes, Modality::T1).unwrap().data(), &[2.5, 6.5]);
    }

    #[test]
    fn lossy_integer_write_is_rejected() {
        let v = Volume::new([2, 1, 1], vec![0.5, 300.0], Modality::T1).unwrap();
        assert!(write_nifti(&v, NiftiDatatype::Uint8, Endian::Little).is_err());
        assert!(write_nifti(&v, NiftiDatatype::Int16, Endian::Little).is_err());
    }
}
