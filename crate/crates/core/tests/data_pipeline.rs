mod common;

use common::{phantom_dataset, rng};
use mocae::data::{
    generate_phantom, normalize_slice, parse_nifti, read_nifti, slice_volume, write_nifti, Case, Dataset,
    Endian, Modality, NiftiDatatype, PhantomConfig, Volume,
};
use mocae::Error;
use proptest::prelude::*;
use rand::Rng;

/// A header assembled field by field, independent of the crate's writer.
fn handmade(big: bool, dims: [i16; 3], datatype: i16, bitpix: i16, slope: f32, inter: f32, payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    let put = |b: &mut Vec<u8>, at: usize, le: &[u8]| {
        let mut v = le.to_vec();
        if big {
            v.reverse();
        }
        b[at..at + v.len()].copy_from_slice(&v);
    };
    put(&mut b, 0, &348i32.to_le_bytes());
    let dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut b, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut b, 70, &datatype.to_le_bytes());
    put(&mut b, 72, &bitpix.to_le_bytes());
    for i in 0..4 {
        put(&mut b, 76 + 4 * i, &1.0f32.to_le_bytes());
    }
    put(&mut b, 108, &352.0f32.to_le_bytes());
    put(&mut b, 112, &slope.to_le_bytes());
    put(&mut b, 116, &inter.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    b.extend_from_slice(payload);
    b
}

#[test]
fn handmade_big_endian_int16_is_decoded() {
    let values: [i16; 8] = [-3, 0, 7, 300, -32768, 32767, 1, 2];
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    let bytes = handmade(true, [2, 2, 2], 4, 16, 2.0, 1.0, &payload);
    let v = parse_nifti(&bytes, Modality::T2).unwrap();
    assert_eq!(v.extents(), [2, 2, 2]);
    let expected: Vec<f32> = values.iter().map(|&x| x as f32 * 2.0 + 1.0).collect();
    assert_eq!(v.data(), &expected[..]);
    // x fastest, then y, then z.
    assert_eq!(v.get(1, 1, 0), 601.0);
}

#[test]
fn handmade_little_endian_uint8_with_zero_slope_is_raw() {
    let payload: Vec<u8> = (0..12).collect();
    let bytes = handmade(false, [3, 2, 2], 2, 8, 0.0, 5.0, &payload);
    let v = parse_nifti(&bytes, Modality::Flair).unwrap();
    assert_eq!(v.data(), &(0..12).map(|i| i as f32).collect::<Vec<_>>()[..]);
}

#[test]
fn bad_magic_and_truncation() {
    let mut bytes = handmade(false, [1, 1, 1], 16, 32, 1.0, 0.0, &1.5f32.to_le_bytes());
    assert_eq!(parse_nifti(&bytes, Modality::T1).unwrap().data(), &[1.5]);
    bytes[344..348].copy_from_slice(b"bad\0");
    assert!(matches!(parse_nifti(&bytes, Modality::T1), Err(Error::UnsupportedFormat(_))));
    assert!(parse_nifti(&bytes[..100], Modality::T1).is_err());
    let short = handmade(false, [2, 2, 2], 16, 32, 1.0, 0.0, &[0; 8]);
    assert!(parse_nifti(&short, Modality::T1).is_err());
}

fn volume(modality: Modality, f: impl Fn(usize) -> f32) -> Volume {
    Volume::new([5, 4, 3], (0..60).map(f).collect(), modality).unwrap()
}

#[test]
fn writer_reader_identity_for_every_datatype_and_byte_order() {
    let fixtures = [
        (volume(Modality::T1, |i| (i as f32 * 0.37).sin() * 1e3), NiftiDatatype::Float32),
        (volume(Modality::T2, |i| i as f32 * 97.0 - 3000.0), NiftiDatatype::Int16),
        (volume(Modality::Seg, |i| [0.0, 1.0, 2.0, 4.0][i % 4]), NiftiDatatype::Uint8),
        (volume(Modality::Anat, |i| (i % 7) as f32), NiftiDatatype::Uint8),
    ];
    for (v, dt) in &fixtures {
        for endian in [Endian::Little, Endian::Big] {
            let bytes = write_nifti(v, *dt, endian).unwrap();
            assert_eq!(&bytes[344..348], b"n+1\0");
            let back = parse_nifti(&bytes, v.modality()).unwrap();
            assert_eq!(&back, v, "{dt:?} {endian:?}");
        }
    }
    let le = write_nifti(&fixtures[0].0, NiftiDatatype::Float32, Endian::Little).unwrap();
    let be = write_nifti(&fixtures[0].0, NiftiDatatype::Float32, Endian::Big).unwrap();
    assert_eq!(&le[0..4], &348i32.to_le_bytes());
    assert_eq!(&be[0..4], &348i32.to_be_bytes());
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = volume(Modality::T1Gd, |i| i as f32 / 7.0);
    let path = dir.path().join("t1ce.nii");
    std::fs::write(&path, write_nifti(&v, NiftiDatatype::Float32, Endian::Big).unwrap()).unwrap();
    assert_eq!(read_nifti(&path, Modality::T1Gd).unwrap(), v);
    assert!(read_nifti(dir.path().join("missing.nii"), Modality::T1).is_err());
}

fn synthetic_case(extents: [usize; 3], seg_planes: &[usize]) -> Case {
    let n = extents.iter().product::<usize>();
    let plane = extents[0] * extents[1];
    let img = |m, k: f32| Volume::new(extents, (0..n).map(|i| ((i % 251) as f32) * k).collect(), m).unwrap();
    let mut seg = vec![0f32; n];
    for &z in seg_planes {
        seg[z * plane + plane / 2] = 2.0;
    }
    Case {
        id: "case".into(),
        modalities: [img(Modality::T1, 1.0), img(Modality::T1Gd, 2.0), img(Modality::T2, 3.0), img(Modality::Flair, 4.0)],
        seg: Some(Volume::new(extents, seg, Modality::Seg).unwrap()),
        anat: None,
    }
}

#[test]
fn full_size_volume_gives_one_sample_per_plane() {
    let case = synthetic_case([240, 240, 155], &[10, 80]);
    let samples = slice_volume(&case, true).unwrap();
    assert_eq!(samples.len(), 155);
    assert!(samples.iter().all(|s| s.image.shape() == [4, 240, 240]));
    assert_eq!(samples.iter().filter(|s| s.tumour_present).count(), 2);
}

#[test]
fn tumour_flags_match_a_direct_plane_scan() {
    let cfg = PhantomConfig {
        size: 32,
        slices: 12,
        n_cases: 4,
        tumour_probability: 1.0,
        ..PhantomConfig::default()
    };
    for case in generate_phantom(&cfg).unwrap() {
        let seg = case.seg.as_ref().unwrap();
        let scan = (0..12).filter(|&z| seg.plane(z).iter().any(|&v| v != 0.0)).count();
        let samples = slice_volume(&case, true).unwrap();
        assert_eq!(samples.iter().filter(|s| s.tumour_present).count(), scan);
        for s in &samples {
            assert_eq!(s.seg.iter().map(|&l| l as f32).collect::<Vec<_>>(), seg.plane(s.z));
        }
    }
}

proptest! {
    #[test]
    fn normalized_planes_span_the_unit_interval(seed: u64, len in 2usize..400) {
        let mut r = rng(seed);
        let plane: Vec<f32> = (0..len).map(|_| r.random_range(-500.0..500.0)).collect();
        prop_assume!(plane.iter().any(|&v| v != plane[0]));
        let out = normalize_slice(&plane).unwrap();
        let lo = out.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!((f64::from(lo) + 1.0).abs() < 1e-9);
        prop_assert!((f64::from(hi) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn phantom_tumour_volume_fraction_lies_within_bounds() {
    let cfg = PhantomConfig {
        size: 32,
        slices: 32,
        n_cases: 100,
        tumour_probability: 1.0,
        ..PhantomConfig::default()
    };
    let cases = generate_phantom(&cfg).unwrap();
    assert_eq!(cases.len(), 100);
    let (lo, hi) = cfg.tumour_fraction_bounds();
    let mut total = 0.0;
    for c in &cases {
        let seg = c.seg.as_ref().unwrap().data();
        let frac = seg.iter().filter(|&&v| v != 0.0).count() as f64 / seg.len() as f64;
        assert!(frac > 0.0, "{} has no tumour", c.id);
        assert!(frac <= hi, "{}: {frac} above {hi}", c.id);
        total += frac;
    }
    let mean = total / 100.0;
    assert!(mean >= lo && mean <= hi, "mean {mean} outside [{lo}, {hi}]");
}

#[test]
fn phantom_determinism_and_labels() {
    let cfg = PhantomConfig {
        size: 32,
        slices: 8,
        n_cases: 3,
        seed: 9,
        ..PhantomConfig::default()
    };
    assert_eq!(generate_phantom(&cfg).unwrap(), generate_phantom(&cfg).unwrap());
    let none = PhantomConfig {
        tumour_probability: 0.0,
        ..cfg.clone()
    };
    for c in generate_phantom(&none).unwrap() {
        assert!(c.seg.unwrap().data().iter().all(|&v| v == 0.0));
    }
    let data = phantom_dataset(&cfg);
    assert_eq!(data.len(), 24);
    assert!(data.samples.iter().all(|s| s.has_anatomy && s.seg.iter().all(|l| [0, 1, 2, 4].contains(l))));
}

#[test]
fn archive_round_trips_bit_exactly() {
    let cfg = PhantomConfig {
        size: 32,
        slices: 6,
        n_cases: 1,
        tumour_probability: 1.0,
        seed: 3,
        ..PhantomConfig::default()
    };
    let data = phantom_dataset(&cfg);
    let bytes = data.to_bytes();
    assert_eq!(&bytes[..6], b"MOCDS\0");
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mocds");
    data.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Dataset::read(&path).unwrap(), data);

    let empty = Dataset::new(Vec::new());
    assert_eq!(Dataset::from_bytes(&empty.to_bytes()).unwrap(), empty);
}

#[test]
fn corrupted_archives_are_parse_errors() {
    let cfg = PhantomConfig {
        size: 32,
        slices: 2,
        n_cases: 1,
        ..PhantomConfig::default()
    };
    let bytes = phantom_dataset(&cfg).to_bytes();
    let mut huge = bytes.clone();
    huge[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(Dataset::from_bytes(&huge), Err(Error::Parse { .. })));
    for cut in [3, 12, 30, bytes.len() - 1] {
        assert!(Dataset::from_bytes(&bytes[..cut]).is_err());
    }
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Dataset::from_bytes(&magic).is_err());
}
