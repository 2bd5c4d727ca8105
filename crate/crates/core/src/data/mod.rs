//! Volumes, NIfTI-1 I/O, slicing and normalization, the synthetic phantom
//! generator and the slice archive.

mod archive;
mod layout;
mod nifti;
mod phantom;
mod slice;
mod volume;

pub use archive::{Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use layout::{case_dirs, read_case_dir, CaseScan};
pub use nifti::{parse_nifti, read_nifti, write_nifti, Endian, NiftiDatatype};
pub use phantom::{generate_phantom, PhantomConfig};
pub use slice::{normalize_slice, slice_volume, Case, SliceSample};
pub use volume::{Modality, Volume, ANAT_LABELS, SEG_LABELS};
