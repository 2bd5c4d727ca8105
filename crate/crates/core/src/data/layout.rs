//! On-disk case layout: one directory per case, named by case id, holding
//! `<anything>_<modality>.nii` files (`t1`, `t1ce`, `t2`, `flair`, and the
//! optional `seg` and `anat`).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::nifti::read_nifti;
use super::slice::Case;
use super::volume::Modality;

/// Outcome of scanning one case directory.
#[derive(Debug)]
pub enum CaseScan {
    Loaded(Box<Case>),
    /// Required imaging files that were not found.
    Missing { id: String, modalities: Vec<Modality> },
}

fn modality_file(dir: &Path, m: Modality) -> Result<Option<PathBuf>> {
    let suffix = format!("_{}.nii", m.name());
    let exact = format!("{}.nii", m.name());
    let mut found = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_ascii_lowercase();
        if name.ends_with(&suffix) || name == exact {
            if found.is_some() {
                return Err(Error::invalid(format!(
                    "{}: more than one {m} file",
                    dir.display()
                )));
            }
            found = Some(entry.path());
        }
    }
    Ok(found)
}

fn load(path: &Path, m: Modality) -> Result<super::volume::Volume> {
    read_nifti(path, m).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::invalid(format!("{}: {other}", path.display())),
    })
}

/// Reads one case directory. A malformed file is an error naming it.
pub fn read_case_dir(dir: impl AsRef<Path>) -> Result<CaseScan> {
    let dir = dir.as_ref();
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("{}: no directory name", dir.display())))?;
    let mut paths = Vec::new();
    let mut missing = Vec::new();
    for m in Modality::IMAGING {
        match modality_file(dir, m)? {
            Some(p) => paths.push(p),
            None => missing.push(m),
        }
    }
    if !missing.is_empty() {
        return Ok(CaseScan::Missing {
            id,
            modalities: missing,
        });
    }
    let mut volumes = Vec::with_capacity(4);
    for (p, m) in paths.iter().zip(Modality::IMAGING) {
        volumes.push(load(p, m)?);
    }
    let optional = |m| -> Result<_> {
        modality_file(dir, m)?.map(|p| load(&p, m)).transpose()
    };
    Ok(CaseScan::Loaded(Box::new(Case {
        id,
        modalities: volumes.try_into().expect("four volumes"),
        seg: optional(Modality::Seg)?,
        anat: optional(Modality::Anat)?,
    })))
}

/// Case directories directly under `root`, sorted by name.
pub fn case_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}
