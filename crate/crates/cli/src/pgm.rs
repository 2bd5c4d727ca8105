//! Binary portable greymap (P5) output.

use std::path::{Path, PathBuf};

use mocae::data::SliceSample;

const CHANNELS: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Maps `[-1, 1]` onto `0..=255`.
pub fn encode(width: usize, height: usize, plane: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        plane
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    out
}

/// One file per channel, `<stem>_<channel>.pgm`.
pub fn write_slice(dir: &Path, stem: &str, s: &SliceSample) -> std::io::Result<Vec<PathBuf>> {
    let (h, w) = (s.height(), s.width());
    let mut written = Vec::new();
    for (c, plane) in s.image.data().chunks_exact(h * w).enumerate() {
        let path = dir.join(format!("{stem}_{}.pgm", CHANNELS[c]));
        std::fs::write(&path, encode(w, h, plane))?;
        written.push(path);
    }
    Ok(written)
}
