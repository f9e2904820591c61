//! File formats: PLY point clouds, checkpoints, and helpers shared by both.

pub mod checkpoint;
pub mod ply;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use ply::{parse_ply, parse_ply_bytes, read_ply, write_ply, PlyFile};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let file_name = path.file_name().ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Every `*.ply` file directly inside `dir`, sorted by name.
pub fn ply_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("{}: no .ply files in dataset directory", dir.display())));
    }
    Ok(files)
}

/// Labeled clouds from a PLY file or a directory of them.
pub fn load_labeled(path: &Path) -> Result<Vec<crate::PointCloud>> {
    let files = if path.is_dir() { ply_files(path)? } else { vec![path.to_path_buf()] };
    files
        .iter()
        .map(|f| {
            let cloud = parse_ply(f)?;
            if cloud.labels.is_none() {
                return Err(Error::Config(format!("{}: no `label` property; labeled data is required", f.display())));
            }
            Ok(cloud)
        })
        .collect()
}

/// [`load_labeled`], with clouds larger than `patch_size` split into patches.
pub fn load_labeled_patches(path: &Path, patch_size: usize) -> Result<Vec<crate::PointCloud>> {
    let mut out = Vec::new();
    for cloud in load_labeled(path)? {
        for patch in crate::predict::split_patches(&cloud.coords, patch_size)? {
            out.push(cloud.subset(&patch.members)?);
        }
    }
    Ok(out)
}
