//! Run directories. Every file a command writes lives under one directory,
//! chosen by `--out-dir` or derived from the run name and config hash.

use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};

pub fn default_dir(name: &str, hash: &str) -> PathBuf {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    Path::new("runs").join(format!("{safe}-{}", &hash[..12]))
}

pub fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))
}

/// A path relative to the run directory that cannot escape it.
pub fn inside(dir: &Path, rel: &Path) -> Result<PathBuf> {
    if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        bail!(
            "checkpoint_path `{}` must be a plain relative path inside the run directory",
            rel.display()
        );
    }
    Ok(dir.join(rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_stay_inside() {
        let d = Path::new("runs/x");
        assert_eq!(inside(d, Path::new("ck/a.ckpt")).unwrap(), Path::new("runs/x/ck/a.ckpt"));
        assert!(inside(d, Path::new("../a.ckpt")).is_err());
        assert!(inside(d, Path::new("/tmp/a.ckpt")).is_err());
        assert!(inside(d, Path::new("")).is_err());
    }

    #[test]
    fn default_names_are_sanitized() {
        let h = "0123456789abcdef";
        assert_eq!(default_dir("my run", h), Path::new("runs/my_run-0123456789ab"));
    }
}
