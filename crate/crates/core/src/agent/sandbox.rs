use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::protocol::validate_path;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("path {0:?} escapes the sandbox")]
    Escape(String),
    #[error("i/o error on {path:?}: {source}")]
    Io { path: String, source: io::Error },
}

/// Resolves client-supplied relative paths under a fixed root directory.
#[derive(Debug, Clone)]
pub struct Sandbox {
    root: PathBuf,
}

impl Sandbox {
    pub fn new(root: &Path) -> io::Result<Self> {
        let root = root.canonicalize()?;
        if !root.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} is not a directory", root.display()),
            ));
        }
        Ok(Sandbox { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_inside(&self, rel: &str, real: &Path) -> Result<(), SandboxError> {
        if real.starts_with(&self.root) {
            Ok(())
        } else {
            Err(SandboxError::Escape(rel.to_string()))
        }
    }

    /// Resolves `rel` to a path inside the root. Symlinks are followed and
    /// must land inside the root as well. The file itself need not exist.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, SandboxError> {
        validate_path(rel).map_err(|_| SandboxError::Escape(rel.to_string()))?;
        let joined = self.root.join(rel);
        // Walk up to the nearest existing ancestor and canonicalize that.
        let mut probe = joined.as_path();
        let mut suffix = Vec::new();
        loop {
            match probe.canonicalize() {
                Ok(real) => {
                    self.check_inside(rel, &real)?;
                    let mut out = real;
                    for part in suffix.iter().rev() {
                        out.push(part);
                    }
                    return Ok(out);
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    let name = probe
                        .file_name()
                        .ok_or_else(|| SandboxError::Escape(rel.to_string()))?;
                    suffix.push(name.to_owned());
                    probe = probe
                        .parent()
                        .ok_or_else(|| SandboxError::Escape(rel.to_string()))?;
                }
                Err(e) => {
                    return Err(SandboxError::Io {
                        path: rel.to_string(),
                        source: e,
                    })
                }
            }
        }
    }

    /// Like [`resolve`](Self::resolve), creating missing parent directories.
    pub fn resolve_for_create(&self, rel: &str) -> Result<PathBuf, SandboxError> {
        let path = self.resolve(rel)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| SandboxError::Io {
                path: rel.to_string(),
                source: e,
            })?;
        }
        // Re-resolve now that the directories exist.
        self.resolve(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_paths_resolve_inside() {
        let dir = tempfile::tempdir().unwrap();
        let sb = Sandbox::new(dir.path()).unwrap();
        let p = sb.resolve("a/b/c.bin").unwrap();
        assert!(p.starts_with(sb.root()));
        assert!(p.ends_with("a/b/c.bin"));
        let q = sb.resolve_for_create("x/y.bin").unwrap();
        assert!(q.parent().unwrap().is_dir());
    }

    #[test]
    fn traversal_and_absolute_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let sb = Sandbox::new(dir.path()).unwrap();
        for p in ["../x", "a/../../x", "/etc/passwd", "", "a/.."] {
            assert!(matches!(sb.resolve(p), Err(SandboxError::Escape(_))), "{p}");
        }
    }

    #[cfg(unix)]
    #[test]
    fn symlink_out_of_root_rejected() {
        let outside = tempfile::tempdir().unwrap();
        std::fs::write(outside.path().join("secret"), b"x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink(outside.path(), dir.path().join("link")).unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret"), dir.path().join("file-link"))
            .unwrap();
        let sb = Sandbox::new(dir.path()).unwrap();
        assert!(matches!(
            sb.resolve("link/secret"),
            Err(SandboxError::Escape(_))
        ));
        assert!(matches!(
            sb.resolve("link/new"),
            Err(SandboxError::Escape(_))
        ));
        assert!(matches!(
            sb.resolve("file-link"),
            Err(SandboxError::Escape(_))
        ));
        assert!(matches!(
            sb.resolve_for_create("link/sub/new"),
            Err(SandboxError::Escape(_))
        ));
        assert!(!outside.path().join("sub").exists());
    }

    #[test]
    fn root_must_be_directory() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("f");
        std::fs::write(&f, b"").unwrap();
        assert!(Sandbox::new(&f).is_err());
        assert!(Sandbox::new(&dir.path().join("missing")).is_err());
    }
}
