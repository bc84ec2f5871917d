pub mod agreement;
pub mod classifier;
pub mod engine;
pub mod error;
pub mod gateway;
pub mod library;
pub mod model;
pub mod optimizer;
pub mod similarity;
pub mod template;

pub use error::{Error, Result};

use std::io::Write;
use std::path::Path;

/// Writes to a temporary file beside `path`, then renames it into place, so
/// readers see either the old or the new contents.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
