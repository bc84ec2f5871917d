use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::args::{Format, GlobalArgs};

pub const DOTFILE: &str = ".pwm.toml";
pub const DEFAULT_LIBRARY: &str = "pwm-library.json";

/// Settings after merging the dotfile with command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub library: PathBuf,
    pub vocabulary: Option<PathBuf>,
    pub offline: bool,
    pub format: Format,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    library: Option<PathBuf>,
    vocabulary: Option<PathBuf>,
    offline: Option<bool>,
    format: Option<Format>,
}

fn home_dotfile() -> Option<PathBuf> {
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(DOTFILE))
}

/// Reads the dotfile (explicit path, `./.pwm.toml`, then `~/.pwm.toml`);
/// flags win over file values. Relative paths in the file are taken
/// relative to the file's directory.
pub fn resolve(global: &GlobalArgs) -> Result<CliConfig, String> {
    let candidates: Vec<PathBuf> = match &global.config {
        Some(p) => {
            if !p.exists() {
                return Err(format!("--config: {} does not exist", p.display()));
            }
            vec![p.clone()]
        }
        None => std::iter::once(PathBuf::from(DOTFILE)).chain(home_dotfile()).collect(),
    };
    let mut file = FileConfig::default();
    let mut base = PathBuf::from(".");
    if let Some(path) = candidates.into_iter().find(|p| p.is_file()) {
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        file = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    }
    let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    Ok(CliConfig {
        library: global
            .library
            .clone()
            .or_else(|| file.library.map(&rel))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_LIBRARY)),
        vocabulary: global.vocabulary.clone().or_else(|| file.vocabulary.map(&rel)),
        offline: global.offline || file.offline.unwrap_or(false),
        format: global.format.or(file.format).unwrap_or(Format::Human),
    })
}
