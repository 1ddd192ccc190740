use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use prism_core::backend::BackendConfig;
use serde::Deserialize;

/// Contents of `prism.yaml`. Relative paths resolve against the file's
/// directory.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// `--config`, then `$PRISM_CONFIG`, then `./prism.yaml` if present.
pub fn discover(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os("PRISM_CONFIG").filter(|v| !v.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let local = PathBuf::from("prism.yaml");
    local.exists().then_some(local)
}

pub fn load(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: CliConfig = serde_yaml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(d) = cfg.dataset.as_mut() {
        rebase(d);
    }
    if let Some(BackendConfig::Stub { fixtures: Some(f) }) = cfg.backend.as_mut() {
        rebase(f);
    }
    Ok(cfg)
}
