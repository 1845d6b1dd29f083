//! Run configuration: an optional JSON file that command-line flags override,
//! plus the provenance header written atop every CSV output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tpanova::dataset::CsvSchema;
use tpanova::estimation::FitConfig;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Fit settings; replaces the command's defaults as a whole.
    pub fit: Option<FitConfig>,
    pub csv: Option<CsvSchema>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// First 16 hex digits of the SHA-256 of the effective settings.
pub fn config_hash<T: Serialize>(settings: &T) -> Result<String> {
    let json = serde_json::to_vec(settings)?;
    let digest = format!("{:x}", Sha256::digest(&json));
    Ok(digest[..16].to_string())
}

/// `# seed=…, version=…, config-hash=…`
pub fn provenance_header<T: Serialize>(seed: u64, settings: &T) -> Result<String> {
    Ok(format!(
        "# seed={seed}, version={}, config-hash={}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash(settings)?
    ))
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

/// The output's directory must already exist; the file itself may not.
pub fn require_writable(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    if path.is_dir() {
        bail!("output path {} is a directory", path.display());
    }
    Ok(())
}

/// Writes to `path`, or to stdout when it is absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_settings() {
        let a = config_hash(&FitConfig::default()).unwrap();
        let b = config_hash(&FitConfig { lambda: 0.5, ..FitConfig::default() }).unwrap();
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&FitConfig::default()).unwrap());
    }

    #[test]
    fn header_shape() {
        let h = provenance_header(7, &1u8).unwrap();
        assert!(h.starts_with("# seed=7, version="));
        assert!(h.contains(", config-hash="));
        assert!(h.ends_with('\n'));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"sed": 1}"#).is_err());
        let c: FileConfig = serde_json::from_str(r#"{"seed": 3, "fit": {"lambda": 0.1}}"#).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.fit.unwrap().lambda, 0.1);
    }
}
