use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Sidecar describing how an output file was produced. Kept out of the data
/// file itself so that reruns with the same parameters give identical data.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub seed: Option<u64>,
    pub library_version: String,
    pub timestamp: String,
    pub conventions: BTreeMap<&'static str, &'static str>,
}

impl RunManifest {
    pub fn new(command: &str, params: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let parameters = match serde_json::to_value(params)? {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            other => BTreeMap::from([("value".to_string(), other)]),
        };
        Ok(Self {
            command: command.to_string(),
            parameters,
            seed,
            library_version: ofps_core::VERSION.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            conventions: BTreeMap::from([
                ("amplitudes", ofps_core::io::AMPLITUDE_CONVENTION),
                ("parity", ofps_core::metrology::PARITY_CONVENTION),
            ]),
        })
    }

    pub fn sidecar_path(data: &Path) -> PathBuf {
        let mut name = data.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

/// Creates `path`, hands a buffered writer to `write`, then writes the
/// manifest next to it.
pub fn write_with_manifest(
    path: &Path,
    manifest: &RunManifest,
    write: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush()?;
    let side = RunManifest::sidecar_path(path);
    let f = File::create(&side).with_context(|| format!("creating {}", side.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), manifest)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Six significant digits for terminal output.
pub fn sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (5 - mag).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig(12.0), "12.0000");
        assert_eq!(sig(3.974510664854882), "3.97451");
        assert_eq!(sig(0.000503), "0.000503000");
        assert_eq!(sig(1.5e-7), "1.50000e-7");
        assert_eq!(sig(0.0), "0");
    }

    #[test]
    fn sidecar_name() {
        let p = RunManifest::sidecar_path(Path::new("/tmp/out.csv"));
        assert_eq!(p, PathBuf::from("/tmp/out.csv.manifest.json"));
    }
}
