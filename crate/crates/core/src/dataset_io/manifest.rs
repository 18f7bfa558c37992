use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// `key=value` lines describing how an output directory was produced.
pub fn manifest_text(command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "command={command}");
    let _ = writeln!(s, "config_hash={}", cfg.hash());
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "checkpoint_format={}", String::from_utf8_lossy(crate::autodiff::checkpoint::MAGIC));
    for (k, v) in extra {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

/// Writes the manifest and the full config next to it.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_text(command, cfg, extra))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Parses a manifest back into its pairs.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: 9, ..RunConfig::default() };
        write_manifest(d.path(), "synth", &cfg, &[("n", "80".into())]).unwrap();
        let kv = read_manifest(&d.path().join(MANIFEST_FILE)).unwrap();
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone()).unwrap();
        assert_eq!(get("seed"), "9");
        assert_eq!(get("config_hash"), cfg.hash());
        assert_eq!(get("n"), "80");
        let back = RunConfig::load(&d.path().join("config.txt")).unwrap();
        assert_eq!(back, cfg);
    }
}
