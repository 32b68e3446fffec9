//! Dataset manifest: one line per case,
//! `<case_id>,<split>,<activity_path>,<anatomy_path>,<mask_paths;semicolon-separated>`.
//! Paths are relative to the run's output root so two runs into different
//! roots produce byte-identical trees.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub split: Split,
    pub activity_path: String,
    pub anatomy_path: String,
    pub mask_paths: Vec<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            e.case_id,
            e.split.name(),
            e.activity_path,
            e.anatomy_path,
            e.mask_paths.join(";")
        );
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::format(
                path,
                &format!("line {}: expected 5 comma-separated fields", lineno + 1),
            ));
        }
        let split = Split::parse(fields[1]).ok_or_else(|| {
            CliError::format(path, &format!("line {}: unknown split '{}'", lineno + 1, fields[1]))
        })?;
        let mask_paths = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4].split(';').map(|s| s.to_string()).collect()
        };
        entries.push(ManifestEntry {
            case_id: fields[0].to_string(),
            split,
            activity_path: fields[2].to_string(),
            anatomy_path: fields[3].to_string(),
            mask_paths,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn manifest_roundtrip() {
        let entries = vec![
            ManifestEntry {
                case_id: "case_000".into(),
                split: Split::Train,
                activity_path: "phantoms/case_000_act.psrg".into(),
                anatomy_path: "phantoms/case_000_anat.psrg".into(),
                mask_paths: vec!["phantoms/case_000_mask_0.psrg".into()],
            },
            ManifestEntry {
                case_id: "case_001".into(),
                split: Split::Test,
                activity_path: "phantoms/case_001_act.psrg".into(),
                anatomy_path: "phantoms/case_001_anat.psrg".into(),
                mask_paths: vec![],
            },
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case_000,train,phantoms/case_000_act.psrg,"));
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "a,b,c\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(&path, "id,weird,a,b,\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
