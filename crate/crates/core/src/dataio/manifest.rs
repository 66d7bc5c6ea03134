use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_features, FeatureSequence};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// One feature file referenced by a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    pub group_id: String,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    #[serde(default, rename = "entry")]
    entries: Vec<ManifestEntry>,
}

/// Dataset listing in human-editable TOML:
///
/// ```toml
/// version = 1
///
/// [[entry]]
/// path = "clips/000.vagf"
/// label = 1
/// tau = 42
/// group_id = "video_017"
/// split = "train"
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == tag)
    }

    /// Reads an entry's features and checks the file header agrees with the manifest.
    pub fn load(&self, entry: &ManifestEntry) -> Result<FeatureSequence> {
        let path = self.resolve(entry);
        let seq = read_features(&path)?;
        let mut problems = Vec::new();
        if seq.label != entry.label {
            problems.push(format!(
                "{}: file label {} but manifest says {}",
                path.display(),
                seq.label,
                entry.label
            ));
        }
        if seq.tau != entry.tau {
            problems.push(format!(
                "{}: file onset {:?} but manifest says {:?}",
                path.display(),
                seq.tau,
                entry.tau
            ));
        }
        if seq.group_id != entry.group_id {
            problems.push(format!(
                "{}: file group {:?} but manifest says {:?}",
                path.display(),
                seq.group_id,
                entry.group_id
            ));
        }
        if problems.is_empty() {
            Ok(seq)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load_split(&self, tag: &str) -> Result<Vec<FeatureSequence>> {
        self.split(tag).map(|e| self.load(e)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<FeatureSequence>> {
        self.entries.iter().map(|e| self.load(e)).collect()
    }

    /// Checks label/onset consistency, unique paths and that every file exists.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.version != MANIFEST_VERSION {
            problems.push(format!("unsupported manifest version {}", self.version));
        }
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let at = format!("entry {i} ({})", e.path.display());
            if !seen.insert(&e.path) {
                problems.push(format!("{at}: duplicate path"));
            }
            match (e.label, e.tau) {
                (0, Some(t)) => problems.push(format!("{at}: label 0 with onset {t}")),
                (1, None) => problems.push(format!("{at}: label 1 without onset")),
                (0, None) | (1, Some(_)) => {}
                (l, _) => problems.push(format!("{at}: label must be 0 or 1, got {l}")),
            }
            if e.group_id.is_empty() {
                problems.push(format!("{at}: empty group_id"));
            }
            let resolved = self.resolve(e);
            if !resolved.is_file() {
                problems.push(format!("{at}: missing file {}", resolved.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ManifestFile {
            version: self.version,
            entries: self.entries.clone(),
        })
        .expect("manifest serializes")
    }
}

/// Parses and validates a manifest; features are loaded on demand.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text)
        .map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?;
    let manifest = DatasetManifest {
        version: file.version,
        entries: file.entries,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_toml()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::write_features;
    use crate::numerics::Tensor;

    fn write_clip(dir: &Path, name: &str, label: u8, tau: Option<usize>, group: &str) -> ManifestEntry {
        let seq = FeatureSequence::new(Tensor::filled(&[4, 3], 0.5), 10.0, label, tau, group).unwrap();
        write_features(&seq, dir.join(name)).unwrap();
        ManifestEntry {
            path: name.into(),
            label,
            tau,
            group_id: group.into(),
            split: "train".into(),
        }
    }

    #[test]
    fn three_entries_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            write_clip(dir.path(), "c.vagf", 1, Some(3), "v1"),
            write_clip(dir.path(), "a.vagf", 0, None, "v1"),
            write_clip(dir.path(), "b.vagf", 0, None, "v2"),
        ];
        let m = DatasetManifest::new(entries.clone(), dir.path());
        let path = dir.path().join("manifest.toml");
        write_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.entries, entries);
        let seqs = loaded.load_all().unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0].tau, Some(3));
    }

    #[test]
    fn negative_with_onset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = write_clip(dir.path(), "a.vagf", 0, None, "v1");
        e.tau = Some(2);
        let path = dir.path().join("m.toml");
        write_manifest(&DatasetManifest::new(vec![e], dir.path()), &path).unwrap();
        match load_manifest(&path) {
            Err(Error::Validation(p)) => assert!(p[0].contains("label 0 with onset"), "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let e = ManifestEntry {
            path: "nowhere.vagf".into(),
            label: 0,
            tau: None,
            group_id: "g".into(),
            split: "test".into(),
        };
        let path = dir.path().join("m.toml");
        write_manifest(&DatasetManifest::new(vec![e], dir.path()), &path).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("nowhere.vagf"), "{err}");
    }

    #[test]
    fn header_mismatch_is_reported_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = write_clip(dir.path(), "a.vagf", 1, Some(2), "v1");
        e.tau = Some(1);
        let m = DatasetManifest::new(vec![e.clone()], dir.path());
        assert!(matches!(m.load(&e), Err(Error::Validation(_))));
    }

    #[test]
    fn parses_hand_written_text() {
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), "x.vagf", 1, Some(1), "src");
        let text = "version = 1\n\n[[entry]]\npath = \"x.vagf\"\nlabel = 1\ntau = 1\ngroup_id = \"src\"\nsplit = \"test\"\n";
        let path = dir.path().join("m.toml");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.split("test").count(), 1);
        assert_eq!(m.split("train").count(), 0);
    }
}
