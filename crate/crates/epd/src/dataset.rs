//! Scene directories, dataset hashing, the window cache and train/test splits.
//!
//! A dataset directory holds whitespace-separated trajectory files (`.txt`
//! or `.tsv`). Files inside a subdirectory belong to the scene group named
//! after that subdirectory; files directly under the root form a group of
//! their own, named after the file stem.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use epd_core::config::TrainConfig;
use epd_core::data::{build_windows, normalize, parse_scene, split_leave_one_out, ColumnOrder, Scene, SceneWindow};
use epd_core::synthetic::generate;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub format: String,
    pub scenes: Vec<Scene>,
    /// Lines skipped or other recoverable oddities, one message each.
    pub warnings: Vec<String>,
    /// Hex SHA-256 over the column order and every file's path and bytes.
    pub hash: String,
}

fn scene_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::Io {
                path,
                source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory walk failed")),
            }
        })?;
        let p = entry.path();
        let hidden = p
            .strip_prefix(root)
            .ok()
            .is_some_and(|r| r.components().any(|c| c.as_os_str().to_string_lossy().starts_with('.')));
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if entry.file_type().is_file() && !hidden && matches!(ext, "txt" | "tsv") {
            files.push(p.to_path_buf());
        }
    }
    Ok(files)
}

/// Parses every scene file under `root` with the given column order.
pub fn load_dir(root: &Path, format: &str) -> Result<Dataset> {
    let order: ColumnOrder = format.parse()?;
    let files = scene_files(root)?;
    if files.is_empty() {
        return Err(epd_core::error::Error::Data(format!("no .txt or .tsv scene files under {}", root.display())).into());
    }
    let mut hasher = Sha256::new();
    hasher.update(format.as_bytes());
    let mut scenes = Vec::new();
    let mut warnings = Vec::new();
    for path in files {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let rel_name = rel.with_extension("").to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        hasher.update([0u8]);
        hasher.update(rel_name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        let text = String::from_utf8(bytes).map_err(|_| Error::format(&path, "not UTF-8 text"))?;
        let mut report = parse_scene(&rel_name, &text, &order)?;
        let comps: Vec<_> = rel.components().collect();
        report.scene.group = if comps.len() > 1 {
            comps[0].as_os_str().to_string_lossy().into_owned()
        } else {
            rel_name.clone()
        };
        warnings.extend(report.warnings);
        scenes.push(report.scene);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        format: format.to_string(),
        scenes,
        warnings,
        hash: hex::encode(hasher.finalize()),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset_hash: String,
    pub t_past: usize,
    pub t_future: usize,
    pub stride: usize,
}

/// Raw (unnormalized) windows of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWindows {
    pub scene: String,
    pub group: String,
    pub windows: Vec<SceneWindow>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: CacheKey,
    scenes: Vec<SceneWindows>,
}

/// Directory of extracted windows, one JSON file per [`CacheKey`].
#[derive(Clone, Debug)]
pub struct WindowCache {
    pub dir: PathBuf,
}

impl WindowCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!(
            "windows-{}-{}-{}-{}.json",
            key.dataset_hash, key.t_past, key.t_future, key.stride
        ))
    }

    /// Cached windows when present and matching, otherwise extracted and
    /// stored. The flag reports a cache hit.
    pub fn load_or_build(&self, ds: &Dataset, t_past: usize, t_future: usize, stride: usize) -> Result<(Vec<SceneWindows>, bool)> {
        let key = CacheKey {
            dataset_hash: ds.hash.clone(),
            t_past,
            t_future,
            stride,
        };
        let path = self.path_for(&key);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(file) = serde_json::from_str::<CacheFile>(&text) {
                if file.key == key {
                    return Ok((file.scenes, true));
                }
            }
            log::warn!("ignoring stale window cache {}", path.display());
        }
        let scenes = extract(ds, t_past, t_future, stride);
        fs::create_dir_all(&self.dir).map_err(Error::io(&self.dir))?;
        let body = serde_json::to_string(&CacheFile { key, scenes }).map_err(|e| Error::format(&path, e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, body).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, &path).map_err(Error::io(&path))?;
        let file: CacheFile = serde_json::from_str(&fs::read_to_string(&path).map_err(Error::io(&path))?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        Ok((file.scenes, false))
    }
}

pub fn extract(ds: &Dataset, t_past: usize, t_future: usize, stride: usize) -> Vec<SceneWindows> {
    ds.scenes
        .iter()
        .map(|s| SceneWindows {
            scene: s.name.clone(),
            group: s.group.clone(),
            windows: build_windows(s, t_past, t_future, stride),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// Normalized windows of every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Reported in metric records: `synthetic` or the held-out group.
    pub dataset: String,
    pub train: Vec<SceneWindow>,
    pub validation: Vec<SceneWindow>,
    pub test: Vec<SceneWindow>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[SceneWindow] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Windows for the data source named in `config`. Directory sources go
/// through the cache in `cache` when one is given.
pub fn load_splits(config: &TrainConfig, cache: Option<&WindowCache>) -> Result<Splits> {
    let d = &config.data;
    if d.source == "synthetic" {
        let mut syn = config.synthetic.clone();
        syn.t_past = config.t_past;
        syn.t_future = config.t_future;
        let data = generate(&syn);
        return Ok(Splits {
            dataset: "synthetic".into(),
            train: data.train_windows(),
            validation: Vec::new(),
            test: data.test_windows(),
        });
    }
    let ds = load_dir(Path::new(&d.source), &d.format)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    let per_scene = match cache {
        Some(c) => c.load_or_build(&ds, config.t_past, config.t_future, d.stride)?.0,
        None => extract(&ds, config.t_past, config.t_future, d.stride),
    };
    let plan = split_leave_one_out(&ds.scenes, &d.held_out, d.val_fraction)?;
    let pick = |names: &[String]| -> Vec<SceneWindow> {
        per_scene
            .iter()
            .filter(|s| names.contains(&s.scene))
            .flat_map(|s| s.windows.iter().map(normalize))
            .collect()
    };
    Ok(Splits {
        dataset: d.held_out.clone(),
        train: pick(&plan.train),
        validation: pick(&plan.validation),
        test: pick(&plan.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_scene(dir: &Path, rel: &str, peds: i64, frames: i64) {
        let path = dir.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut s = String::new();
        for f in 0..frames {
            for p in 0..peds {
                s.push_str(&format!("{}\t{}\t{}\t{}\n", f * 10, p, 0.1 * f as f64 + p as f64, 0.05 * f as f64));
            }
        }
        fs::write(path, s).unwrap();
    }

    #[test]
    fn groups_hash_and_cache() {
        let tmp = tempfile::tempdir().unwrap();
        write_scene(tmp.path(), "eth/a.txt", 2, 25);
        write_scene(tmp.path(), "hotel/b.txt", 1, 22);
        write_scene(tmp.path(), "zara.txt", 1, 20);
        fs::write(tmp.path().join("notes.md"), "ignored").unwrap();
        let ds = load_dir(tmp.path(), "frame,id,x,y").unwrap();
        let groups: Vec<&str> = ds.scenes.iter().map(|s| s.group.as_str()).collect();
        assert_eq!(groups, ["eth", "hotel", "zara"]);
        assert_eq!(ds.hash, load_dir(tmp.path(), "frame,id,x,y").unwrap().hash);
        assert_ne!(ds.hash, load_dir(tmp.path(), "frame,id,y,x").unwrap().hash);

        let cache = WindowCache::new(tmp.path().join(".cache"));
        let (w1, hit1) = cache.load_or_build(&ds, 8, 12, 1).unwrap();
        let (w2, hit2) = cache.load_or_build(&ds, 8, 12, 1).unwrap();
        assert!(!hit1 && hit2);
        assert_eq!(w1, w2);
        assert_eq!(w1, extract(&ds, 8, 12, 1));
        // 25 frames give 6 windows per pedestrian, 22 give 3, 20 give 1
        assert_eq!(w1.iter().map(|s| s.windows.len()).collect::<Vec<_>>(), [12, 3, 1]);
        let (_, hit3) = cache.load_or_build(&ds, 8, 12, 2).unwrap();
        assert!(!hit3);
        // the cache directory is hidden, so rescanning ignores it
        assert_eq!(load_dir(tmp.path(), "frame,id,x,y").unwrap().hash, ds.hash);
    }

    #[test]
    fn leave_one_out_splits() {
        let tmp = tempfile::tempdir().unwrap();
        write_scene(tmp.path(), "eth/a.txt", 2, 25);
        write_scene(tmp.path(), "hotel/b.txt", 1, 30);
        let mut cfg = TrainConfig::default();
        cfg.data.source = tmp.path().to_string_lossy().into_owned();
        cfg.data.held_out = "hotel".into();
        cfg.data.val_fraction = 0.0;
        let s = load_splits(&cfg, None).unwrap();
        assert_eq!(s.dataset, "hotel");
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.test.len(), 11);
        for w in s.train.iter().chain(&s.test) {
            w.validate(true).unwrap();
        }
        cfg.data.held_out = "nowhere".into();
        let err = load_splits(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn empty_directory_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(load_dir(tmp.path(), "frame,id,x,y").unwrap_err().exit_code(), 2);
    }
}
