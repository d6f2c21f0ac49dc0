use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::format::{frame_from_bytes, frame_to_bytes};
use super::{apply_weather, generate_scene, Frame, SceneConfig, WeatherClass, NUM_WEATHERS};
use crate::nn::Rng;
use crate::{Error, Result};

const MANIFEST_HEADER: &str = "awmoe-manifest";
const SCHEMA_VERSION: u32 = 1;

/// How many frames each weather class receives.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetMode {
    Balanced { per_class: usize },
    /// Class `w` gets `base * ratios[w]` frames.
    Skewed { base: usize, ratios: [usize; NUM_WEATHERS] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Balanced { per_class: 100 },
            train_fraction: 0.5,
            test_fraction: 0.5,
            min_objects: 1,
            max_objects: 8,
        }
    }
}

impl DatasetConfig {
    pub fn class_counts(&self) -> [usize; NUM_WEATHERS] {
        match &self.mode {
            DatasetMode::Balanced { per_class } => [*per_class; NUM_WEATHERS],
            DatasetMode::Skewed { base, ratios } => ratios.map(|r| r * base),
        }
    }

    /// Number of test frames for a class of `count` frames.
    pub fn test_count(&self, count: usize) -> usize {
        (count as f64 * self.test_fraction).round() as usize
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            ..SceneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, te) = (self.train_fraction, self.test_fraction);
        if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&te) || (tr + te - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be in [0, 1] and sum to 1, got train {tr} + test {te}"
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        for (w, count) in WeatherClass::ALL.iter().zip(self.class_counts()) {
            let test = self.test_count(count);
            if (te > 0.0 && test == 0) || (tr > 0.0 && test == count) {
                return Err(Error::InvalidArgument(format!(
                    "{w} has {count} frames, too few for a train {tr} / test {te} split"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub weather: WeatherClass,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub counts: [usize; NUM_WEATHERS],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Assigns ids and splits; no frames are generated.
    pub fn plan(config: &DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let counts = config.class_counts();
        let mut entries = Vec::with_capacity(counts.iter().sum());
        let mut id = 0u64;
        for (w, &count) in WeatherClass::ALL.iter().zip(&counts) {
            let n_test = config.test_count(count);
            for k in 0..count {
                let split = if k < n_test { Split::Test } else { Split::Train };
                entries.push(ManifestEntry { id, weather: *w, split });
                id += 1;
            }
        }
        Ok(Self {
            seed,
            config: config.clone(),
            counts,
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "schema_version {SCHEMA_VERSION}").unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        match &c.mode {
            DatasetMode::Balanced { per_class } => writeln!(s, "mode balanced {per_class}").unwrap(),
            DatasetMode::Skewed { base, ratios } => {
                let r: Vec<String> = ratios.iter().map(|r| r.to_string()).collect();
                writeln!(s, "mode skewed {base} {}", r.join(",")).unwrap()
            }
        }
        writeln!(s, "split {} {}", c.train_fraction, c.test_fraction).unwrap();
        writeln!(s, "objects {} {}", c.min_objects, c.max_objects).unwrap();
        for (w, n) in WeatherClass::ALL.iter().zip(&self.counts) {
            writeln!(s, "count {w} {n}").unwrap();
        }
        for e in &self.entries {
            writeln!(s, "frame {} {} {}", e.id, e.weather, e.split.name()).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad manifest line '{line}'"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format("missing manifest header".into()));
        }
        let mut seed = None;
        let mut config = DatasetConfig::default();
        let mut counts = [0usize; NUM_WEATHERS];
        let mut entries = Vec::new();
        let mut version = None;
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<u64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(line)) };
            let float = |i: usize| -> Result<f64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(line)) };
            match f.first().copied() {
                Some("schema_version") => version = Some(num(1)?),
                Some("seed") => seed = Some(num(1)?),
                Some("mode") if f.get(1) == Some(&"balanced") => {
                    config.mode = DatasetMode::Balanced {
                        per_class: num(2)? as usize,
                    }
                }
                Some("mode") if f.get(1) == Some(&"skewed") => {
                    let parsed: Vec<usize> = f
                        .get(3)
                        .ok_or_else(|| bad(line))?
                        .split(',')
                        .map(|v| v.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?;
                    let ratios: [usize; NUM_WEATHERS] = parsed.try_into().map_err(|_| bad(line))?;
                    config.mode = DatasetMode::Skewed {
                        base: num(2)? as usize,
                        ratios,
                    };
                }
                Some("split") => {
                    config.train_fraction = float(1)?;
                    config.test_fraction = float(2)?;
                }
                Some("objects") => {
                    config.min_objects = num(1)? as usize;
                    config.max_objects = num(2)? as usize;
                }
                Some("count") => {
                    let w: WeatherClass = f.get(1).ok_or_else(|| bad(line))?.parse()?;
                    counts[w.index()] = num(2)? as usize;
                }
                Some("frame") => {
                    let weather: WeatherClass = f.get(2).ok_or_else(|| bad(line))?.parse()?;
                    let split = match f.get(3).copied() {
                        Some("train") => Split::Train,
                        Some("test") => Split::Test,
                        _ => return Err(bad(line)),
                    };
                    entries.push(ManifestEntry {
                        id: num(1)?,
                        weather,
                        split,
                    });
                }
                None => {}
                _ => return Err(bad(line)),
            }
        }
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Format(format!("unsupported manifest schema {version:?}")));
        }
        let m = Self {
            seed: seed.ok_or_else(|| Error::Format("manifest has no seed".into()))?,
            config,
            counts,
            entries,
        };
        for w in WeatherClass::ALL {
            let n = m.entries.iter().filter(|e| e.weather == w).count();
            if n != m.counts[w.index()] {
                return Err(Error::Format(format!(
                    "manifest lists {n} {w} frames but counts {}",
                    m.counts[w.index()]
                )));
            }
        }
        Ok(m)
    }
}

/// Generates one frame; a pure function of `(seed, entry)`.
pub fn generate_frame(config: &DatasetConfig, seed: u64, entry: &ManifestEntry) -> Result<Frame> {
    let mut rng = Rng::derive(seed, entry.id);
    let clear = generate_scene(entry.id, &config.scene(), &mut rng)?;
    apply_weather(&clear, entry.weather, &mut rng)
}

/// Plans and generates a dataset in memory.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<(DatasetManifest, Vec<Frame>)> {
    let manifest = DatasetManifest::plan(config, seed)?;
    let frames = manifest
        .entries
        .iter()
        .map(|e| generate_frame(config, seed, e))
        .collect::<Result<_>>()?;
    Ok((manifest, frames))
}

pub fn frame_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("frames").join(format!("{id:06}.awf"))
}

/// Writes `manifest.txt` and `frames/<id>.awf` under `dir`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::plan(config, seed)?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for e in &manifest.entries {
        let frame = generate_frame(config, seed, e)?;
        let path = frame_path(dir, e.id);
        fs::write(&path, frame_to_bytes(&frame)).map_err(|err| Error::io(&path, err))?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::parse(&text)
}

/// Loads every frame of `split` listed in the manifest, in manifest order.
pub fn load_frames(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Frame>> {
    manifest
        .split(split)
        .map(|e| {
            let path = frame_path(dir, e.id);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let frame = frame_from_bytes(&bytes)?;
            if frame.id != e.id || frame.weather != e.weather {
                return Err(Error::Format(format!("{} does not match its manifest entry", path.display())));
            }
            Ok(frame)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_counts() {
        let m = DatasetManifest::plan(&DatasetConfig::default(), 1).unwrap();
        assert_eq!(m.counts, [100; 7]);
        assert_eq!(m.split(Split::Test).count(), 350);
    }

    #[test]
    fn skewed_counts_echo_ratios() {
        let cfg = DatasetConfig {
            mode: DatasetMode::Skewed {
                base: 4,
                ratios: [10, 1, 1, 1, 1, 1, 1],
            },
            ..DatasetConfig::default()
        };
        let m = DatasetManifest::plan(&cfg, 1).unwrap();
        for w in 1..7 {
            assert_eq!(m.counts[0], 10 * m.counts[w]);
        }
        assert_eq!(m.counts.iter().sum::<usize>(), m.entries.len());
    }

    #[test]
    fn inconsistent_split_rejected() {
        let cfg = DatasetConfig {
            train_fraction: 0.7,
            test_fraction: 0.5,
            ..DatasetConfig::default()
        };
        assert!(DatasetManifest::plan(&cfg, 0).is_err());
        let tiny = DatasetConfig {
            mode: DatasetMode::Balanced { per_class: 1 },
            ..DatasetConfig::default()
        };
        assert!(DatasetManifest::plan(&tiny, 0).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let cfg = DatasetConfig {
            mode: DatasetMode::Skewed {
                base: 2,
                ratios: [5, 1, 2, 1, 1, 3, 1],
            },
            train_fraction: 0.75,
            test_fraction: 0.25,
            min_objects: 0,
            max_objects: 3,
        };
        let m = DatasetManifest::plan(&cfg, 9).unwrap();
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn files_byte_identical_across_runs() {
        let cfg = DatasetConfig {
            mode: DatasetMode::Balanced { per_class: 2 },
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&cfg, 5, a.path()).unwrap();
        build_dataset(&cfg, 5, b.path()).unwrap();
        for e in &ma.entries {
            assert_eq!(fs::read(frame_path(a.path(), e.id)).unwrap(), fs::read(frame_path(b.path(), e.id)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join("manifest.txt")).unwrap(),
            fs::read(b.path().join("manifest.txt")).unwrap()
        );
        let back = read_manifest(a.path()).unwrap();
        let test = load_frames(a.path(), &back, Split::Test).unwrap();
        assert_eq!(test.len(), 7);
        assert_eq!(test[0], generate_frame(&cfg, 5, &ma.entries[0]).unwrap());
    }
}
