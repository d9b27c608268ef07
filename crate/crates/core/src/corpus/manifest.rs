use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 11;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "oh",
];
pub const BINARY_CLASS_NAMES: [&str; 2] = ["clean", "noisy"];
/// Multi-condition training levels.
pub const TRAIN_SNRS: [i32; 4] = [20, 15, 10, 5];
/// Every level a record may carry; -5 dB is test-only.
pub const ALL_SNRS: [i32; 5] = [20, 15, 10, 5, -5];
pub const MANIFEST_HEADER: &str = "path,label,mode,noise_type,snr_db";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Clean,
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    None,
    Subway,
    Babble,
    Car,
    Exhibition,
}

impl NoiseType {
    pub const SCENARIOS: [NoiseType; 4] = [
        NoiseType::Subway,
        NoiseType::Babble,
        NoiseType::Car,
        NoiseType::Exhibition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseType::None => "none",
            NoiseType::Subway => "subway",
            NoiseType::Babble => "babble",
            NoiseType::Car => "car",
            NoiseType::Exhibition => "exhibition",
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Clean => "clean",
            Mode::Noisy => "noisy",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Mode::Clean),
            "noisy" => Ok(Mode::Noisy),
            _ => Err(Error::Manifest(format!("unknown mode `{s}`"))),
        }
    }
}

/// One labeled utterance. `path` is relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub path: PathBuf,
    pub label: usize,
    pub mode: Mode,
    pub noise_type: NoiseType,
    pub snr_db: Option<i32>,
}

impl UtteranceRecord {
    pub fn clean(path: impl Into<PathBuf>, label: usize) -> Self {
        Self {
            path: path.into(),
            label,
            mode: Mode::Clean,
            noise_type: NoiseType::None,
            snr_db: None,
        }
    }

    pub fn noisy(path: impl Into<PathBuf>, label: usize, noise: NoiseType, snr_db: i32) -> Self {
        Self {
            path: path.into(),
            label,
            mode: Mode::Noisy,
            noise_type: noise,
            snr_db: Some(snr_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(format!("{}: {m}", self.path.display())));
        if self.label >= NUM_CLASSES {
            return bad(format!("label {} outside 0..{NUM_CLASSES}", self.label));
        }
        match (self.mode, self.noise_type, self.snr_db) {
            (Mode::Clean, NoiseType::None, None) => Ok(()),
            (Mode::Noisy, n, Some(snr)) if n != NoiseType::None => {
                if ALL_SNRS.contains(&snr) {
                    Ok(())
                } else {
                    bad(format!("snr_db {snr} not one of {ALL_SNRS:?}"))
                }
            }
            (m, n, s) => bad(format!(
                "inconsistent mode {m}, noise_type {n}, snr_db {s:?}"
            )),
        }
    }
}

/// Ordered records plus the directory their relative paths hang off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<UtteranceRecord>,
    /// Label space size: 11 for digits, 2 after binary relabeling.
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    label: usize,
    mode: Mode,
    noise_type: NoiseType,
    snr_db: Option<i32>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<UtteranceRecord>) -> Self {
        Self {
            root: root.into(),
            records,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, r: &UtteranceRecord) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.root.join(&r.path)
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        let names: &[&str] = if self.num_classes == 2 {
            &BINARY_CLASS_NAMES
        } else {
            &CLASS_NAMES
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for r in &self.records {
            h[r.label] += 1;
        }
        h
    }

    /// Parses a manifest; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let first = text.lines().next().unwrap_or("");
        if first.trim_end_matches('\r') != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "header must be `{MANIFEST_HEADER}`, got `{first}`"
            )));
        }
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("line {}: {e}", i + 2)))?;
            let rec = UtteranceRecord {
                path: PathBuf::from(row.path),
                label: row.label,
                mode: row.mode,
                noise_type: row.noise_type,
                snr_db: row.snr_db,
            };
            rec.validate()
                .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 2)))?;
            records.push(rec);
        }
        Ok(Self::new(root, records))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row {
                path: r.path.to_string_lossy().replace('\\', "/"),
                label: r.label,
                mode: r.mode,
                noise_type: r.noise_type,
                snr_db: r.snr_db,
            })
            .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        let mut s = String::from_utf8(bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        if self.records.is_empty() {
            s = format!("{MANIFEST_HEADER}\n");
        }
        Ok(s)
    }

    /// Writes CSV to `path`. Relative record paths are rebased onto the root
    /// when the file lands outside it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        let text = if same_dir(dir, &self.root) {
            self.to_csv()?
        } else {
            let rebased = Manifest {
                root: dir.to_path_buf(),
                records: self
                    .records
                    .iter()
                    .map(|r| UtteranceRecord {
                        path: self.resolve(r),
                        ..r.clone()
                    })
                    .collect(),
                num_classes: self.num_classes,
            };
            rebased.to_csv()?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn filter(&self, keep: impl Fn(&UtteranceRecord) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Replaces each label with the record's mode: clean 0, noisy 1.
pub fn relabel_for_binary(m: &Manifest) -> Manifest {
    Manifest {
        root: m.root.clone(),
        records: m
            .records
            .iter()
            .map(|r| UtteranceRecord {
                label: match r.mode {
                    Mode::Clean => 0,
                    Mode::Noisy => 1,
                },
                ..r.clone()
            })
            .collect(),
        num_classes: 2,
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let canon = |p: &Path| {
        let p = if p.as_os_str().is_empty() {
            Path::new(".")
        } else {
            p
        };
        p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
    };
    canon(a) == canon(b)
}
