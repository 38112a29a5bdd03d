//! Dataset manifests.
//!
//! One entry per line, tab separated:
//!
//! ```text
//! <relative-path>\t<label>\t<split>\t<fold>
//! ```
//!
//! `label` is a class index, `-` for unlabeled entries, or `b:1,0,1` for a
//! binary multi-label vector. `split` is one of `labeled_train`, `unlabeled`,
//! `test`. `fold` is a labeled fold index or `-`. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ppm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    LabeledTrain,
    Unlabeled,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::LabeledTrain => "labeled_train",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled_train" => Some(Split::LabeledTrain),
            "unlabeled" => Some(Split::Unlabeled),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    None,
    Class(usize),
    Multi(Vec<bool>),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::None => f.write_str("-"),
            Label::Class(c) => write!(f, "{c}"),
            Label::Multi(v) => {
                f.write_str("b:")?;
                let bits: Vec<&str> = v.iter().map(|&b| if b { "1" } else { "0" }).collect();
                f.write_str(&bits.join(","))
            }
        }
    }
}

fn parse_label(s: &str) -> std::result::Result<Label, String> {
    if s == "-" {
        return Ok(Label::None);
    }
    if let Some(bits) = s.strip_prefix("b:") {
        let v = bits
            .split(',')
            .map(|b| match b.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(format!("bad multi-label entry '{other}'")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        return Ok(Label::Multi(v));
    }
    s.parse().map(Label::Class).map_err(|_| format!("bad label '{s}'"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub fold: Option<usize>,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Single { classes: usize },
    Multi { classes: usize },
}

impl LabelMode {
    pub fn classes(self) -> usize {
        match self {
            LabelMode::Single { classes } | LabelMode::Multi { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    pub label_mode: Option<LabelMode>,
}

impl Manifest {
    /// Parses and validates manifest text; image files are not touched.
    pub fn parse(text: &str, root: &Path, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Config(format!("{origin}:{line}: {msg}"));
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            let &[path, label, split, fold] = fields.as_slice() else {
                return Err(err(line, format!("expected 4 tab-separated fields, found {}", fields.len())));
            };
            if path.is_empty() {
                return Err(err(line, "empty path".into()));
            }
            let label = parse_label(label).map_err(|m| err(line, m))?;
            let split = Split::parse(split).ok_or_else(|| err(line, format!("unknown split '{split}'")))?;
            let fold = match fold {
                "-" => None,
                f => Some(f.parse().map_err(|_| err(line, format!("bad fold '{f}'")))?),
            };
            match (&label, split) {
                (Label::None, Split::Unlabeled) => {}
                (_, Split::Unlabeled) => return Err(err(line, "unlabeled entry carries a label".into())),
                (Label::None, _) => return Err(err(line, format!("{} entry needs a label", split.name()))),
                _ => {}
            }
            if fold.is_some() && split != Split::LabeledTrain {
                return Err(err(line, "only labeled_train entries belong to folds".into()));
            }
            entries.push(Entry { path: path.to_string(), label, split, fold, line });
        }

        let mut seen: HashMap<&str, usize> = HashMap::new();
        for e in &entries {
            if let Some(first) = seen.insert(&e.path, e.line) {
                return Err(err(e.line, format!("duplicate entry '{}' (first on line {first})", e.path)));
            }
        }

        let mut mode: Option<LabelMode> = None;
        for e in &entries {
            let m = match &e.label {
                Label::None => continue,
                Label::Class(c) => LabelMode::Single { classes: c + 1 },
                Label::Multi(v) => LabelMode::Multi { classes: v.len() },
            };
            mode = Some(match (mode, m) {
                (None, m) => m,
                (Some(LabelMode::Single { classes: a }), LabelMode::Single { classes: b }) => LabelMode::Single { classes: a.max(b) },
                (Some(LabelMode::Multi { classes: a }), LabelMode::Multi { classes: b }) if a == b => LabelMode::Multi { classes: a },
                (Some(LabelMode::Multi { classes: a }), LabelMode::Multi { classes: b }) => {
                    return Err(err(e.line, format!("label vector of length {b}, earlier vectors have {a}")))
                }
                _ => return Err(err(e.line, "single-label and multi-label entries are mixed".into())),
            });
        }

        let labeled: Vec<&Entry> = entries.iter().filter(|e| e.split == Split::LabeledTrain).collect();
        let with_fold = labeled.iter().filter(|e| e.fold.is_some()).count();
        if with_fold != 0 && with_fold != labeled.len() {
            let e = labeled.iter().find(|e| e.fold.is_none()).expect("some entry lacks a fold");
            return Err(err(e.line, "either every labeled_train entry has a fold or none does".into()));
        }
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &labeled {
            if let Some(f) = e.fold {
                *sizes.entry(f).or_default() += 1;
            }
        }
        let distinct: Vec<usize> = sizes.values().copied().collect();
        if distinct.windows(2).any(|w| w[0] != w[1]) {
            let listing: Vec<String> = sizes.iter().map(|(f, n)| format!("fold {f}: {n}")).collect();
            return Err(Error::Config(format!("{origin}: folds must be equal-sized ({})", listing.join(", "))));
        }

        Ok(Self { root: root.to_path_buf(), entries, label_mode: mode })
    }

    /// Reads a manifest, checks that every image exists and decodes a spread of them.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let origin = path.display().to_string();
        let m = Self::parse(&text, &root, &origin)?;
        for e in &m.entries {
            if !m.path_of(e).is_file() {
                return Err(Error::Config(format!("{origin}:{}: missing image file {}", e.line, m.path_of(e).display())));
            }
        }
        let stride = (m.entries.len() / 16).max(1);
        for e in m.entries.iter().step_by(stride) {
            ppm::read(&m.path_of(e)).map_err(|x| Error::Config(format!("{origin}:{}: unreadable image: {x}", e.line)))?;
        }
        Ok(m)
    }

    pub fn path_of(&self, e: &Entry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Labeled training entries, restricted to one fold when given.
    pub fn labeled(&self, fold: Option<usize>) -> Result<Vec<&Entry>> {
        let out: Vec<&Entry> = self.split(Split::LabeledTrain).filter(|e| fold.is_none() || e.fold == fold).collect();
        if let (Some(f), true) = (fold, out.is_empty()) {
            return Err(Error::Config(format!("manifest has no labeled fold {f}")));
        }
        Ok(out)
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.entries.iter().filter_map(|e| e.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let fold = e.fold.map_or("-".to_string(), |f| f.to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.label, e.split.name(), fold));
        }
        out
    }
}
