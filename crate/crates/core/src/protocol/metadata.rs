//! Open-set protocol metadata: media, templates and train/gallery/probe splits.
//!
//! Metadata is a UTF-8 CSV with one row per medium:
//!
//! ```text
//! split_index,role,template_id,subject_id,media_id,kind,path
//! 1,gallery,g1_id000,id000,id000_t03_m0,still,media/id000_t03_m0.bfm
//! ```
//!
//! `role` is one of `train`, `gallery`, `probe`; `kind` is `still` or `frame`.
//! Paths are relative to the media root (by default the directory holding
//! the CSV).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Gallery,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Gallery => "gallery",
            Role::Probe => "probe",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Role::Train),
            "gallery" => Some(Role::Gallery),
            "probe" => Some(Role::Probe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MediaKind {
    Still,
    Frame,
}

impl MediaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaKind::Still => "still",
            MediaKind::Frame => "frame",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "still" => Some(MediaKind::Still),
            "frame" => Some(MediaKind::Frame),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaItem {
    pub media_id: String,
    pub kind: MediaKind,
    pub source_path: PathBuf,
    pub template_id: String,
}

/// One observation of one subject: a non-empty set of media.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub template_id: String,
    pub subject_id: String,
    pub media: Vec<MediaItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub split_index: u32,
    pub train: Vec<Template>,
    pub gallery: Vec<Template>,
    pub probe: Vec<Template>,
}

impl Split {
    pub fn role(&self, role: Role) -> &[Template] {
        match role {
            Role::Train => &self.train,
            Role::Gallery => &self.gallery,
            Role::Probe => &self.probe,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut Vec<Template> {
        match role {
            Role::Train => &mut self.train,
            Role::Gallery => &mut self.gallery,
            Role::Probe => &mut self.probe,
        }
    }

    pub fn gallery_subjects(&self) -> BTreeSet<&str> {
        self.gallery.iter().map(|t| t.subject_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Require every referenced media file to exist.
    pub check_files: bool,
    /// Directory media paths are relative to; defaults to the CSV's directory
    /// (or the directory passed to [`load_metadata`]).
    pub media_root: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    split_index: u32,
    role: String,
    template_id: String,
    subject_id: String,
    media_id: String,
    kind: String,
    path: String,
}

fn meta_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Metadata {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_rows<R: Read>(reader: R, source: &Path, rows: &mut Vec<(PathBuf, usize, Row)>) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let expected = ["split_index", "role", "template_id", "subject_id", "media_id", "kind", "path"];
    let headers = rdr
        .headers()
        .map_err(|e| meta_err(source, format!("unreadable header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(meta_err(
            source,
            format!("header must be {}, got {:?}", expected.join(","), headers),
        ));
    }
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = rec.map_err(|e| meta_err(source, format!("row {}: {e}", i + 2)))?;
        rows.push((source.to_path_buf(), i + 2, row));
    }
    Ok(())
}

/// Loads splits from one CSV file, or from every `*.csv` file in a directory
/// (sorted by name). Splits are returned sorted by index.
pub fn load_metadata(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<Split>> {
    let path = path.as_ref();
    let mut rows = Vec::new();
    let default_root;
    if path.is_dir() {
        default_root = path.to_path_buf();
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(meta_err(path, "directory contains no .csv metadata files"));
        }
        for f in files {
            let file = fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
            read_rows(file, &f, &mut rows)?;
        }
    } else {
        default_root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_rows(file, path, &mut rows)?;
    }
    let root = opts.media_root.clone().unwrap_or(default_root);
    let splits = build_splits(rows, path)?;
    if opts.check_files {
        for s in &splits {
            for t in s.train.iter().chain(&s.gallery).chain(&s.probe) {
                for m in &t.media {
                    let p = root.join(&m.source_path);
                    if !p.is_file() {
                        return Err(meta_err(
                            path,
                            format!("media {} refers to missing file {}", m.media_id, p.display()),
                        ));
                    }
                }
            }
        }
    }
    Ok(splits)
}

/// Parses metadata from any reader; `source` is used in error messages.
pub fn parse_metadata<R: Read>(reader: R, source: &Path) -> Result<Vec<Split>> {
    let mut rows = Vec::new();
    read_rows(reader, source, &mut rows)?;
    build_splits(rows, source)
}

fn build_splits(rows: Vec<(PathBuf, usize, Row)>, source: &Path) -> Result<Vec<Split>> {
    if rows.is_empty() {
        return Err(meta_err(source, "metadata has no rows"));
    }
    struct Pending {
        split: Split,
        // template id -> (role, position in role list)
        templates: HashMap<String, (Role, usize)>,
        media: BTreeSet<String>,
    }
    let mut splits: BTreeMap<u32, Pending> = BTreeMap::new();
    for (file, line, row) in rows {
        let here = |msg: String| meta_err(&file, format!("line {line}: {msg}"));
        let role = Role::parse(&row.role).ok_or_else(|| here(format!("unknown role {:?}", row.role)))?;
        let kind = MediaKind::parse(&row.kind).ok_or_else(|| here(format!("unknown media kind {:?}", row.kind)))?;
        if row.template_id.is_empty() || row.subject_id.is_empty() || row.media_id.is_empty() {
            return Err(here("empty identifier".into()));
        }
        let p = splits.entry(row.split_index).or_insert_with(|| Pending {
            split: Split {
                split_index: row.split_index,
                train: Vec::new(),
                gallery: Vec::new(),
                probe: Vec::new(),
            },
            templates: HashMap::new(),
            media: BTreeSet::new(),
        });
        if !p.media.insert(row.media_id.clone()) {
            return Err(here(format!(
                "duplicate media id {:?} in split {}",
                row.media_id, row.split_index
            )));
        }
        let item = MediaItem {
            media_id: row.media_id,
            kind,
            source_path: PathBuf::from(row.path),
            template_id: row.template_id.clone(),
        };
        match p.templates.get(&row.template_id) {
            Some(&(r, pos)) => {
                if r != role {
                    return Err(here(format!(
                        "template {:?} appears as both {} and {}",
                        row.template_id,
                        r.as_str(),
                        role.as_str()
                    )));
                }
                let t = &mut p.split.role_mut(role)[pos];
                if t.subject_id != row.subject_id {
                    return Err(here(format!(
                        "template {:?} spans subjects {:?} and {:?}",
                        row.template_id, t.subject_id, row.subject_id
                    )));
                }
                t.media.push(item);
            }
            None => {
                let list = p.split.role_mut(role);
                p.templates.insert(row.template_id.clone(), (role, list.len()));
                list.push(Template {
                    template_id: row.template_id,
                    subject_id: row.subject_id,
                    media: vec![item],
                });
            }
        }
    }
    let mut out = Vec::with_capacity(splits.len());
    for (idx, p) in splits {
        if p.split.gallery.is_empty() {
            return Err(meta_err(source, format!("split {idx} has an empty gallery set")));
        }
        if p.split.probe.is_empty() {
            return Err(meta_err(source, format!("split {idx} has an empty probe set")));
        }
        out.push(p.split);
    }
    Ok(out)
}

pub fn write_metadata_to<W: Write>(splits: &[Split], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    for s in splits {
        for role in [Role::Train, Role::Gallery, Role::Probe] {
            for t in s.role(role) {
                for m in &t.media {
                    let path = m
                        .source_path
                        .to_str()
                        .ok_or_else(|| Error::Data(format!("media path for {} is not UTF-8", m.media_id)))?;
                    w.serialize(Row {
                        split_index: s.split_index,
                        role: role.as_str().to_string(),
                        template_id: t.template_id.clone(),
                        subject_id: t.subject_id.clone(),
                        media_id: m.media_id.clone(),
                        kind: m.kind.as_str().to_string(),
                        path: path.to_string(),
                    })
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn write_metadata(splits: &[Split], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_metadata_to(splits, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoleCounts {
    pub identities: usize,
    pub templates: usize,
    pub media: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    EmptyGallery,
    EmptyProbe,
    /// Every probe subject is enrolled, so the protocol is not open-set.
    NoImpostors,
    /// A subject has more than one gallery template.
    DuplicateGallerySubject(String),
    EmptyTemplate(String),
    /// A medium claims a different template than the one holding it.
    MediaTemplateMismatch { media_id: String, template_id: String },
    DuplicateMediaId(String),
    /// One template id used for different subjects or roles.
    ConflictingTemplate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub split_index: u32,
    pub train: RoleCounts,
    pub gallery: RoleCounts,
    pub probe: RoleCounts,
    /// Distinct probe subjects absent from the gallery.
    pub impostor_count: usize,
    pub impostor_templates: usize,
    /// Subjects present in both train and gallery (recorded, not enforced).
    pub train_gallery_overlap: usize,
    pub violations: Vec<Violation>,
}

impl SplitReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn counts(ts: &[Template]) -> RoleCounts {
    RoleCounts {
        identities: ts.iter().map(|t| &t.subject_id).collect::<BTreeSet<_>>().len(),
        templates: ts.len(),
        media: ts.iter().map(|t| t.media.len()).sum(),
    }
}

/// Checks split invariants; violations are collected rather than raised.
pub fn validate_split(s: &Split) -> SplitReport {
    let mut violations = Vec::new();
    if s.gallery.is_empty() {
        violations.push(Violation::EmptyGallery);
    }
    if s.probe.is_empty() {
        violations.push(Violation::EmptyProbe);
    }

    let mut seen_subject = BTreeSet::new();
    for t in &s.gallery {
        if !seen_subject.insert(t.subject_id.as_str()) {
            violations.push(Violation::DuplicateGallerySubject(t.subject_id.clone()));
        }
    }

    let mut template_owner: HashMap<&str, (&str, Role)> = HashMap::new();
    let mut media_ids = BTreeSet::new();
    for role in [Role::Train, Role::Gallery, Role::Probe] {
        for t in s.role(role) {
            if t.media.is_empty() {
                violations.push(Violation::EmptyTemplate(t.template_id.clone()));
            }
            match template_owner.get(t.template_id.as_str()) {
                Some(_) => violations.push(Violation::ConflictingTemplate(t.template_id.clone())),
                None => {
                    template_owner.insert(&t.template_id, (&t.subject_id, role));
                }
            }
            for m in &t.media {
                if m.template_id != t.template_id {
                    violations.push(Violation::MediaTemplateMismatch {
                        media_id: m.media_id.clone(),
                        template_id: t.template_id.clone(),
                    });
                }
                if !media_ids.insert(m.media_id.as_str()) {
                    violations.push(Violation::DuplicateMediaId(m.media_id.clone()));
                }
            }
        }
    }

    let gallery = s.gallery_subjects();
    let impostors: BTreeSet<&str> = s
        .probe
        .iter()
        .map(|t| t.subject_id.as_str())
        .filter(|id| !gallery.contains(id))
        .collect();
    let impostor_templates = s
        .probe
        .iter()
        .filter(|t| !gallery.contains(t.subject_id.as_str()))
        .count();
    if !s.probe.is_empty() && impostors.is_empty() {
        violations.push(Violation::NoImpostors);
    }
    let train_subjects: BTreeSet<&str> = s.train.iter().map(|t| t.subject_id.as_str()).collect();

    SplitReport {
        split_index: s.split_index,
        train: counts(&s.train),
        gallery: counts(&s.gallery),
        probe: counts(&s.probe),
        impostor_count: impostors.len(),
        impostor_templates,
        train_gallery_overlap: train_subjects.intersection(&gallery).count(),
        violations,
    }
}
