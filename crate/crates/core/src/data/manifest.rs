use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::data::{parse_pts, FaceSample, SampleMeta, Split};
use crate::error::{Error, Result};
use crate::image::Image;

/// Image extensions tried, in order, next to each `.pts` file.
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "ppm", "pnm", "pgm", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub pts: PathBuf,
    pub dataset: String,
    pub split: Split,
}

impl ManifestEntry {
    /// Sample id: the annotation file stem.
    pub fn id(&self) -> String {
        self.pts.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Dataset family a manifest dataset name counts towards; the two 300-W
/// halves share one row.
pub fn family(dataset: &str) -> &str {
    if dataset.starts_with("300-W") {
        "300-W"
    } else {
        dataset
    }
}

/// Expected image counts of a complete standard dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedCount {
    pub dataset: &'static str,
    pub train: usize,
    pub val: usize,
}

pub const STANDARD_COUNTS: [ExpectedCount; 6] = [
    ExpectedCount { dataset: "AFW", train: 337, val: 0 },
    ExpectedCount { dataset: "Helen", train: 2000, val: 330 },
    ExpectedCount { dataset: "LFPW", train: 811, val: 224 },
    ExpectedCount { dataset: "300-W", train: 0, val: 600 },
    ExpectedCount { dataset: "IBUG", train: 0, val: 135 },
    ExpectedCount { dataset: "COFW", train: 0, val: 507 },
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses `image_path,pts_path,dataset,split` rows after a header
    /// line; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Manifest { line: 1, detail: e.to_string() })?;
        let expected = ["image_path", "pts_path", "dataset", "split"];
        if header.iter().ne(expected) {
            return Err(Error::Manifest { line: 1, detail: format!("header must be {}", expected.join(",")) });
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Manifest { line, detail: e.to_string() })?;
            if rec.len() != 4 {
                return Err(Error::Manifest { line, detail: format!("expected 4 fields, found {}", rec.len()) });
            }
            let split = Split::parse(&rec[3]).ok_or_else(|| Error::Manifest { line, detail: format!("unknown split `{}`", &rec[3]) })?;
            entries.push(ManifestEntry { image: base.join(&rec[0]), pts: base.join(&rec[1]), dataset: rec[2].to_string(), split });
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// CSV text; paths under `base` are written relative to it.
    pub fn to_csv(&self, base: &Path) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        w.write_record(["image_path", "pts_path", "dataset", "split"]).expect("in-memory csv");
        for e in &self.entries {
            w.write_record([rel(&e.image), rel(&e.pts), e.dataset.clone(), e.split.name().to_string()]).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_csv(base)).map_err(|e| Error::io(path, e))
    }

    /// Entry counts per `(dataset family, split)`.
    pub fn counts(&self) -> BTreeMap<(String, Split), usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((family(&e.dataset).to_string(), e.split)).or_insert(0) += 1;
        }
        out
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads one entry; `occluded` holds the ids of the occlusion subset.
    pub fn load(entry: &ManifestEntry, occluded: &BTreeSet<String>) -> Result<FaceSample> {
        let text = std::fs::read_to_string(&entry.pts).map_err(|e| Error::io(&entry.pts, e))?;
        let landmarks = parse_pts(&text)?;
        let image = Image::load(&entry.image)?;
        let id = entry.id();
        let meta = SampleMeta { dataset: entry.dataset.clone(), split: entry.split, occluded: occluded.contains(&id), id };
        FaceSample::new(image, landmarks, meta)
    }

    /// Compares the counts with the complete standard datasets.
    pub fn check_counts(&self, missing: &[PathBuf]) -> CountReport {
        let counts = self.counts();
        let mut rows = Vec::new();
        for exp in STANDARD_COUNTS {
            for (split, expected) in [(Split::Train, exp.train), (Split::Val, exp.val)] {
                let found = counts.get(&(exp.dataset.to_string(), split)).copied().unwrap_or(0);
                rows.push(CountRow { dataset: exp.dataset.to_string(), split, expected, found });
            }
        }
        let known: BTreeSet<&str> = STANDARD_COUNTS.iter().map(|e| e.dataset).collect();
        for ((ds, split), &found) in &counts {
            if !known.contains(ds.as_str()) {
                rows.push(CountRow { dataset: ds.clone(), split: *split, expected: 0, found });
            }
        }
        CountReport { rows, missing: missing.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub dataset: String,
    pub split: Split,
    pub expected: usize,
    pub found: usize,
}

/// Per-dataset comparison of found and expected counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
    /// Annotation files without a matching image.
    pub missing: Vec<PathBuf>,
}

impl CountReport {
    pub fn discrepancies(&self) -> impl Iterator<Item = &CountRow> {
        self.rows.iter().filter(|r| r.found != r.expected)
    }

    pub fn is_exact(&self) -> bool {
        self.discrepancies().next().is_none() && self.missing.is_empty()
    }
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<5} {:>8} {:>8}  status", "dataset", "split", "expected", "found")?;
        for r in &self.rows {
            let status = match r.found.cmp(&r.expected) {
                std::cmp::Ordering::Equal => "ok".to_string(),
                std::cmp::Ordering::Less => format!("missing {}", r.expected - r.found),
                std::cmp::Ordering::Greater => format!("extra {}", r.found - r.expected),
            };
            writeln!(f, "{:<8} {:<5} {:>8} {:>8}  {status}", r.dataset, r.split.name(), r.expected, r.found)?;
        }
        for m in &self.missing {
            writeln!(f, "no image for {}", m.display())?;
        }
        Ok(())
    }
}

/// Result of [`scan_standard`].
#[derive(Clone, Debug, Default)]
pub struct Scan {
    pub manifest: Manifest,
    /// Annotation files without a matching image.
    pub missing: Vec<PathBuf>,
    /// Annotation files outside any recognized dataset directory.
    pub unrecognized: Vec<PathBuf>,
}

/// Dataset and split of an annotation path (relative to the scan root),
/// from its directory names: `afw`, `helen/{trainset,testset}`,
/// `lfpw/{trainset,testset}`, `ibug`, `01_Indoor`, `02_Outdoor`, `cofw`.
pub fn classify(rel: &Path) -> Option<(&'static str, Split)> {
    let dirs: Vec<String> = rel.parent()?.components().map(|c| c.as_os_str().to_string_lossy().to_lowercase()).collect();
    let has = |name: &str| dirs.iter().any(|d| d == name);
    let trainval = || {
        if has("trainset") {
            Some(Split::Train)
        } else if has("testset") {
            Some(Split::Val)
        } else {
            None
        }
    };
    if has("01_indoor") {
        Some(("300-W Indoor", Split::Val))
    } else if has("02_outdoor") {
        Some(("300-W Outdoor", Split::Val))
    } else if has("afw") {
        Some(("AFW", Split::Train))
    } else if has("helen") {
        trainval().map(|s| ("Helen", s))
    } else if has("lfpw") {
        trainval().map(|s| ("LFPW", s))
    } else if has("ibug") {
        Some(("IBUG", Split::Val))
    } else if dirs.iter().any(|d| d.starts_with("cofw")) {
        Some(("COFW", Split::Val))
    } else {
        None
    }
}

fn find_image(pts: &Path) -> Option<PathBuf> {
    let dir = pts.parent()?;
    let stem = pts.file_stem()?.to_string_lossy();
    let siblings: Vec<PathBuf> = std::fs::read_dir(dir).ok()?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    IMAGE_EXTENSIONS.iter().find_map(|ext| {
        siblings
            .iter()
            .find(|p| {
                p.file_stem().is_some_and(|s| s.to_string_lossy() == stem)
                    && p.extension().is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case(ext))
            })
            .cloned()
    })
}

/// Walks `root` for `.pts` files laid out as the standard distributions
/// and pairs each with its image.
pub fn scan_standard(root: &Path) -> Result<Scan> {
    let mut scan = Scan::default();
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pts")) {
            files.push(p.to_path_buf());
        }
    }
    files.sort();
    for pts in files {
        let rel = pts.strip_prefix(root).unwrap_or(&pts);
        let Some((dataset, split)) = classify(rel) else {
            scan.unrecognized.push(pts);
            continue;
        };
        match find_image(&pts) {
            Some(image) => scan.manifest.entries.push(ManifestEntry { image, pts, dataset: dataset.to_string(), split }),
            None => scan.missing.push(pts),
        }
    }
    Ok(scan)
}

/// Newline-separated sample ids; blank lines and `#` comments ignored.
pub fn parse_id_list(text: &str) -> BTreeSet<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect()
}

pub fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_id_list(&text))
}
