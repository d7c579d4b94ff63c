//! Cornell-format grasp data: rectangle files, organized point clouds, object
//! id and category sidecars, and cross-validation splits.
//!
//! On-disk layout (searched recursively under the root):
//!
//! * `pcdNNNNr.png` RGB image
//! * `pcdNNNN.txt` ASCII point cloud with an `index` field (flat row-major pixel index)
//! * `pcdNNNNcpos.txt` positive grasp rectangles, four `x y` lines per rectangle
//! * `z.txt` (optional, at the root) lines of `image_number object_id [description...]`
//!
//! Negative-grasp files (`cneg`) are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{polygon_to_rect, GeometryError, GraspRect, Point};

/// Image and object counts of the full Cornell dataset.
pub const CORNELL_IMAGE_COUNT: usize = 885;
pub const CORNELL_OBJECT_COUNT: usize = 240;
/// Smallest and largest category sizes (images) on the full labeled set.
pub const CATEGORY_MIN_IMAGES: usize = 20;
pub const CATEGORY_MAX_IMAGES: usize = 156;

pub const MAX_CATEGORIES: usize = 16;

/// Default category vocabulary for Cornell labels.
pub const CORNELL_CATEGORIES: [&str; MAX_CATEGORIES] = [
    "bottle",
    "shoe",
    "sporting equipment",
    "cup",
    "bowl and plate",
    "kitchen utensil",
    "tool",
    "eyewear",
    "stationery",
    "toy",
    "food",
    "container",
    "electronics",
    "personal care",
    "cleaning supplies",
    "apparel",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("format error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format { line: Option<usize>, msg: String },
    #[error("example {stem}: missing companion file {}", path.display())]
    MissingFile { stem: String, path: PathBuf },
    #[error("example {stem}: no valid grasp rectangles")]
    NoValidGrasps { stem: String },
    #[error("example {stem}: {msg}")]
    Invalid { stem: String, msg: String },
    #[error("dataset at {} contains no loadable examples", .0.display())]
    Empty(PathBuf),
    #[error("split error: {0}")]
    Split(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_err(line: Option<usize>, msg: impl Into<String>) -> DatasetError {
    DatasetError::Format { line, msg: msg.into() }
}

/// Depth map with a per-pixel presence flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub present: Vec<bool>,
}

impl DepthImage {
    pub fn missing(width: usize, height: usize) -> Self {
        DepthImage { width, height, values: vec![0.0; width * height], present: vec![false; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let i = row * self.width + col;
        self.present[i].then(|| self.values[i])
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        let i = row * self.width + col;
        self.values[i] = v;
        self.present[i] = true;
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }
}

#[derive(Debug, Clone)]
pub struct GraspExample {
    pub example_id: String,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub positive_grasps: Vec<GraspRect>,
    pub object_id: u32,
    pub category: Option<String>,
}

impl GraspExample {
    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }

    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RectParse {
    pub rects: Vec<GraspRect>,
    pub skipped: usize,
}

/// Parses a rectangle file: groups of four `x y` lines. Quadruples with
/// non-finite coordinates or zero extent are skipped and counted.
pub fn parse_rect_file(text: &str) -> Result<RectParse, DatasetError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(format_err(Some(i + 1), format!("expected two numbers, got {line:?}")));
        };
        let parse = |t: &str| t.parse::<f64>().map_err(|_| format_err(Some(i + 1), format!("bad number {t:?}")));
        points.push(Point::new(parse(a)?, parse(b)?));
    }
    if points.len() % 4 != 0 {
        return Err(format_err(None, format!("{} vertex lines is not a multiple of 4", points.len())));
    }
    let mut out = RectParse::default();
    for quad in points.chunks_exact(4) {
        let quad: &[Point; 4] = quad.try_into().expect("chunk of 4");
        match polygon_to_rect(quad) {
            Ok(r) => out.rects.push(r),
            Err(GeometryError::NonFinite | GeometryError::Degenerate { .. } | GeometryError::InvalidAngle(_)) => {
                out.skipped += 1
            }
            Err(GeometryError::TooFewVertices(_)) => unreachable!(),
        }
    }
    Ok(out)
}

/// Writes rectangles in the four-lines-per-rectangle vertex format.
pub fn write_rect_file(rects: &[GraspRect]) -> String {
    let mut s = String::new();
    for r in rects {
        for p in r.corners() {
            s.push_str(&format!("{:.6} {:.6}\n", p.x, p.y));
        }
    }
    s
}

/// Parses an ASCII organized point cloud. Each data row places one depth value
/// at flat pixel `index = row * width + col`; depth is the `depth` field when
/// present, otherwise the Euclidean norm of `x y z`.
pub fn parse_depth_cloud(text: &str, width: usize, height: usize) -> Result<DepthImage, DatasetError> {
    let mut fields: Option<Vec<String>> = None;
    let mut lines = text.lines().enumerate();
    let mut in_data = false;
    for (i, line) in lines.by_ref() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut toks = t.split_whitespace();
        let key = toks.next().unwrap_or_default().to_ascii_uppercase();
        match key.as_str() {
            "FIELDS" => fields = Some(toks.map(|s| s.to_ascii_lowercase()).collect()),
            "DATA" => {
                if toks.next().map(|s| s.to_ascii_lowercase()).as_deref() != Some("ascii") {
                    return Err(format_err(Some(i + 1), "only DATA ascii is supported"));
                }
                in_data = true;
                break;
            }
            "VERSION" | "SIZE" | "TYPE" | "COUNT" | "WIDTH" | "HEIGHT" | "VIEWPOINT" | "POINTS" => {}
            _ => return Err(format_err(Some(i + 1), format!("unexpected header line {t:?}"))),
        }
    }
    if !in_data {
        return Err(format_err(None, "header has no DATA line"));
    }
    let fields = fields.ok_or_else(|| format_err(None, "header has no FIELDS line"))?;
    let pos = |name: &str| fields.iter().position(|f| f == name);
    let idx_col = pos("index").ok_or_else(|| format_err(None, "FIELDS lacks an index field"))?;
    enum DepthSource {
        Direct(usize),
        Norm(usize, usize, usize),
    }
    let source = match (pos("depth"), pos("x"), pos("y"), pos("z")) {
        (Some(d), _, _, _) => DepthSource::Direct(d),
        (None, Some(x), Some(y), Some(z)) => DepthSource::Norm(x, y, z),
        _ => return Err(format_err(None, "FIELDS needs depth or x y z")),
    };

    let mut img = DepthImage::missing(width, height);
    let mut vals: Vec<f64> = Vec::with_capacity(fields.len());
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        vals.clear();
        for tok in t.split_whitespace() {
            vals.push(tok.parse::<f64>().map_err(|_| format_err(Some(i + 1), format!("bad number {tok:?}")))?);
        }
        if vals.len() != fields.len() {
            return Err(format_err(Some(i + 1), format!("expected {} values, got {}", fields.len(), vals.len())));
        }
        let index = vals[idx_col];
        if !(index >= 0.0 && index.fract() == 0.0 && (index as usize) < width * height) {
            return Err(format_err(Some(i + 1), format!("index {index} outside {width}x{height} image")));
        }
        let d = match source {
            DepthSource::Direct(c) => vals[c],
            DepthSource::Norm(x, y, z) => (vals[x] * vals[x] + vals[y] * vals[y] + vals[z] * vals[z]).sqrt(),
        };
        if !d.is_finite() {
            continue;
        }
        let index = index as usize;
        img.set(index / width, index % width, d as f32);
    }
    Ok(img)
}

/// Serializes present pixels as an ASCII point cloud (`x y z rgb index`, with
/// the depth carried in `z`).
pub fn write_depth_cloud(depth: &DepthImage) -> String {
    let n = depth.present_count();
    let mut s = String::with_capacity(64 + n * 24);
    s.push_str("# .PCD v.7 - Point Cloud Data file format\n");
    s.push_str("FIELDS x y z rgb index\nSIZE 4 4 4 4 4\nTYPE F F F F U\nCOUNT 1 1 1 1 1\n");
    s.push_str(&format!("WIDTH {n}\nHEIGHT 1\nPOINTS {n}\nDATA ascii\n"));
    for (i, (&v, &p)) in depth.values.iter().zip(&depth.present).enumerate() {
        if p {
            s.push_str(&format!("0 0 {v} 0 {i}\n"));
        }
    }
    s
}

/// Object-id to category assignment plus the vocabulary it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLabels {
    pub vocabulary: Vec<String>,
    pub by_object: BTreeMap<u32, String>,
}

impl CategoryLabels {
    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.vocabulary.iter().position(|c| c == category)
    }
}

/// Parses `object_id,category` rows. A first line of the form
/// `# vocabulary: a, b, c` declares the allowed names; otherwise the Cornell
/// vocabulary applies. A header row is optional.
pub fn load_category_labels(csv_text: &str) -> Result<CategoryLabels, DatasetError> {
    let mut vocabulary: Vec<String> = CORNELL_CATEGORIES.iter().map(|s| s.to_string()).collect();
    let mut by_object = BTreeMap::new();
    for (i, line) in csv_text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("vocabulary:") {
                vocabulary = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if vocabulary.len() > MAX_CATEGORIES {
                    return Err(format_err(Some(i + 1), format!("{} categories exceeds {MAX_CATEGORIES}", vocabulary.len())));
                }
            }
            continue;
        }
        let Some((id, cat)) = t.split_once(',') else {
            return Err(format_err(Some(i + 1), format!("expected object_id,category, got {t:?}")));
        };
        let (id, cat) = (id.trim(), cat.trim());
        let Ok(id) = id.parse::<u32>() else {
            if by_object.is_empty() && id.eq_ignore_ascii_case("object_id") {
                continue;
            }
            return Err(format_err(Some(i + 1), format!("bad object id {id:?}")));
        };
        if !vocabulary.iter().any(|v| v == cat) {
            return Err(format_err(Some(i + 1), format!("unknown category {cat:?}")));
        }
        if let Some(prev) = by_object.insert(id, cat.to_string()) {
            if prev != cat {
                return Err(format_err(Some(i + 1), format!("object {id} labeled both {prev:?} and {cat:?}")));
            }
        }
    }
    Ok(CategoryLabels { vocabulary, by_object })
}

/// Warnings for category sizes outside the published bounds.
pub fn category_histogram_warnings(histogram: &BTreeMap<String, usize>) -> Vec<String> {
    histogram
        .iter()
        .filter(|(_, &n)| !(CATEGORY_MIN_IMAGES..=CATEGORY_MAX_IMAGES).contains(&n))
        .map(|(c, n)| {
            format!("category {c:?} has {n} images, outside [{CATEGORY_MIN_IMAGES}, {CATEGORY_MAX_IMAGES}]")
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub objects: usize,
    pub grasps: usize,
    pub skipped_rectangles: usize,
    pub rejected_examples: usize,
    pub category_histogram: Option<BTreeMap<String, usize>>,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub examples: Vec<GraspExample>,
    pub summary: DatasetSummary,
    /// Per-example failures; these examples are not in `examples`.
    pub errors: Vec<DatasetError>,
    pub labels: Option<CategoryLabels>,
}

impl LoadedDataset {
    pub fn get(&self, id: &str) -> Option<&GraspExample> {
        self.examples.binary_search_by(|e| e.example_id.as_str().cmp(id)).ok().map(|i| &self.examples[i])
    }

    /// Example id to category, for examples that have one.
    pub fn category_map(&self) -> HashMap<String, String> {
        self.examples.iter().filter_map(|e| e.category.clone().map(|c| (e.example_id.clone(), c))).collect()
    }
}

#[derive(Default)]
struct StemFiles {
    rgb: Option<PathBuf>,
    cloud: Option<PathBuf>,
    rects: Option<PathBuf>,
}

fn classify_file(name: &str) -> Option<(&str, u8)> {
    let rest = name.strip_prefix("pcd")?;
    let digits = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    if digits == 0 {
        return None;
    }
    let (stem, tail) = rest.split_at(digits);
    let kind = match tail {
        "r.png" => 0,
        ".txt" => 1,
        "cpos.txt" => 2,
        _ => return None,
    };
    Some((stem, kind))
}

/// Reads the `z.txt` image-number to object-id mapping.
pub fn parse_object_map(text: &str) -> Result<BTreeMap<u32, u32>, DatasetError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut toks = t.split_whitespace();
        let img = toks.next().and_then(|s| s.parse::<u32>().ok());
        let obj = toks.next().and_then(|s| s.parse::<u32>().ok());
        match (img, obj) {
            (Some(img), Some(obj)) => {
                map.insert(img, obj);
            }
            _ => return Err(format_err(Some(i + 1), format!("expected `image_number object_id`, got {t:?}"))),
        }
    }
    Ok(map)
}

/// Loads every example under `root`. Failures on individual examples are
/// collected in [`LoadedDataset::errors`]; an empty result is fatal.
pub fn load_dataset(root: &Path, labels_path: Option<&Path>) -> Result<LoadedDataset, DatasetError> {
    let mut stems: BTreeMap<String, StemFiles> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DatasetError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        if let Some((stem, kind)) = classify_file(&name) {
            let slot = stems.entry(stem.to_string()).or_default();
            let p = Some(entry.path().to_path_buf());
            match kind {
                0 => slot.rgb = p,
                1 => slot.cloud = p,
                _ => slot.rects = p,
            }
        }
    }

    let object_map = match fs::read_to_string(root.join("z.txt")) {
        Ok(text) => Some(parse_object_map(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("no z.txt object map under {}: each image is its own object", root.display());
            None
        }
        Err(e) => return Err(e.into()),
    };
    let labels = match labels_path {
        Some(p) => Some(load_category_labels(&fs::read_to_string(p)?)?),
        None => None,
    };

    let stems: Vec<(String, StemFiles)> = stems.into_iter().collect();
    let results: Vec<Result<(GraspExample, usize), DatasetError>> = stems
        .par_iter()
        .map(|(stem, files)| load_example(stem, files, object_map.as_ref(), labels.as_ref()))
        .collect();

    let mut examples = Vec::new();
    let mut errors = Vec::new();
    let mut summary = DatasetSummary::default();
    for r in results {
        match r {
            Ok((ex, skipped)) => {
                summary.skipped_rectangles += skipped;
                summary.grasps += ex.positive_grasps.len();
                examples.push(ex);
            }
            Err(e) => {
                if let DatasetError::NoValidGrasps { .. } = e {
                    summary.rejected_examples += 1;
                }
                log::warn!("{e}");
                errors.push(e);
            }
        }
    }
    if examples.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    summary.images = examples.len();
    summary.objects = examples.iter().map(|e| e.object_id).collect::<BTreeSet<_>>().len();
    if labels.is_some() {
        let mut hist = BTreeMap::new();
        for e in &examples {
            if let Some(c) = &e.category {
                *hist.entry(c.clone()).or_insert(0) += 1;
            }
        }
        if summary.images == CORNELL_IMAGE_COUNT {
            for w in category_histogram_warnings(&hist) {
                log::warn!("{w}");
            }
        }
        summary.category_histogram = Some(hist);
    }
    Ok(LoadedDataset { examples, summary, errors, labels })
}

fn load_example(
    stem: &str,
    files: &StemFiles,
    object_map: Option<&BTreeMap<u32, u32>>,
    labels: Option<&CategoryLabels>,
) -> Result<(GraspExample, usize), DatasetError> {
    let need = |p: &Option<PathBuf>, suffix: &str| {
        p.clone().ok_or_else(|| DatasetError::MissingFile { stem: stem.to_string(), path: format!("pcd{stem}{suffix}").into() })
    };
    let rect_path = need(&files.rects, "cpos.txt")?;
    let rgb_path = need(&files.rgb, "r.png")?;
    let cloud_path = need(&files.cloud, ".txt")?;

    let invalid = |e: DatasetError| DatasetError::Invalid { stem: stem.to_string(), msg: e.to_string() };
    let rgb = image::open(&rgb_path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let rect_text = String::from_utf8_lossy(&fs::read(&rect_path)?).into_owned();
    let parsed = parse_rect_file(&rect_text).map_err(invalid)?;
    let depth = parse_depth_cloud(&fs::read_to_string(&cloud_path)?, w, h).map_err(invalid)?;

    let mut skipped = parsed.skipped;
    let mut grasps = Vec::with_capacity(parsed.rects.len());
    for r in parsed.rects {
        if r.x >= 0.0 && r.y >= 0.0 && r.x < w as f64 && r.y < h as f64 {
            grasps.push(r);
        } else {
            skipped += 1;
        }
    }
    if grasps.is_empty() {
        return Err(DatasetError::NoValidGrasps { stem: stem.to_string() });
    }
    let number: u32 = stem.parse().map_err(|_| DatasetError::Invalid { stem: stem.to_string(), msg: "stem is not numeric".into() })?;
    let object_id = match object_map {
        Some(m) => *m.get(&number).ok_or_else(|| DatasetError::Invalid {
            stem: stem.to_string(),
            msg: "image number missing from z.txt".into(),
        })?,
        None => number,
    };
    let category = labels.and_then(|l| l.by_object.get(&object_id).cloned());
    Ok((
        GraspExample { example_id: stem.to_string(), rgb, depth, positive_grasps: grasps, object_id, category },
        skipped,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitMode {
    #[serde(rename = "image-wise")]
    ImageWise,
    #[serde(rename = "object-wise")]
    ObjectWise,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::ImageWise => "image-wise",
            SplitMode::ObjectWise => "object-wise",
        })
    }
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image-wise" | "image" => Ok(SplitMode::ImageWise),
            "object-wise" | "object" => Ok(SplitMode::ObjectWise),
            _ => Err(format!("unknown split mode {s:?} (expected image-wise or object-wise)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    pub fn test_ids(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.iter().cloned()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let plan: SplitPlan = serde_json::from_str(text).map_err(|e| format_err(None, e.to_string()))?;
        if plan.folds.len() != plan.k {
            return Err(format_err(None, format!("split declares k = {} but has {} folds", plan.k, plan.folds.len())));
        }
        Ok(plan)
    }
}

/// Deterministic k-fold split. Image-wise deals shuffled example ids
/// round-robin; object-wise shuffles object ids and gives each object's images
/// to the currently smallest fold.
pub fn make_split(examples: &[GraspExample], mode: SplitMode, k: usize, seed: u64) -> Result<SplitPlan, DatasetError> {
    let units: Vec<(u32, &str)> = examples.iter().map(|e| (e.object_id, e.example_id.as_str())).collect();
    split_units(&units, mode, k, seed)
}

/// [`make_split`] over bare `(object_id, example_id)` pairs.
pub fn split_units(items: &[(u32, &str)], mode: SplitMode, k: usize, seed: u64) -> Result<SplitPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::Split(format!("k = {k}: need at least 2 folds")));
    }
    if items.is_empty() {
        return Err(DatasetError::Split("no examples to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    match mode {
        SplitMode::ImageWise => {
            let mut ids: Vec<&str> = items.iter().map(|(_, id)| *id).collect();
            ids.sort_unstable();
            if k > ids.len() {
                return Err(DatasetError::Split(format!("k = {k} exceeds {} images", ids.len())));
            }
            ids.shuffle(&mut rng);
            for (i, id) in ids.into_iter().enumerate() {
                folds[i % k].push(id.to_string());
            }
        }
        SplitMode::ObjectWise => {
            let mut groups: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
            for (obj, id) in items {
                groups.entry(*obj).or_default().push(id);
            }
            if k > groups.len() {
                return Err(DatasetError::Split(format!("k = {k} exceeds {} objects", groups.len())));
            }
            let mut objects: Vec<u32> = groups.keys().copied().collect();
            objects.shuffle(&mut rng);
            for obj in objects {
                let target = (0..k).min_by_key(|&f| (folds[f].len(), f)).expect("k >= 2");
                folds[target].extend(groups[&obj].iter().map(|s| s.to_string()));
            }
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(SplitPlan { mode, k, seed, folds })
}
