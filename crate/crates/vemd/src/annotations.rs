//! Structural annotations: per-person limb sets, adjacency matrices, dense
//! heatmap targets, and the manifest plumbing around them.
//!
//! Coordinates are normalized to `[0,1]` by image width/height so sigmoid
//! prediction heads compare directly against ground truth.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VemdError};
use crate::skeleton::Skeleton;

/// Default keypoint-confidence threshold for limb validity.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

/// One person's limbs: `(num_limbs, 4)` normalized `[x1,y1,x2,y2]` rows plus a
/// per-limb validity mask. Invalid limbs carry zeroed coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonLimbs {
    pub limbs: Array2<f64>,
    pub valid: Vec<bool>,
}

impl PersonLimbs {
    pub fn num_limbs(&self) -> usize {
        self.limbs.shape()[0]
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// Flattened `[x1,y1,x2,y2,...]` coordinate vector of length `4*num_limbs`.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.limbs.iter().copied().collect()
    }

    /// Per-coordinate mask (each limb contributes four entries).
    pub fn flat_mask(&self) -> Vec<bool> {
        self.valid.iter().flat_map(|&v| [v; 4]).collect()
    }
}

/// Binary limb-to-limb connectivity within one person instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix(pub Array2<f64>);

impl AdjacencyMatrix {
    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub persons_body: Vec<PersonLimbs>,
    pub persons_face: Vec<PersonLimbs>,
}

impl FrameAnnotation {
    pub fn persons(&self, modality: Modality) -> &[PersonLimbs] {
        match modality {
            Modality::Body => &self.persons_body,
            Modality::Face => &self.persons_face,
        }
    }

    fn any_valid_person(&self) -> bool {
        self.persons_body.iter().any(|p| p.any_valid())
            || self.persons_face.iter().any(|p| p.any_valid())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Body,
    Face,
}

/// Per-video annotation document (one JSON file per video).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub frames: Vec<FrameAnnotation>,
}

// --- serialized forms -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PersonJson {
    limbs: Vec<[f64; 4]>,
    mask: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    frame_index: usize,
    bodies: Vec<PersonJson>,
    faces: Vec<PersonJson>,
}

#[derive(Serialize, Deserialize)]
struct VideoJson {
    video_id: String,
    frames: Vec<FrameJson>,
}

fn person_to_json(p: &PersonLimbs) -> PersonJson {
    PersonJson {
        limbs: p
            .limbs
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2], r[3]])
            .collect(),
        mask: p.valid.iter().map(|&v| v as u8).collect(),
    }
}

fn person_from_json(p: &PersonJson) -> Result<PersonLimbs> {
    if p.limbs.len() != p.mask.len() {
        return Err(VemdError::Format(format!(
            "annotation person: {} limbs but {} mask entries",
            p.limbs.len(),
            p.mask.len()
        )));
    }
    let n = p.limbs.len();
    let mut limbs = Array2::zeros((n, 4));
    for (i, row) in p.limbs.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(VemdError::Format(format!(
                    "annotation coordinate {v} outside [0,1]"
                )));
            }
            limbs[[i, j]] = v;
        }
    }
    Ok(PersonLimbs {
        limbs,
        valid: p.mask.iter().map(|&m| m != 0).collect(),
    })
}

impl VideoAnnotation {
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = VideoJson {
            video_id: self.video_id.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameJson {
                    frame_index: f.frame_index,
                    bodies: f.persons_body.iter().map(person_to_json).collect(),
                    faces: f.persons_face.iter().map(person_to_json).collect(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: VideoJson = serde_json::from_str(&text)?;
        let mut frames = Vec::with_capacity(doc.frames.len());
        for f in &doc.frames {
            frames.push(FrameAnnotation {
                frame_index: f.frame_index,
                persons_body: f.bodies.iter().map(person_from_json).collect::<Result<_>>()?,
                persons_face: f.faces.iter().map(person_from_json).collect::<Result<_>>()?,
            });
        }
        Ok(VideoAnnotation {
            video_id: doc.video_id,
            frames,
        })
    }
}

// --- operations --------------------------------------------------------------

/// Convert detected keypoints into limb segments.
///
/// A limb is valid iff both endpoint joints have confidence at or above the
/// threshold; invalid limbs are zeroed.
pub fn keypoints_to_limbs(
    keypoints: &Array2<f64>,
    confidence: &[f64],
    skeleton: &Skeleton,
    conf_threshold: f64,
) -> Result<PersonLimbs> {
    if keypoints.shape() != [skeleton.num_joints(), 2] {
        return Err(VemdError::Format(format!(
            "keypoints shape {:?} does not match skeleton {} with {} joints",
            keypoints.shape(),
            skeleton.name,
            skeleton.num_joints()
        )));
    }
    if confidence.len() != skeleton.num_joints() {
        return Err(VemdError::Format(format!(
            "{} confidences for {} joints",
            confidence.len(),
            skeleton.num_joints()
        )));
    }
    let n = skeleton.num_limbs();
    let mut limbs = Array2::zeros((n, 4));
    let mut valid = vec![false; n];
    for (k, &(a, b)) in skeleton.edges.iter().enumerate() {
        if confidence[a] >= conf_threshold && confidence[b] >= conf_threshold {
            valid[k] = true;
            limbs[[k, 0]] = keypoints[[a, 0]].clamp(0.0, 1.0);
            limbs[[k, 1]] = keypoints[[a, 1]].clamp(0.0, 1.0);
            limbs[[k, 2]] = keypoints[[b, 0]].clamp(0.0, 1.0);
            limbs[[k, 3]] = keypoints[[b, 1]].clamp(0.0, 1.0);
        }
    }
    Ok(PersonLimbs { limbs, valid })
}

/// Ground-truth limb adjacency: two limbs are adjacent iff they share an
/// endpoint joint. Symmetric with a zero diagonal.
pub fn build_adjacency(skeleton: &Skeleton) -> AdjacencyMatrix {
    let n = skeleton.num_limbs();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        let (a1, b1) = skeleton.edges[i];
        for j in (i + 1)..n {
            let (a2, b2) = skeleton.edges[j];
            if a1 == a2 || a1 == b2 || b1 == a2 || b1 == b2 {
                m[[i, j]] = 1.0;
                m[[j, i]] = 1.0;
            }
        }
    }
    AdjacencyMatrix(m)
}

/// Squared distance between a point and a segment, all in pixel units.
fn point_segment_dist2(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 <= f64::EPSILON {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// Render dense per-limb heatmap targets at `(h, w)` resolution.
///
/// Channel `k` holds `max` over persons of `exp(-d^2 / (2 sigma^2))` where `d`
/// is the pixel-center distance to person's limb `k`. Invalid limbs contribute
/// nothing; an empty scene renders all zeros.
pub fn render_limb_heatmaps(
    persons: &[PersonLimbs],
    resolution: (usize, usize),
    sigma: f64,
) -> Result<Array3<f64>> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(VemdError::Argument("heatmap resolution must be positive".into()));
    }
    if sigma <= 0.0 {
        return Err(VemdError::Argument("sigma must be positive".into()));
    }
    let num_limbs = persons.first().map(|p| p.num_limbs()).unwrap_or(0);
    for p in persons {
        if p.num_limbs() != num_limbs {
            return Err(VemdError::Shape(
                "persons with differing limb counts in one render".into(),
            ));
        }
    }
    let mut maps = Array3::zeros((num_limbs, h, w));
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Only pixels within `reach` of a segment can exceed ~1e-9.
    let reach = sigma * 6.5;
    for person in persons {
        for k in 0..num_limbs {
            if !person.valid[k] {
                continue;
            }
            let x1 = person.limbs[[k, 0]] * w as f64;
            let y1 = person.limbs[[k, 1]] * h as f64;
            let x2 = person.limbs[[k, 2]] * w as f64;
            let y2 = person.limbs[[k, 3]] * h as f64;
            let r0 = ((y1.min(y2) - reach).floor().max(0.0)) as usize;
            let r1 = ((y1.max(y2) + reach).ceil().min(h as f64)) as usize;
            let c0 = ((x1.min(x2) - reach).floor().max(0.0)) as usize;
            let c1 = ((x1.max(x2) + reach).ceil().min(w as f64)) as usize;
            for r in r0..r1 {
                let py = r as f64 + 0.5;
                for c in c0..c1 {
                    let px = c as f64 + 0.5;
                    let d2 = point_segment_dist2(px, py, x1, y1, x2, y2);
                    let v = (-d2 * inv).exp();
                    if v > maps[[k, r, c]] {
                        maps[[k, r, c]] = v;
                    }
                }
            }
        }
    }
    Ok(maps)
}

// --- manifest ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub frame_count: usize,
    pub annotation_path: PathBuf,
}

/// Dataset manifest: a JSON-lines file whose first line holds the class names
/// and every following line one entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against (the manifest's parent).
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    class_names: Vec<String>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, root: PathBuf) -> Self {
        Manifest {
            class_names,
            entries: Vec::new(),
            root,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(VemdError::Format(format!(
                    "entry {}: label {} outside {} classes",
                    e.video_id,
                    e.label,
                    self.class_names.len()
                )));
            }
            if !ids.insert(&e.video_id) {
                return Err(VemdError::Format(format!("duplicate video_id {}", e.video_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&ManifestHeader {
            class_names: self.class_names.clone(),
        })?);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| VemdError::Format("empty manifest".into()))?,
        )?;
        let mut entries = Vec::new();
        for line in lines {
            entries.push(serde_json::from_str::<ManifestEntry>(line)?);
        }
        let m = Manifest {
            class_names: header.class_names,
            entries,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Outcome of [`filter_manifest`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
    /// Percentage change of the entry count, rounded to two decimals
    /// (zero when nothing was dropped, negative otherwise).
    pub drop_pct: f64,
    /// Entries dropped with a reason (missing annotation file, no valid persons).
    pub dropped_entries: Vec<(String, String)>,
}

impl FilterReport {
    /// Formatted as `"<kept> (<drop_pct>%)"`, e.g. `9558 (-2.62%)`.
    pub fn summary(&self) -> String {
        format!("{} ({:.2}%)", self.kept, self.drop_pct)
    }
}

/// Drop manifest entries whose annotations contain zero valid persons in
/// every frame (or whose annotation file is unreadable).
pub fn filter_manifest(manifest: &Manifest) -> (Manifest, FilterReport) {
    let mut kept = Manifest::new(manifest.class_names.clone(), manifest.root.clone());
    let mut dropped_entries = Vec::new();
    for e in &manifest.entries {
        let ann_path = manifest.resolve(&e.annotation_path);
        match VideoAnnotation::load(&ann_path) {
            Ok(ann) => {
                if ann.frames.iter().any(|f| f.any_valid_person()) {
                    kept.entries.push(e.clone());
                } else {
                    dropped_entries.push((e.video_id.clone(), "no valid persons".to_string()));
                }
            }
            Err(err) => {
                dropped_entries.push((e.video_id.clone(), format!("annotation unreadable: {err}")));
            }
        }
    }
    let total = manifest.entries.len();
    let dropped = dropped_entries.len();
    let drop_pct = if dropped == 0 || total == 0 {
        0.0
    } else {
        -(dropped as f64 / total as f64 * 100.0)
    };
    let report = FilterReport {
        kept: kept.entries.len(),
        dropped,
        drop_pct,
        dropped_entries,
    };
    (kept, report)
}

/// Per-manifest annotation statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ManifestStats {
    pub max_bodies_per_frame: usize,
    pub max_faces_per_frame: usize,
    pub per_class_counts: Vec<usize>,
}

/// Maxima over all frames of all entries; persons count when at least one of
/// their limbs is valid.
pub fn manifest_stats(manifest: &Manifest) -> Result<ManifestStats> {
    let mut stats = ManifestStats {
        per_class_counts: vec![0; manifest.class_names.len()],
        ..Default::default()
    };
    for e in &manifest.entries {
        stats.per_class_counts[e.label] += 1;
        let ann = VideoAnnotation::load(&manifest.resolve(&e.annotation_path))?;
        for f in &ann.frames {
            let bodies = f.persons_body.iter().filter(|p| p.any_valid()).count();
            let faces = f.persons_face.iter().filter(|p| p.any_valid()).count();
            stats.max_bodies_per_frame = stats.max_bodies_per_frame.max(bodies);
            stats.max_faces_per_frame = stats.max_faces_per_frame.max(faces);
        }
    }
    Ok(stats)
}
