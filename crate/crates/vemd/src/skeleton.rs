//! Skeleton definitions: joints and the limb (edge) lists built over them.
//!
//! Three skeletons ship with the crate in a versioned config file
//! (`assets/skeletons.json`):
//!
//! * `body17` — COCO 17 keypoints with 18 limb connections,
//! * `face_query` — 20 connections over the 68 facial landmarks, covering the
//!   lips, eyebrows and eyes,
//! * `face_dense` — 83 connections: the standard 63-segment landmark chain
//!   plus the same 20 custom connections (rows 63..83), so `face_query` limbs
//!   are a suffix slice of `face_dense` limbs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VemdError};

pub const BODY_SKELETON: &str = "body17";
pub const FACE_QUERY_SKELETON: &str = "face_query";
pub const FACE_DENSE_SKELETON: &str = "face_dense";

/// Number of base segments in the 68-landmark face chain.
pub const FACE_BASE_EDGES: usize = 63;
/// Number of custom face connections appended after the base chain.
pub const FACE_CUSTOM_EDGES: usize = 20;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Skeleton {
    pub name: String,
    pub joints: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_limbs(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.num_joints();
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &self.edges {
            if a >= nj || b >= nj {
                return Err(VemdError::Format(format!(
                    "skeleton {}: edge ({a},{b}) out of range for {nj} joints",
                    self.name
                )));
            }
            if a == b {
                return Err(VemdError::Format(format!(
                    "skeleton {}: degenerate edge ({a},{a})",
                    self.name
                )));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(VemdError::Format(format!(
                    "skeleton {}: duplicate edge ({a},{b})",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Versioned collection of skeletons, loadable from a config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonSet {
    pub version: u32,
    pub skeletons: Vec<Skeleton>,
}

impl SkeletonSet {
    /// The skeleton set shipped with the crate.
    pub fn builtin() -> Self {
        let set: SkeletonSet = serde_json::from_str(include_str!("../assets/skeletons.json"))
            .expect("embedded skeleton config is valid");
        set
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: SkeletonSet = serde_json::from_str(&text)?;
        for sk in &set.skeletons {
            sk.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Skeleton> {
        self.skeletons
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| VemdError::Format(format!("unknown skeleton: {name}")))
    }
}

/// COCO-17 body skeleton with 18 limbs.
pub fn body17() -> Skeleton {
    SkeletonSet::builtin().get(BODY_SKELETON).unwrap().clone()
}

/// 20-limb face skeleton used by the query decoder.
pub fn face_query() -> Skeleton {
    SkeletonSet::builtin().get(FACE_QUERY_SKELETON).unwrap().clone()
}

/// 83-limb face skeleton used by the dense heatmap decoder.
pub fn face_dense() -> Skeleton {
    SkeletonSet::builtin().get(FACE_DENSE_SKELETON).unwrap().clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_counts_match_contract() {
        let body = body17();
        assert_eq!(body.num_joints(), 17);
        assert_eq!(body.num_limbs(), 18);
        let fq = face_query();
        assert_eq!(fq.num_joints(), 68);
        assert_eq!(fq.num_limbs(), FACE_CUSTOM_EDGES);
        let fd = face_dense();
        assert_eq!(fd.num_joints(), 68);
        assert_eq!(fd.num_limbs(), FACE_BASE_EDGES + FACE_CUSTOM_EDGES);
        for sk in [&body, &fq, &fd] {
            sk.validate().unwrap();
        }
    }

    #[test]
    fn face_query_is_suffix_of_face_dense() {
        let fq = face_query();
        let fd = face_dense();
        assert_eq!(&fd.edges[FACE_BASE_EDGES..], &fq.edges[..]);
    }
}
