//! Per-frame segment extraction, detector-mask fusion and voxel-voting data
//! association against the mapped objects.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{PinholeCamera, RigidTransform, Vec3};
use crate::image::{DepthImage, Image};
use crate::voxel::{GlobalMap, MapError, ObjectId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub tau_overlap: f64,
    pub vote_fraction_min: f64,
    pub min_segment_points: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            tau_overlap: 0.8,
            vote_fraction_min: 0.3,
            min_segment_points: 50,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_overlap > 0.0 && self.tau_overlap <= 1.0) {
            return Err(format!("tau_overlap must be in (0, 1], got {}", self.tau_overlap));
        }
        if !(0.0..=1.0).contains(&self.vote_fraction_min) {
            return Err(format!("vote_fraction_min must be in [0, 1], got {}", self.vote_fraction_min));
        }
        if self.min_segment_points == 0 {
            return Err("min_segment_points must be at least 1".into());
        }
        Ok(())
    }
}

/// Back-projected points of one labelled image region, in the global frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSegment {
    /// Per-frame segment label (smallest member label after merging).
    pub label: u16,
    pub points: Vec<Vec3>,
    pub pixels: Vec<(u32, u32)>,
    pub instance: Option<u16>,
    pub matched_object: Option<ObjectId>,
    pub is_semantic_object: bool,
}

impl FrameSegment {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len().max(1) as f64
    }

    fn absorb(&mut self, other: FrameSegment) {
        self.label = self.label.min(other.label);
        self.points.extend(other.points);
        self.pixels.extend(other.pixels);
        self.is_semantic_object |= other.is_semantic_object;
    }
}

/// One segment per nonzero label holding at least `min_points` pixels with a valid range.
pub fn extract_segments(
    depth: &DepthImage,
    labels: &Image<u16>,
    cam: &PinholeCamera,
    camera_pose: &RigidTransform,
    min_points: usize,
) -> Result<Vec<FrameSegment>, MapError> {
    let expected = (cam.width, cam.height);
    if depth.dimensions() != expected || labels.dimensions() != expected {
        return Err(MapError::DimensionMismatch(format!(
            "depth {:?} and labels {:?} must match the {}x{} camera",
            depth.dimensions(),
            labels.dimensions(),
            cam.width,
            cam.height
        )));
    }
    let origin = *camera_pose.translation();
    let mut by_label: BTreeMap<u16, FrameSegment> = BTreeMap::new();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let label = *labels.get(u, v);
            let range = *depth.get(u, v) as f64;
            if label == 0 || !(range > 0.0 && range.is_finite()) {
                continue;
            }
            let p = origin + camera_pose.transform_vector(&cam.ray_direction(u, v)) * range;
            let seg = by_label.entry(label).or_insert_with(|| FrameSegment {
                label,
                points: Vec::new(),
                pixels: Vec::new(),
                instance: None,
                matched_object: None,
                is_semantic_object: false,
            });
            seg.points.push(p);
            seg.pixels.push((u, v));
        }
    }
    Ok(by_label.into_values().filter(|s| s.len() >= min_points).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskOverlap {
    pub segment: u16,
    pub mask: u16,
    /// Shared pixels divided by the segment's pixel count.
    pub overlap: f64,
}

/// Overlap of `segment` with every mask id it touches, by ascending mask id.
pub fn mask_overlaps(segment: &FrameSegment, masks: &Image<u16>) -> Vec<MaskOverlap> {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &(u, v) in &segment.pixels {
        if u < masks.width() && v < masks.height() {
            let m = *masks.get(u, v);
            if m != 0 {
                *counts.entry(m).or_default() += 1;
            }
        }
    }
    let n = segment.pixels.len().max(1) as f64;
    counts
        .into_iter()
        .map(|(mask, c)| MaskOverlap {
            segment: segment.label,
            mask,
            overlap: c as f64 / n,
        })
        .collect()
}

/// Assigns segments to detector instances whose mask covers at least
/// `tau_overlap` of them (highest overlap, then smallest mask id), merging all
/// segments of one instance. Unmatched segments pass through unchanged.
pub fn fuse_masks(segments: Vec<FrameSegment>, masks: &Image<u16>, tau_overlap: f64) -> Vec<FrameSegment> {
    let mut out: Vec<FrameSegment> = Vec::new();
    let mut merged: BTreeMap<u16, FrameSegment> = BTreeMap::new();
    for mut seg in segments {
        let best = mask_overlaps(&seg, masks)
            .into_iter()
            .filter(|o| o.overlap >= tau_overlap)
            .max_by(|a, b| a.overlap.total_cmp(&b.overlap).then(b.mask.cmp(&a.mask)));
        match best {
            Some(o) => {
                seg.instance = Some(o.mask);
                seg.is_semantic_object = true;
                match merged.get_mut(&o.mask) {
                    Some(existing) => existing.absorb(seg),
                    None => {
                        merged.insert(o.mask, seg);
                    }
                }
            }
            None => out.push(seg),
        }
    }
    out.extend(merged.into_values());
    out.sort_by_key(|s| s.label);
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    /// One merged segment per matched object, by ascending object id.
    pub segments: Vec<FrameSegment>,
    pub new_objects: Vec<ObjectId>,
}

/// Vote tally of one segment: counts per active object id plus novelty votes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoteTally {
    pub votes: BTreeMap<ObjectId, usize>,
    pub novel: usize,
}

impl VoteTally {
    pub fn total(&self) -> usize {
        self.novel + self.votes.values().sum::<usize>()
    }

    /// Object with the most votes, smallest id on ties.
    pub fn leader(&self) -> Option<(ObjectId, usize)> {
        self.votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(id, n)| (*id, *n))
    }
}

/// Each point votes for the active object of the voxel it falls in. Voxels with no
/// active layer, and voxels owned by the background, count as evidence of a new object.
pub fn tally_votes(map: &GlobalMap, segment: &FrameSegment) -> VoteTally {
    let params = map.params();
    let mut tally = VoteTally::default();
    for p in &segment.points {
        match map.voxel(&params.world_to_grid(p)).and_then(|v| v.active_id()) {
            Some(id) if !id.is_background() => *tally.votes.entry(id).or_default() += 1,
            _ => tally.novel += 1,
        }
    }
    tally
}

/// Matches segments to mapped objects by voxel voting, allocating new objects for
/// segments whose best share falls below `vote_fraction_min`, and merges segments
/// that land on the same object.
pub fn associate_segments(map: &mut GlobalMap, segments: Vec<FrameSegment>, vote_fraction_min: f64) -> Association {
    let tallies: Vec<VoteTally> = {
        let snapshot: &GlobalMap = map;
        segments.par_iter().map(|s| tally_votes(snapshot, s)).collect()
    };
    let mut by_object: BTreeMap<ObjectId, FrameSegment> = BTreeMap::new();
    let mut new_objects = Vec::new();
    for (mut seg, tally) in segments.into_iter().zip(tallies) {
        let total = tally.total().max(1) as f64;
        let id = match tally.leader() {
            Some((id, n)) if n as f64 / total >= vote_fraction_min => id,
            _ => {
                let id = map.allocate_object(seg.is_semantic_object);
                new_objects.push(id);
                id
            }
        };
        seg.matched_object = Some(id);
        match by_object.get_mut(&id) {
            Some(existing) => existing.absorb(seg),
            None => {
                by_object.insert(id, seg);
            }
        }
    }
    for (id, seg) in &by_object {
        if seg.is_semantic_object {
            if let Some(volume) = map.object_mut(*id) {
                volume.mark_semantic();
            }
        }
    }
    Association {
        segments: by_object.into_values().collect(),
        new_objects,
    }
}
