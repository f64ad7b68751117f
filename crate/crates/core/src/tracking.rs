//! Inter-frame association, track building and must-link constraints.
//!
//! Segments of frame `t` are carried into the sensor frame of `t - 1`
//! with the two ego poses. The overlap of a current segment with a
//! previous one is the fraction of its points whose nearest previous
//! point lies within `match_radius`. Pairs above `min_overlap` are matched
//! greedily by descending overlap, one-to-one.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::class::ClassLabel;
use crate::geometry::{Pose, Vec3};
use crate::math;
use crate::range::{transform_to_frame, RangeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackingError {
    #[error("frame {frame_index} has no pose")]
    MissingPose { frame_index: usize },
    #[error("invalid association config: {0}")]
    InvalidConfig(&'static str),
    #[error("track {track_id} is not confirmed or truncated")]
    NotConfirmed { track_id: u32 },
    #[error("a constraint needs two distinct samples, got {0} twice")]
    SelfConstraint(u32),
    #[error("{expected} association lists expected for {frames} frames, got {got}")]
    AssociationCount { frames: usize, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] RangeError),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AssocConfig {
    /// Meters.
    pub match_radius: f64,
    /// Fraction in (0, 1].
    pub min_overlap: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self { match_radius: 0.3, min_overlap: 0.5 }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if !(self.match_radius > 0.0) {
            return Err(TrackingError::InvalidConfig("match_radius must be > 0"));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(TrackingError::InvalidConfig("min_overlap must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Points of one segment in its own frame's sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentCloud {
    pub segment_id: u32,
    pub points: Vec<Vec3>,
}

/// The segments of one frame together with the frame's ego pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingFrame {
    pub frame_index: usize,
    pub pose: Option<Pose>,
    pub segments: Vec<SegmentCloud>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Match {
    pub prev: u32,
    pub curr: u32,
    pub overlap: f64,
}

type VoxelKey = (i64, i64, i64);

/// Sorted voxel hash over a point set for fixed-radius queries.
struct VoxelIndex<'a> {
    cell: f64,
    keys: Vec<(VoxelKey, usize)>,
    points: &'a [Vec3],
}

impl<'a> VoxelIndex<'a> {
    fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut keys: Vec<(VoxelKey, usize)> =
            points.iter().enumerate().map(|(i, p)| (Self::key(*p, cell), i)).collect();
        keys.sort_unstable();
        Self { cell, keys, points }
    }

    fn key(p: Vec3, cell: f64) -> VoxelKey {
        (
            math::floor(p.x / cell) as i64,
            math::floor(p.y / cell) as i64,
            math::floor(p.z / cell) as i64,
        )
    }

    /// Whether any indexed point lies within `radius` (<= cell size) of `q`.
    fn any_within(&self, q: Vec3, radius: f64) -> bool {
        let (kx, ky, kz) = Self::key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let k = (kx + dx, ky + dy, kz + dz);
                    let start = self.keys.partition_point(|e| e.0 < k);
                    for &(key, i) in &self.keys[start..] {
                        if key != k {
                            break;
                        }
                        if (self.points[i] - q).norm_sq() <= r2 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn bounding_sphere(points: &[Vec3]) -> (Vec3, f64) {
    if points.is_empty() {
        return (Vec3::ZERO, 0.0);
    }
    let c = points.iter().fold(Vec3::ZERO, |a, p| a + *p) * (1.0 / points.len() as f64);
    let r = points.iter().map(|p| p.distance(c)).fold(0.0, f64::max);
    (c, r)
}

/// Directed coverage of `curr` by `prev`: the fraction of `curr` points
/// with a `prev` point within `radius`. Both sets in the same frame.
pub fn overlap(curr: &[Vec3], prev: &[Vec3], radius: f64) -> f64 {
    if curr.is_empty() {
        return 0.0;
    }
    let index = VoxelIndex::new(prev, radius);
    let hits = curr.iter().filter(|q| index.any_within(**q, radius)).count();
    hits as f64 / curr.len() as f64
}

/// Matches the segments of `curr` to those of `prev`.
pub fn associate(prev: &TrackingFrame, curr: &TrackingFrame, cfg: &AssocConfig) -> Result<Vec<Match>, TrackingError> {
    cfg.validate()?;
    let prev_pose = prev.pose.ok_or(TrackingError::MissingPose { frame_index: prev.frame_index })?;
    let curr_pose = curr.pose.ok_or(TrackingError::MissingPose { frame_index: curr.frame_index })?;

    let prev_spheres: Vec<(Vec3, f64)> = prev.segments.iter().map(|s| bounding_sphere(&s.points)).collect();
    let indices: Vec<VoxelIndex<'_>> =
        prev.segments.iter().map(|s| VoxelIndex::new(&s.points, cfg.match_radius)).collect();

    let mut candidates = Vec::new();
    for seg in &curr.segments {
        if seg.points.is_empty() {
            continue;
        }
        let moved = transform_to_frame(&seg.points, &curr_pose, &prev_pose)?;
        let (c, r) = bounding_sphere(&moved);
        for (k, prev_seg) in prev.segments.iter().enumerate() {
            let (pc, pr) = prev_spheres[k];
            if prev_seg.points.is_empty() || c.distance(pc) > r + pr + cfg.match_radius {
                continue;
            }
            let hits = moved.iter().filter(|q| indices[k].any_within(**q, cfg.match_radius)).count();
            let ov = hits as f64 / moved.len() as f64;
            if ov >= cfg.min_overlap {
                candidates.push(Match { prev: prev_seg.segment_id, curr: seg.segment_id, overlap: ov });
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.overlap
            .partial_cmp(&a.overlap)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.prev.cmp(&b.prev))
            .then(a.curr.cmp(&b.curr))
    });
    let mut used_prev = alloc::collections::BTreeSet::new();
    let mut used_curr = alloc::collections::BTreeSet::new();
    let mut matches = Vec::new();
    for m in candidates {
        if used_prev.contains(&m.prev) || used_curr.contains(&m.curr) {
            continue;
        }
        used_prev.insert(m.prev);
        used_curr.insert(m.curr);
        matches.push(m);
    }
    matches.sort_by_key(|m| (m.prev, m.curr));
    Ok(matches)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrackMember {
    pub frame_index: usize,
    pub segment_id: u32,
    /// Set when the segment produced a valid sample.
    pub sample_id: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "state", rename_all = "snake_case"))]
pub enum TrackStatus {
    Pending,
    /// Cut by the operator but not yet labelled; members from `at` on are
    /// excluded.
    Truncated { at: usize },
    Confirmed { label: ClassLabel, truncated_at: Option<usize> },
    Discarded,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Track {
    pub track_id: u32,
    pub members: Vec<TrackMember>,
    pub status: TrackStatus,
}

impl Track {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members still eligible for labelling and constraints.
    pub fn surviving(&self) -> &[TrackMember] {
        match self.status {
            TrackStatus::Discarded => &[],
            TrackStatus::Truncated { at } | TrackStatus::Confirmed { truncated_at: Some(at), .. } => {
                &self.members[..at.min(self.members.len())]
            }
            _ => &self.members,
        }
    }

    pub fn label(&self) -> Option<ClassLabel> {
        match self.status {
            TrackStatus::Confirmed { label, .. } => Some(label),
            _ => None,
        }
    }
}

/// Chains per-frame-pair matches into maximal tracks. `associations[k]`
/// matches `frames[k]` (prev) to `frames[k + 1]` (curr). Tracks are
/// numbered in order of their first member.
pub fn build_tracks(
    frames: &[(usize, Vec<u32>)],
    associations: &[Vec<Match>],
) -> Result<Vec<Track>, TrackingError> {
    let expected = frames.len().saturating_sub(1);
    if associations.len() != expected {
        return Err(TrackingError::AssociationCount { frames: frames.len(), expected, got: associations.len() });
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut open: BTreeMap<u32, usize> = BTreeMap::new();
    for (k, (frame_index, segment_ids)) in frames.iter().enumerate() {
        let links: BTreeMap<u32, u32> = match k.checked_sub(1) {
            Some(p) if frames[p].0 + 1 == *frame_index => {
                associations[p].iter().map(|m| (m.curr, m.prev)).collect()
            }
            _ => BTreeMap::new(),
        };
        let mut next_open = BTreeMap::new();
        for &sid in segment_ids {
            let member = TrackMember { frame_index: *frame_index, segment_id: sid, sample_id: None };
            let existing = links.get(&sid).and_then(|prev| open.get(prev)).copied();
            let slot = match existing {
                Some(t) => {
                    tracks[t].members.push(member);
                    t
                }
                None => {
                    tracks.push(Track { track_id: tracks.len() as u32, members: alloc::vec![member], status: TrackStatus::Pending });
                    tracks.len() - 1
                }
            };
            next_open.insert(sid, slot);
        }
        open = next_open;
    }
    Ok(tracks)
}

/// Fills member sample ids from a `(frame_index, segment_id) -> sample_id`
/// lookup.
pub fn attach_samples(tracks: &mut [Track], samples: &BTreeMap<(usize, u32), u32>) {
    for t in tracks {
        for m in &mut t.members {
            m.sample_id = samples.get(&(m.frame_index, m.segment_id)).copied();
        }
    }
}

/// Must-link pair of samples, stored with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Constraint {
    pub i: u32,
    pub j: u32,
    pub track_id: u32,
}

impl Constraint {
    pub fn new(a: u32, b: u32, track_id: u32) -> Result<Self, TrackingError> {
        if a == b {
            return Err(TrackingError::SelfConstraint(a));
        }
        Ok(Self { i: a.min(b), j: a.max(b), track_id })
    }
}

/// One constraint per adjacent pair of surviving members that both carry
/// a sample. Discarded and unknown-labelled tracks give none.
pub fn constraints_from_track(track: &Track) -> Result<Vec<Constraint>, TrackingError> {
    match track.status {
        TrackStatus::Pending => return Err(TrackingError::NotConfirmed { track_id: track.track_id }),
        TrackStatus::Discarded | TrackStatus::Confirmed { label: ClassLabel::Unknown, .. } => {
            return Ok(Vec::new())
        }
        _ => {}
    }
    track
        .surviving()
        .windows(2)
        .filter_map(|w| match (w[0].sample_id, w[1].sample_id) {
            (Some(a), Some(b)) => Some(Constraint::new(a, b, track.track_id)),
            _ => None,
        })
        .collect()
}
