//! End-to-end processing of a synthetic scene into classifier inputs,
//! tracks and constraints, plus a ground-truth operator for benchmarks.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::annotation::{AnnotationError, AnnotationStore};
use crate::class::ClassLabel;
use crate::classifier::{self, ArchConfig, ClassifierError};
use crate::geometry::Pose;
use crate::par;
use crate::range::{self, GridConfig, RangeError, RangeImage};
use crate::sample::{self, Sample, SampleConfig, SampleError};
use crate::scene::{self, PointFrame, SceneConfig, SceneError, SceneTruth, SensorConfig};
use crate::segmentation::{self, SegThresholds, Segment, SegmentError};
use crate::tracking::{self, AssocConfig, Match, SegmentCloud, Track, TrackingError, TrackingFrame};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Range(#[from] RangeError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StageConfig {
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub segmentation: SegThresholds,
    /// Returns lower than this above the ground plane are removed before
    /// region growing.
    pub ground_clearance: f64,
    pub sample: SampleConfig,
    pub association: AssocConfig,
    pub arch: ArchConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            grid: GridConfig::default(),
            segmentation: SegThresholds::default(),
            ground_clearance: 0.15,
            sample: SampleConfig::default(),
            association: AssocConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

/// Ground height in sensor coordinates for a frame of `truth`.
pub fn ground_z_in_sensor(truth: &SceneTruth, pose: &Pose) -> f64 {
    truth.ground_plane_z.map(|z| z - pose.position.z).unwrap_or(f64::NEG_INFINITY)
}

/// Projection and segmentation of one frame.
#[derive(Clone, Debug)]
pub struct FrameSegments {
    pub image: RangeImage,
    pub segments: Vec<Segment>,
}

pub fn segment_frame(frame: &PointFrame, ground_z: f64, cfg: &StageConfig) -> Result<FrameSegments, PipelineError> {
    let (image, _) = range::project(frame, &cfg.grid, ground_z)?;
    let image = if ground_z.is_finite() { segmentation::mask_below_height(&image, cfg.ground_clearance) } else { image };
    let segments = segmentation::region_grow(&image, &cfg.segmentation)?;
    Ok(FrameSegments { image, segments })
}

/// Most frequent object id among a segment's points (smallest id on ties).
pub fn majority_object(frame: &PointFrame, segment: &Segment) -> Option<u32> {
    let mut counts: BTreeMap<Option<u32>, usize> = BTreeMap::new();
    for &pi in &segment.point_indices {
        *counts.entry(frame.points[pi as usize].object_id).or_default() += 1;
    }
    let mut best: Option<(Option<u32>, usize)> = None;
    for (id, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((id, n));
        }
    }
    best.and_then(|(id, _)| id)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleInfo {
    pub sample_id: u32,
    pub frame_index: usize,
    pub segment_id: u32,
    pub point_count: usize,
    pub center_distance: f64,
    pub truth_object: Option<u32>,
    /// Unknown when the segment is clutter or belongs to no object.
    pub truth_class: ClassLabel,
}

#[derive(Clone, Debug)]
pub struct FrameSummary {
    pub frame_index: usize,
    pub pose: Pose,
    pub segment_count: usize,
    /// `(segment_id, sample_id)` of every segment that passed the gate.
    pub sampled: Vec<(u32, u32)>,
    /// Truth object of every segment, valid or not, by segment id.
    pub segment_objects: Vec<Option<u32>>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub frames: Vec<FrameSummary>,
    /// Indexed by sample id.
    pub samples: Vec<SampleInfo>,
    /// Pooled network inputs, indexed by sample id.
    pub inputs: Vec<Vec<f64>>,
    /// Full rasters, kept only on request.
    pub rasters: Vec<Sample>,
    /// `associations[k]` links `frames[k]` to `frames[k + 1]`.
    pub associations: Vec<Vec<Match>>,
    pub tracks: Vec<Track>,
}

struct FrameWork {
    summary: FrameSummary,
    clouds: Vec<SegmentCloud>,
    samples: Vec<(SampleInfo, Sample)>,
}

fn process_frame(truth: &SceneTruth, index: usize, cfg: &StageConfig) -> Result<FrameWork, PipelineError> {
    let frame = scene::simulate_frame(truth, index, &cfg.sensor)?;
    let ground_z = ground_z_in_sensor(truth, &frame.pose);
    let fs = segment_frame(&frame, ground_z, cfg)?;
    let mut clouds = Vec::new();
    let mut samples = Vec::new();
    let mut segment_objects = Vec::with_capacity(fs.segments.len());
    for seg in &fs.segments {
        let object = majority_object(&frame, seg);
        segment_objects.push(object);
        if !sample::is_valid(seg, &cfg.sample)? {
            continue;
        }
        let crop = sample::crop_cuboid(&frame, seg, &cfg.sample);
        let raster = sample::rasterize(0, &crop, seg, &fs.image, &cfg.sample)?;
        let class = object.and_then(|id| truth.class_of(id)).unwrap_or(ClassLabel::Unknown);
        let info = SampleInfo {
            sample_id: 0,
            frame_index: index,
            segment_id: seg.segment_id,
            point_count: seg.point_count,
            center_distance: seg.center_distance,
            truth_object: object,
            truth_class: class,
        };
        clouds.push(SegmentCloud { segment_id: seg.segment_id, points: segmentation::segment_points(&fs.image, seg)? });
        samples.push((info, raster));
    }
    let summary = FrameSummary {
        frame_index: index,
        pose: frame.pose,
        segment_count: fs.segments.len(),
        sampled: Vec::new(),
        segment_objects,
    };
    Ok(FrameWork { summary, clouds, samples })
}

/// Runs every stage over all frames of `truth`. Tracking only considers
/// segments that produced a sample.
pub fn build_dataset(truth: &SceneTruth, cfg: &StageConfig, keep_rasters: bool) -> Result<Dataset, PipelineError> {
    cfg.arch.validate()?;
    let indices: Vec<usize> = (0..truth.frame_count).collect();
    let work = par::map(&indices, |&i| process_frame(truth, i, cfg));

    let mut ds = Dataset::default();
    let mut tracking_frames = Vec::with_capacity(work.len());
    for w in work {
        let FrameWork { mut summary, clouds, samples } = w?;
        let raw: Vec<Sample> = samples
            .into_iter()
            .map(|(mut info, mut raster)| {
                let id = ds.samples.len() as u32;
                info.sample_id = id;
                raster.sample_id = id;
                summary.sampled.push((info.segment_id, id));
                ds.samples.push(info);
                raster
            })
            .collect();
        let inputs = par::map(&raw, |s| classifier::prepare_input(s, &cfg.arch));
        for x in inputs {
            ds.inputs.push(x?);
        }
        if keep_rasters {
            ds.rasters.extend(raw);
        }
        tracking_frames.push(TrackingFrame { frame_index: summary.frame_index, pose: Some(summary.pose), segments: clouds });
        ds.frames.push(summary);
    }

    let pairs: Vec<usize> = (1..tracking_frames.len()).collect();
    ds.associations = par::map(&pairs, |&k| tracking::associate(&tracking_frames[k - 1], &tracking_frames[k], &cfg.association))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let frame_lists: Vec<(usize, Vec<u32>)> =
        ds.frames.iter().map(|f| (f.frame_index, f.sampled.iter().map(|s| s.0).collect())).collect();
    let mut tracks = tracking::build_tracks(&frame_lists, &ds.associations)?;
    let lookup: BTreeMap<(usize, u32), u32> =
        ds.frames.iter().flat_map(|f| f.sampled.iter().map(move |&(seg, id)| ((f.frame_index, seg), id))).collect();
    tracking::attach_samples(&mut tracks, &lookup);
    ds.tracks = tracks;
    Ok(ds)
}

impl Dataset {
    pub fn truth_classes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.truth_class.index()).collect()
    }
}

/// Convenience: scene generation followed by [`build_dataset`].
pub fn synthesize(scene_cfg: &SceneConfig, cfg: &StageConfig, keep_rasters: bool) -> Result<(SceneTruth, Dataset), PipelineError> {
    let truth = scene::generate_scene(scene_cfg, &cfg.sensor)?;
    let ds = build_dataset(&truth, cfg, keep_rasters)?;
    Ok((truth, ds))
}

/// Decides every pending track from ground truth: cut at the first member
/// whose object differs from the first member's, discard tracks that start
/// on no object, label the rest with the object's class.
pub fn simulated_operator(store: &mut AnnotationStore, samples: &[SampleInfo], now: u64) -> Result<(), PipelineError> {
    let pending: Vec<Track> = store.tracks().filter(|t| t.status == tracking::TrackStatus::Pending).cloned().collect();
    for t in pending {
        let object_of = |m: &tracking::TrackMember| m.sample_id.and_then(|id| samples.get(id as usize)).and_then(|s| s.truth_object);
        let Some(first) = object_of(&t.members[0]) else {
            store.discard_track(t.track_id, now)?;
            continue;
        };
        if let Some(cut) = t.members.iter().position(|m| object_of(m) != Some(first)) {
            store.truncate_track(t.track_id, cut, now)?;
        }
        let class = samples[t.members[0].sample_id.unwrap_or(0) as usize].truth_class;
        store.apply_track_label(t.track_id, class, now)?;
    }
    Ok(())
}
