//! Classifier samples: a segment as foreground plus the points of a cuboid
//! around it as background, rasterized into a three-channel canvas.
//!
//! Channels, in order: height above ground (0..6 m linear to 0..255,
//! clamped), range (per-sample min-max normalized), intensity (as is).
//! Linear maps round half up.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::class::ClassLabel;
use crate::geometry::Vec3;
use crate::math;
use crate::range::RangeImage;
use crate::scene::PointFrame;
use crate::segmentation::Segment;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("segment {segment_id} has zero centre distance")]
    DegenerateSegment { segment_id: u32 },
    #[error("cannot rasterize an empty crop")]
    EmptyCrop,
    #[error("invalid sample configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SampleConfig {
    /// Cuboid extent along z, meters.
    pub cuboid_height: f64,
    /// Cuboid extent along the sensor y axis, meters.
    pub cuboid_width: f64,
    /// Cuboid extent along the sensor x axis, meters.
    pub cuboid_length: f64,
    /// Canvas side in pixels.
    pub canvas: usize,
    /// Height mapped to 255.
    pub height_map_max: f64,
    /// Minimum points-per-meter ratio `s_n / s_d` (exclusive).
    pub rho: f64,
    /// Minimum point count (exclusive).
    pub sigma: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            cuboid_height: 2.4,
            cuboid_width: 5.0,
            cuboid_length: 5.0,
            canvas: 256,
            height_map_max: 6.0,
            rho: 30.0,
            sigma: 8.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let dims = [self.cuboid_height, self.cuboid_width, self.cuboid_length, self.height_map_max];
        if dims.iter().any(|d| !(*d > 0.0)) || self.canvas == 0 {
            return Err(SampleError::InvalidConfig("cuboid_height, cuboid_width, cuboid_length, canvas and height_map_max must be positive"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return Err(SampleError::InvalidConfig("rho and sigma must be positive"));
        }
        Ok(())
    }
}

/// Whether a segment carries enough points, for its distance, to become a
/// sample: `s_n / s_d > rho` and `s_n > sigma`.
pub fn is_valid(segment: &Segment, cfg: &SampleConfig) -> Result<bool, SampleError> {
    is_valid_counts(segment.point_count, segment.center_distance, cfg)
        .map_err(|_| SampleError::DegenerateSegment { segment_id: segment.segment_id })
}

/// [`is_valid`] on raw `(s_n, s_d)`.
pub fn is_valid_counts(point_count: usize, center_distance: f64, cfg: &SampleConfig) -> Result<bool, SampleError> {
    if !(center_distance > 0.0) {
        return Err(SampleError::DegenerateSegment { segment_id: u32::MAX });
    }
    let n = point_count as f64;
    Ok(n / center_distance > cfg.rho && n > cfg.sigma)
}

/// A frame point inside a sample's cuboid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPoint {
    pub point_index: u32,
    pub position: Vec3,
    pub intensity: f64,
    pub in_segment: bool,
}

/// All frame points inside the axis-aligned (sensor frame) cuboid centred
/// on the segment centroid. Bounds are inclusive.
pub fn crop_cuboid(frame: &PointFrame, segment: &Segment, cfg: &SampleConfig) -> Vec<CropPoint> {
    let members: BTreeSet<u32> = segment.point_indices.iter().copied().collect();
    let c = segment.centroid;
    let (hl, hw, hh) = (0.5 * cfg.cuboid_length, 0.5 * cfg.cuboid_width, 0.5 * cfg.cuboid_height);
    frame
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let d = p.position - c;
            math::abs(d.x) <= hl && math::abs(d.y) <= hw && math::abs(d.z) <= hh
        })
        .map(|(i, p)| CropPoint {
            point_index: i as u32,
            position: p.position,
            intensity: p.intensity,
            in_segment: members.contains(&(i as u32)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u32,
    pub segment_id: u32,
    pub frame_index: usize,
    pub canvas: usize,
    /// Channel-major `[height, range, intensity]`, each `canvas * canvas`.
    pub channels: Vec<u8>,
    pub label: Option<ClassLabel>,
}

impl Sample {
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.canvas * self.canvas;
        &self.channels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> u8 {
        self.channels[(c * self.canvas + row) * self.canvas + col]
    }
}

/// Height above ground mapped to a byte.
pub fn height_byte(height: f64, max: f64) -> u8 {
    let h = height.clamp(0.0, max);
    math::round_half_up(h / max * 255.0) as u8
}

/// Min-max normalized range byte; 0 for a degenerate span.
pub fn range_byte(range: f64, min: f64, max: f64) -> u8 {
    if !(max > min) {
        return 0;
    }
    math::round_half_up(((range - min) / (max - min)).clamp(0.0, 1.0) * 255.0) as u8
}

pub fn intensity_byte(intensity: f64) -> u8 {
    math::round_half_up(intensity.clamp(0.0, 255.0)) as u8
}

/// Rasterizes a crop. The crop points' range-image pixels form a window
/// that is copied onto the centre of the canvas; windows larger than the
/// canvas are shrunk by nearest-neighbour sampling with the aspect ratio
/// kept. Empty canvas cells are zero in every channel.
pub fn rasterize(
    sample_id: u32,
    crop: &[CropPoint],
    segment: &Segment,
    image: &RangeImage,
    cfg: &SampleConfig,
) -> Result<Sample, SampleError> {
    cfg.validate()?;
    let grid = &image.grid;
    let cols = grid.cols as i64;
    let reference_col = segment.pixels.first().map(|p| p.1 as i64).unwrap_or(0);

    // (row, unwrapped col, range, height, intensity)
    let mut placed: Vec<(i64, i64, f64, f64, f64)> = Vec::with_capacity(crop.len());
    for p in crop {
        let Some((row, col)) = grid.pixel_of(p.position) else { continue };
        let mut dc = col as i64 - reference_col;
        if grid.wraps() {
            dc = (dc + cols / 2).rem_euclid(cols) - cols / 2;
        }
        placed.push((row as i64, dc, p.position.norm(), p.position.z - image.ground_z, p.intensity));
    }
    if placed.is_empty() {
        return Err(SampleError::EmptyCrop);
    }

    let (mut r0, mut r1, mut c0, mut c1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    let (mut range_min, mut range_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(r, c, range, _, _) in &placed {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
        range_min = range_min.min(range);
        range_max = range_max.max(range);
    }
    let (h, w) = ((r1 - r0 + 1) as usize, (c1 - c0 + 1) as usize);

    // Nearest point wins a window cell.
    let mut window: Vec<Option<(f64, [u8; 3])>> = vec![None; h * w];
    for &(r, c, range, height, intensity) in &placed {
        let idx = (r - r0) as usize * w + (c - c0) as usize;
        let px = [
            height_byte(height, cfg.height_map_max),
            range_byte(range, range_min, range_max),
            intensity_byte(intensity),
        ];
        match window[idx] {
            Some((existing, _)) if existing <= range => {}
            _ => window[idx] = Some((range, px)),
        }
    }

    let size = cfg.canvas;
    let scale = (size as f64 / h.max(w) as f64).min(1.0);
    let out_h = (math::round_half_up(h as f64 * scale) as usize).clamp(1, size);
    let out_w = (math::round_half_up(w as f64 * scale) as usize).clamp(1, size);
    let (off_r, off_c) = ((size - out_h) / 2, (size - out_w) / 2);
    let plane = size * size;
    let mut channels = vec![0u8; CHANNELS * plane];
    for u in 0..out_h {
        let src_r = (((u as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for v in 0..out_w {
            let src_c = (((v as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            if let Some((_, px)) = window[src_r * w + src_c] {
                let at = (off_r + u) * size + off_c + v;
                for (ch, value) in px.iter().enumerate() {
                    channels[ch * plane + at] = *value;
                }
            }
        }
    }

    Ok(Sample {
        sample_id,
        segment_id: segment.segment_id,
        frame_index: segment.frame_index,
        canvas: size,
        channels,
        label: None,
    })
}
