//! Region growing over range images.
//!
//! Two 4-adjacent occupied pixels join when their range difference is
//! within the vertical threshold (row neighbours) or the horizontal
//! threshold (column neighbours). Column 0 and the last column are
//! neighbours on a full 360 degree grid. Because the join predicate is
//! symmetric, seeded growth yields exactly the connected components of the
//! resulting graph.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Vec3;
use crate::math;
use crate::range::RangeImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(&'static str),
    #[error("segment {segment_id} does not belong to this image")]
    StaleSegment { segment_id: u32 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SegThresholds {
    /// Max range difference between row neighbours, meters.
    pub vertical_max_dr: f64,
    /// Max range difference between column neighbours, meters.
    pub horizontal_max_dr: f64,
    /// Components smaller than this are dropped.
    pub min_pixels: usize,
}

impl Default for SegThresholds {
    fn default() -> Self {
        Self { vertical_max_dr: 0.3, horizontal_max_dr: 0.3, min_pixels: 3 }
    }
}

impl SegThresholds {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(self.vertical_max_dr > 0.0 && self.horizontal_max_dr > 0.0) {
            return Err(SegmentError::InvalidThresholds("vertical_max_dr and horizontal_max_dr must be > 0"));
        }
        if self.min_pixels < 1 {
            return Err(SegmentError::InvalidThresholds("min_pixels must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    /// Index within its frame, in order of first pixel.
    pub segment_id: u32,
    pub frame_index: usize,
    /// `(row, col)` in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Source point index of every pixel, same order as `pixels`.
    pub point_indices: Vec<u32>,
    /// Number of points, `s_n`.
    pub point_count: usize,
    /// Mean of the member points, sensor frame.
    pub centroid: Vec3,
    /// Distance from the sensor to the centroid, `s_d`.
    pub center_distance: f64,
}

/// Clears every cell lower than `min_height` above ground. Used to strip
/// the ground before growing regions, since object bases otherwise connect
/// through ground returns.
pub fn mask_below_height(image: &RangeImage, min_height: f64) -> RangeImage {
    let mut out = image.clone();
    let cols = image.cols();
    let low: Vec<(usize, usize)> = image
        .occupied()
        .filter(|(_, _, c)| c.height < min_height)
        .map(|(r, c, _)| (r, c))
        .collect();
    for (r, c) in low {
        debug_assert!(c < cols);
        out.set(r, c, None);
    }
    out
}

/// 4-neighbours of a pixel with the threshold that applies to each edge.
fn neighbours(
    row: usize,
    col: usize,
    rows: usize,
    cols: usize,
    wraps: bool,
    th: &SegThresholds,
) -> impl Iterator<Item = (usize, usize, f64)> {
    let mut out: [Option<(usize, usize, f64)>; 4] = [None; 4];
    if row > 0 {
        out[0] = Some((row - 1, col, th.vertical_max_dr));
    }
    if row + 1 < rows {
        out[1] = Some((row + 1, col, th.vertical_max_dr));
    }
    if col > 0 {
        out[2] = Some((row, col - 1, th.horizontal_max_dr));
    } else if wraps && cols > 1 {
        out[2] = Some((row, cols - 1, th.horizontal_max_dr));
    }
    if col + 1 < cols {
        out[3] = Some((row, col + 1, th.horizontal_max_dr));
    } else if wraps && cols > 1 {
        out[3] = Some((row, 0, th.horizontal_max_dr));
    }
    out.into_iter().flatten()
}

/// Extracts segments. Output is sorted by each segment's first pixel in
/// row-major order and ids are assigned in that order.
pub fn region_grow(image: &RangeImage, th: &SegThresholds) -> Result<Vec<Segment>, SegmentError> {
    th.validate()?;
    let (rows, cols) = (image.rows(), image.cols());
    let wraps = image.grid.wraps();
    let mut visited = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    let mut segments = Vec::new();

    for seed_row in 0..rows {
        for seed_col in 0..cols {
            if visited[seed_row * cols + seed_col] || image.get(seed_row, seed_col).is_none() {
                continue;
            }
            visited[seed_row * cols + seed_col] = true;
            queue.push_back((seed_row, seed_col));
            let mut pixels = Vec::new();
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                let range = image.get(r, c).map(|cell| cell.range).unwrap_or_default();
                for (nr, nc, limit) in neighbours(r, c, rows, cols, wraps, th) {
                    let idx = nr * cols + nc;
                    if visited[idx] {
                        continue;
                    }
                    if let Some(n) = image.get(nr, nc) {
                        if math::abs(n.range - range) <= limit {
                            visited[idx] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            if pixels.len() < th.min_pixels {
                continue;
            }
            pixels.sort_unstable();
            segments.push(build_segment(image, segments.len() as u32, pixels));
        }
    }
    Ok(segments)
}

fn build_segment(image: &RangeImage, segment_id: u32, pixels: Vec<(usize, usize)>) -> Segment {
    let mut sum = Vec3::ZERO;
    let mut point_indices = Vec::with_capacity(pixels.len());
    for &(r, c) in &pixels {
        let cell = image.get(r, c).expect("segment pixel must be occupied");
        sum = sum + cell.position;
        point_indices.push(cell.point_index);
    }
    let centroid = sum * (1.0 / pixels.len() as f64);
    Segment {
        segment_id,
        frame_index: image.frame_index,
        point_count: pixels.len(),
        point_indices,
        pixels,
        centroid,
        center_distance: centroid.norm(),
    }
}

/// Sensor-frame points of a segment, one per pixel.
pub fn segment_points(image: &RangeImage, segment: &Segment) -> Result<Vec<Vec3>, SegmentError> {
    let stale = SegmentError::StaleSegment { segment_id: segment.segment_id };
    if segment.frame_index != image.frame_index {
        return Err(stale);
    }
    segment
        .pixels
        .iter()
        .zip(&segment.point_indices)
        .map(|(&(r, c), &pi)| match image.get(r, c) {
            Some(cell) if cell.point_index == pi => Ok(cell.position),
            _ => Err(stale.clone()),
        })
        .collect()
}
