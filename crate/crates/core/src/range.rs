//! Polar range images and ego-motion compensation.
//!
//! Rows tessellate elevation from the top of the vertical field of view
//! downwards; columns tessellate azimuth counter-clockwise from +x, with
//! column `c` centred on azimuth `c * width`. Points bin by angle, not by
//! scan-line id, so the grid height is independent of the sensor's line
//! count.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{InvalidRotation, Pose, Vec3};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RangeError {
    #[error("cell ({row}, {col}) outside a {rows}x{cols} grid")]
    OutOfGrid { row: usize, col: usize, rows: usize, cols: usize },
    #[error("range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error(transparent)]
    Rotation(#[from] InvalidRotation),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub vertical_fov_min_deg: f64,
    pub vertical_fov_max_deg: f64,
    pub azimuth_span_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 144,
            cols: 1080,
            vertical_fov_min_deg: -30.67,
            vertical_fov_max_deg: 10.67,
            azimuth_span_deg: 360.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), RangeError> {
        if self.rows < 1 || self.cols < 1 {
            return Err(RangeError::InvalidGrid("rows and cols must be >= 1"));
        }
        if !(self.vertical_fov_min_deg < self.vertical_fov_max_deg) {
            return Err(RangeError::InvalidGrid("vertical_fov_min_deg must be below vertical_fov_max_deg"));
        }
        if !(self.azimuth_span_deg > 0.0 && self.azimuth_span_deg <= 360.0) {
            return Err(RangeError::InvalidGrid("azimuth_span_deg must be in (0, 360]"));
        }
        Ok(())
    }

    /// Elevation bin height, radians.
    pub fn row_width(&self) -> f64 {
        ((self.vertical_fov_max_deg - self.vertical_fov_min_deg) / self.rows as f64).to_radians()
    }

    /// Azimuth bin width, radians.
    pub fn col_width(&self) -> f64 {
        (self.azimuth_span_deg / self.cols as f64).to_radians()
    }

    pub fn max_bin_width(&self) -> f64 {
        self.row_width().max(self.col_width())
    }

    /// Whether column 0 and the last column are neighbours.
    pub fn wraps(&self) -> bool {
        self.azimuth_span_deg >= 360.0
    }

    /// Elevation and azimuth (radians) at the centre of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let el = self.vertical_fov_max_deg.to_radians() - (row as f64 + 0.5) * self.row_width();
        let az = col as f64 * self.col_width();
        (el, az)
    }

    /// Cell a sensor-frame point bins into, or `None` when it falls outside
    /// the grid or sits at the origin.
    pub fn pixel_of(&self, p: Vec3) -> Option<(usize, usize)> {
        let horizontal = p.horizontal_norm();
        if horizontal == 0.0 && p.z == 0.0 {
            return None;
        }
        let el = math::atan2(p.z, horizontal).to_degrees();
        let (lo, hi) = (self.vertical_fov_min_deg, self.vertical_fov_max_deg);
        if !(el >= lo && el <= hi) {
            return None;
        }
        let row_w = (hi - lo) / self.rows as f64;
        let row = (math::floor((hi - el) / row_w) as usize).min(self.rows - 1);

        let col_w = self.azimuth_span_deg / self.cols as f64;
        let mut az = math::atan2(p.y, p.x).to_degrees();
        if az < -0.5 * col_w {
            az += 360.0;
        }
        let col = math::floor(az / col_w + 0.5);
        let col = if self.wraps() {
            (col as i64).rem_euclid(self.cols as i64) as usize
        } else if col >= 0.0 && (col as usize) < self.cols {
            col as usize
        } else {
            return None;
        };
        Some((row, col))
    }
}

/// One occupied range-image cell.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Cell {
    pub range: f64,
    /// Meters above the configured ground height.
    pub height: f64,
    pub intensity: f64,
    /// Index of the source point in its `PointFrame`.
    pub point_index: u32,
    /// Source point, sensor frame.
    pub position: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub grid: GridConfig,
    pub frame_index: usize,
    /// Ground height (sensor frame) the cell heights are measured from.
    pub ground_z: f64,
    cells: Vec<Option<Cell>>,
}

impl RangeImage {
    pub fn empty(grid: GridConfig, frame_index: usize) -> Self {
        let n = grid.rows * grid.cols;
        Self { grid, frame_index, ground_z: 0.0, cells: vec![None; n] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<&Cell> {
        if row >= self.grid.rows || col >= self.grid.cols {
            return None;
        }
        self.cells[row * self.grid.cols + col].as_ref()
    }

    pub fn set(&mut self, row: usize, col: usize, cell: Option<Cell>) {
        assert!(row < self.grid.rows && col < self.grid.cols, "cell outside grid");
        self.cells[row * self.grid.cols + col] = cell;
    }

    /// Occupied cells in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, &Cell)> + '_ {
        let cols = self.grid.cols;
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|c| (i / cols, i % cols, c)))
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Bookkeeping from a projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Points outside the grid's field of view (or at the origin).
    pub dropped: usize,
    /// Points that lost their cell to a nearer point.
    pub collisions: usize,
}

/// Bins every point of a frame into a range image. When two points share
/// a cell the nearer one is kept.
pub fn project_points(
    points: &[crate::scene::LidarPoint],
    frame_index: usize,
    grid: &GridConfig,
    ground_z: f64,
) -> Result<(RangeImage, ProjectionStats), RangeError> {
    grid.validate()?;
    let mut image = RangeImage::empty(grid.clone(), frame_index);
    image.ground_z = ground_z;
    let mut stats = ProjectionStats::default();
    for (i, p) in points.iter().enumerate() {
        let Some((row, col)) = grid.pixel_of(p.position) else {
            stats.dropped += 1;
            continue;
        };
        let range = p.position.norm();
        let cell = Cell {
            range,
            height: p.position.z - ground_z,
            intensity: p.intensity,
            point_index: i as u32,
            position: p.position,
        };
        let slot = &mut image.cells[row * grid.cols + col];
        match slot {
            Some(existing) => {
                stats.collisions += 1;
                if range < existing.range {
                    *existing = cell;
                }
            }
            None => *slot = Some(cell),
        }
    }
    Ok((image, stats))
}

/// Projects a whole frame; see [`project_points`].
pub fn project(
    frame: &crate::scene::PointFrame,
    grid: &GridConfig,
    ground_z: f64,
) -> Result<(RangeImage, ProjectionStats), RangeError> {
    project_points(&frame.points, frame.frame_index, grid, ground_z)
}

/// Point at the centre angles of a cell at the given range.
pub fn back_project(grid: &GridConfig, row: usize, col: usize, range: f64) -> Result<Vec3, RangeError> {
    if row >= grid.rows || col >= grid.cols {
        return Err(RangeError::OutOfGrid { row, col, rows: grid.rows, cols: grid.cols });
    }
    if !(range > 0.0) {
        return Err(RangeError::NonPositiveRange(range));
    }
    let (el, az) = grid.cell_center(row, col);
    let ce = math::cos(el);
    Ok(Vec3::new(range * ce * math::cos(az), range * ce * math::sin(az), range * math::sin(el)))
}

/// Re-expresses sensor-frame points of `src` in the sensor frame of `dst`:
/// `p_dst = R_dst^T (R_src p + t_src - t_dst)`.
pub fn transform_to_frame(points: &[Vec3], src: &Pose, dst: &Pose) -> Result<Vec<Vec3>, RangeError> {
    src.validate()?;
    dst.validate()?;
    Ok(points.iter().map(|&p| dst.to_sensor(src.to_world(p))).collect())
}
