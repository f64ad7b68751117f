//! Independent reference implementations shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg_core::annotation::AnnotationStore;
use semiseg_core::class::ClassLabel;
use semiseg_core::classifier::{ArchConfig, ClassifierParams};
use semiseg_core::geometry::{Mat3, Pose, Vec3};
use semiseg_core::pipeline::{Dataset, StageConfig};
use semiseg_core::range::{self, Cell, GridConfig, RangeImage};
use semiseg_core::scene::{ObjectCounts, SceneConfig, SceneTruth, SensorConfig};
use semiseg_core::segmentation::SegThresholds;
use semiseg_core::training::{self, BatchItem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- images

pub fn grid(rows: usize, cols: usize, azimuth_span_deg: f64) -> GridConfig {
    GridConfig { rows, cols, azimuth_span_deg, ..GridConfig::default() }
}

/// Sparse image whose ranges come from a coarse lattice, so neighbour
/// differences often land on, under and over the thresholds.
pub fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize, wraps: bool) -> RangeImage {
    let g = grid(rows, cols, if wraps { 360.0 } else { 180.0 });
    let mut img = RangeImage::empty(g, 0);
    let fill: f64 = rng.gen_range(0.3..0.95);
    let step = [0.1, 0.15, 0.3][rng.gen_range(0..3)];
    let mut index = 0u32;
    for r in 0..rows {
        for c in 0..cols {
            if rng.gen_bool(fill) {
                let range = 2.0 + step * rng.gen_range(0..6) as f64;
                img.set(r, c, Some(Cell { range, height: 1.0, intensity: 0.0, point_index: index, position: Vec3::new(range, 0.0, 0.0) }));
                index += 1;
            }
        }
    }
    img
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components by brute force over every edge of the grid graph.
pub fn union_find_partition(img: &RangeImage, th: &SegThresholds) -> BTreeSet<Vec<(usize, usize)>> {
    let (rows, cols) = (img.rows(), img.cols());
    let mut uf = UnionFind((0..rows * cols).collect());
    let joins = |a: Option<&Cell>, b: Option<&Cell>, limit: f64| match (a, b) {
        (Some(a), Some(b)) => (a.range - b.range).abs() <= limit,
        _ => false,
    };
    for r in 0..rows {
        for c in 0..cols {
            if r + 1 < rows && joins(img.get(r, c), img.get(r + 1, c), th.vertical_max_dr) {
                uf.union(r * cols + c, (r + 1) * cols + c);
            }
            let right = if c + 1 < cols {
                Some(c + 1)
            } else if img.grid.wraps() && cols > 1 {
                Some(0)
            } else {
                None
            };
            if let Some(n) = right {
                if joins(img.get(r, c), img.get(r, n), th.horizontal_max_dr) {
                    uf.union(r * cols + c, r * cols + n);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (r, c, _) in img.occupied() {
        groups.entry(uf.find(r * cols + c)).or_default().push((r, c));
    }
    groups
        .into_values()
        .filter(|g| g.len() >= th.min_pixels)
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

// -------------------------------------------------------------- geometry

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    // Normalised random quaternion.
    let q: [f64; 4] = loop {
        let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    Mat3([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ])
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let t = Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-5.0..5.0));
    Pose::new(t, random_rotation(rng).0).expect("quaternion rotation is orthonormal")
}

/// A point strictly inside the vertical field of view of `g`.
pub fn random_visible_point(rng: &mut ChaCha8Rng, g: &GridConfig) -> Vec3 {
    let el = rng.gen_range(g.vertical_fov_min_deg..g.vertical_fov_max_deg).to_radians();
    let az = rng.gen_range(-180.0f64..180.0).to_radians();
    let r = rng.gen_range(0.5..80.0);
    Vec3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin())
}

/// Largest ratio of round-trip error to `range * max_bin_width` over `n`
/// random points.
pub fn worst_round_trip(seed: u64, n: usize, g: &GridConfig) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let p = random_visible_point(&mut rng, g);
        let (row, col) = g.pixel_of(p).expect("visible point must bin");
        let q = range::back_project(g, row, col, p.norm()).unwrap();
        worst = worst.max(p.distance(q) / (p.norm() * g.max_bin_width()));
    }
    worst
}

// ------------------------------------------------------------- gradients

pub fn tiny_arch() -> ArchConfig {
    ArchConfig { input_size: 7, pool: 1, conv1_filters: 2, conv2_filters: 3, classes: 4, ..ArchConfig::default() }
}

pub fn random_inputs(rng: &mut ChaCha8Rng, count: usize, arch: &ArchConfig) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..arch.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Supervised,
    Semi,
    Unsupervised,
}

pub const GRAD_MODES: [GradMode; 3] = [GradMode::Supervised, GradMode::Semi, GradMode::Unsupervised];

/// Random tiny network, inputs and batch for one gradient draw.
pub fn gradient_draw(seed: u64, mode: GradMode) -> (ClassifierParams, Vec<Vec<f64>>, Vec<BatchItem>, f64) {
    let arch = tiny_arch();
    let mut rng = rng(seed);
    let mut params = ClassifierParams::init(seed, &arch).unwrap();
    // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
    let l = params.layout();
    for range in [l.b1..l.w2, l.b2..l.w3, l.b3..l.len] {
        for v in &mut params.values[range] {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    let inputs = random_inputs(&mut rng, 6, &arch);
    let mut items = Vec::new();
    if mode != GradMode::Unsupervised {
        for i in 0..3 {
            items.push(BatchItem::labeled(i, rng.gen_range(0..arch.classes)));
        }
    }
    if mode != GradMode::Supervised {
        for _ in 0..4 {
            let i = rng.gen_range(0..6);
            let j = (i + rng.gen_range(1..6)) % 6;
            items.push(BatchItem::constraint(i, j));
        }
    }
    let weight = match mode {
        GradMode::Unsupervised => 1.0,
        _ => rng.gen_range(0.2..1.0),
    };
    (params, inputs, items, weight)
}

/// Central differences of the step loss for every parameter.
pub fn numeric_gradient(params: &ClassifierParams, inputs: &[Vec<f64>], items: &[BatchItem], weight: f64, eps: f64) -> Vec<f64> {
    let loss = |p: &ClassifierParams| training::step_objective(p, inputs, items, weight).unwrap().0.total;
    let mut p = params.clone();
    (0..params.values.len())
        .map(|k| {
            let v = params.values[k];
            p.values[k] = v + eps;
            let up = loss(&p);
            p.values[k] = v - eps;
            let down = loss(&p);
            p.values[k] = v;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn gradient_error(seed: u64, mode: GradMode) -> f64 {
    let (params, inputs, items, weight) = gradient_draw(seed, mode);
    let (_, analytic) = training::step_objective(&params, &inputs, &items, weight).unwrap();
    let numeric = numeric_gradient(&params, &inputs, &items, weight, 1e-4);
    relative_error(&analytic, &numeric)
}

// -------------------------------------------------------------- tracking

/// Noise-free drive with a moving sensor and both static and moving
/// objects, sized to run quickly.
pub fn tracking_scene(seed: u64, frames: usize) -> (SceneConfig, StageConfig) {
    let scene = SceneConfig {
        seed,
        extent: 40.0,
        frame_count: frames,
        ego_speed: 4.0,
        roadside_band: 8.0,
        object_counts: ObjectCounts { person: 5, car: 2, cyclist: 2, trunk: 4, bush: 4, building: 2 },
        clutter_count: 3,
        ..SceneConfig::default()
    };
    let sensor = SensorConfig { scan_lines: 64, points_per_line: 720, range_noise_sigma: 0.0, ..SensorConfig::default() };
    let stage = StageConfig { grid: GridConfig { rows: 64, cols: 720, ..GridConfig::default() }, sensor, ..StageConfig::default() };
    (scene, stage)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Soundness {
    /// Same-object sampled segment pairs in consecutive frames.
    pub pairs: usize,
    /// Of those, how many the associator linked.
    pub linked: usize,
    /// Pairs on objects with nonzero velocity.
    pub moving_pairs: usize,
    pub constraints: usize,
    /// Constraints whose two samples share a true object.
    pub pure: usize,
}

impl Soundness {
    pub fn association_rate(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.linked as f64 / self.pairs as f64
        }
    }
}

/// Checks associations against truth, then confirms every raw track as it
/// stands and checks the constraints it emits.
pub fn tracking_soundness(truth: &SceneTruth, ds: &Dataset) -> Soundness {
    let mut s = Soundness::default();
    for (k, matches) in ds.associations.iter().enumerate() {
        let (prev, curr) = (&ds.frames[k], &ds.frames[k + 1]);
        let linked: BTreeSet<(u32, u32)> = matches.iter().map(|m| (m.prev, m.curr)).collect();
        for &(ps, _) in &prev.sampled {
            let Some(po) = prev.segment_objects[ps as usize] else { continue };
            for &(cs, _) in &curr.sampled {
                if curr.segment_objects[cs as usize] == Some(po) {
                    s.pairs += 1;
                    s.moving_pairs += truth.object(po).is_some_and(|o| o.velocity.norm() > 0.0) as usize;
                    s.linked += linked.contains(&(ps, cs)) as usize;
                }
            }
        }
    }
    let mut store = AnnotationStore::new(ds.tracks.clone());
    for t in &ds.tracks {
        if t.members.iter().filter(|m| m.sample_id.is_some()).count() > 1 {
            store.apply_track_label(t.track_id, ClassLabel::Car, 0).unwrap();
        }
    }
    for c in store.constraints() {
        s.constraints += 1;
        let (a, b) = (&ds.samples[c.i as usize], &ds.samples[c.j as usize]);
        s.pure += (a.truth_object.is_some() && a.truth_object == b.truth_object) as usize;
    }
    s
}
