//! On-disk formats of every pipeline stage.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use semiseg_core::class::ClassLabel;
use semiseg_core::classifier::{ArchConfig, ClassifierParams};
use semiseg_core::evaluation::EvalReport;
use semiseg_core::geometry::{Pose, Vec3};
use semiseg_core::range::RangeImage;
use semiseg_core::sample::{Sample, CHANNELS};
use semiseg_core::scene::{LidarPoint, PointFrame};
use semiseg_core::segmentation::Segment;
use semiseg_core::training::LossReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = open(path)?;
    serde_json::from_reader(r).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one line and syncs it to disk.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(item).map_err(|e| Error::format(path, e.to_string()))?;
    line.push(b'\n');
    f.write_all(&line).and_then(|_| f.sync_data()).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = open(path)?;
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: n + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

/// `[x, y, z, intensity, object_id]`
pub type PointRow = (f64, f64, f64, f64, Option<u32>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub points: Vec<PointRow>,
}

impl From<&PointFrame> for FrameRecord {
    fn from(f: &PointFrame) -> Self {
        Self {
            frame_index: f.frame_index,
            timestamp: f.timestamp,
            pose: f.pose,
            points: f.points.iter().map(|p| (p.position.x, p.position.y, p.position.z, p.intensity, p.object_id)).collect(),
        }
    }
}

impl FrameRecord {
    pub fn into_frame(self, path: &Path) -> Result<PointFrame> {
        self.pose.validate().map_err(|e| Error::format(path, format!("frame {}: {e}", self.frame_index)))?;
        Ok(PointFrame {
            frame_index: self.frame_index,
            timestamp: self.timestamp,
            pose: self.pose,
            points: self
                .points
                .into_iter()
                .map(|(x, y, z, intensity, object_id)| LidarPoint { position: Vec3::new(x, y, z), intensity, object_id })
                .collect(),
        })
    }
}

pub fn write_frames(path: &Path, frames: &[PointFrame]) -> Result<()> {
    write_jsonl(path, frames.iter().map(FrameRecord::from))
}

pub fn read_frames(path: &Path) -> Result<Vec<PointFrame>> {
    read_jsonl::<FrameRecord>(path)?.into_iter().map(|r| r.into_frame(path)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: u32,
    pub frame_index: usize,
    pub pixels: Vec<(usize, usize)>,
    pub s_n: usize,
    pub centroid: Vec3,
    pub s_d: f64,
    pub point_indices: Vec<u32>,
}

impl From<&Segment> for SegmentRecord {
    fn from(s: &Segment) -> Self {
        Self {
            segment_id: s.segment_id,
            frame_index: s.frame_index,
            pixels: s.pixels.clone(),
            s_n: s.point_count,
            centroid: s.centroid,
            s_d: s.center_distance,
            point_indices: s.point_indices.clone(),
        }
    }
}

impl From<SegmentRecord> for Segment {
    fn from(r: SegmentRecord) -> Self {
        Segment {
            segment_id: r.segment_id,
            frame_index: r.frame_index,
            pixels: r.pixels,
            point_indices: r.point_indices,
            point_count: r.s_n,
            centroid: r.centroid,
            center_distance: r.s_d,
        }
    }
}

pub fn write_segments<'a>(path: &Path, segments: impl IntoIterator<Item = &'a Segment>) -> Result<()> {
    write_jsonl(path, segments.into_iter().map(SegmentRecord::from))
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>> {
    Ok(read_jsonl::<SegmentRecord>(path)?.into_iter().map(Segment::from).collect())
}

/// Bytes before the channel data in each sample record.
pub const SAMPLE_HEADER: usize = 13;
const NO_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: u32,
    pub segment_id: u32,
    pub frame_index: usize,
    pub offset: u64,
    pub label: Option<ClassLabel>,
    pub point_count: usize,
    pub center_distance: f64,
    /// Synthetic ground truth, absent for real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_object: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_class: Option<ClassLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    /// Binary file, relative to the index file's directory.
    pub data_file: PathBuf,
    pub canvas: usize,
    pub channels: usize,
    pub record_bytes: usize,
    pub samples: Vec<SampleEntry>,
}

pub fn record_bytes(canvas: usize) -> usize {
    SAMPLE_HEADER + CHANNELS * canvas * canvas
}

fn encode_sample(s: &Sample, out: &mut Vec<u8>) {
    out.extend_from_slice(&s.sample_id.to_le_bytes());
    out.extend_from_slice(&s.segment_id.to_le_bytes());
    out.extend_from_slice(&(s.frame_index as u32).to_le_bytes());
    out.push(s.label.map(|l| l.id()).unwrap_or(NO_LABEL));
    out.extend_from_slice(&s.channels);
}

fn decode_sample(buf: &[u8], canvas: usize, path: &Path) -> Result<Sample> {
    let u32_at = |k: usize| u32::from_le_bytes([buf[k], buf[k + 1], buf[k + 2], buf[k + 3]]);
    let label = match buf[12] {
        NO_LABEL => None,
        id => Some(ClassLabel::from_id(id).ok_or_else(|| Error::format(path, format!("bad label byte {id}")))?),
    };
    Ok(Sample {
        sample_id: u32_at(0),
        segment_id: u32_at(4),
        frame_index: u32_at(8) as usize,
        canvas,
        channels: buf[SAMPLE_HEADER..].to_vec(),
        label,
    })
}

/// Streams samples into a store: a JSON index at `index_path` and a
/// sibling `.bin` data file.
pub struct SampleStoreWriter {
    index_path: PathBuf,
    data_path: PathBuf,
    w: BufWriter<File>,
    canvas: usize,
    entries: Vec<SampleEntry>,
    buf: Vec<u8>,
}

impl SampleStoreWriter {
    pub fn create(index_path: &Path, canvas: usize) -> Result<Self> {
        let data_path = index_path.with_extension("bin");
        Ok(Self {
            index_path: index_path.to_path_buf(),
            w: create(&data_path)?,
            data_path,
            canvas,
            entries: Vec::new(),
            buf: Vec::with_capacity(record_bytes(canvas)),
        })
    }

    /// Appends a sample; the entry's offset is filled in. Ids must be
    /// strictly increasing.
    pub fn push(&mut self, s: &Sample, mut entry: SampleEntry) -> Result<()> {
        if s.canvas != self.canvas {
            return Err(Error::format(&self.data_path, format!("sample {} has canvas {}", s.sample_id, s.canvas)));
        }
        if self.entries.last().is_some_and(|e| e.sample_id >= s.sample_id) || entry.sample_id != s.sample_id {
            return Err(Error::format(&self.data_path, format!("sample id {} out of order", s.sample_id)));
        }
        self.buf.clear();
        encode_sample(s, &mut self.buf);
        self.w.write_all(&self.buf).map_err(|e| Error::io(&self.data_path, e))?;
        entry.offset = (self.entries.len() * record_bytes(self.canvas)) as u64;
        self.entries.push(entry);
        Ok(())
    }

    pub fn finish(mut self) -> Result<SampleIndex> {
        self.w.flush().map_err(|e| Error::io(&self.data_path, e))?;
        let index = SampleIndex {
            data_file: PathBuf::from(self.data_path.file_name().unwrap_or_default()),
            canvas: self.canvas,
            channels: CHANNELS,
            record_bytes: record_bytes(self.canvas),
            samples: self.entries,
        };
        write_json(&self.index_path, &index)?;
        Ok(index)
    }
}

/// Writes `samples` with their aligned `entries` in one go.
pub fn write_sample_store(index_path: &Path, samples: &[Sample], entries: Vec<SampleEntry>, canvas: usize) -> Result<SampleIndex> {
    let mut w = SampleStoreWriter::create(index_path, canvas)?;
    for (s, e) in samples.iter().zip(entries) {
        w.push(s, e)?;
    }
    w.finish()
}

/// Random access to a sample store.
#[derive(Debug)]
pub struct SampleStore {
    pub index: SampleIndex,
    data_path: PathBuf,
}

impl SampleStore {
    pub fn open(index_path: &Path) -> Result<Self> {
        let index: SampleIndex = read_json(index_path)?;
        if index.channels != CHANNELS || index.record_bytes != record_bytes(index.canvas) {
            return Err(Error::format(index_path, "unexpected record layout"));
        }
        let dir = index_path.parent().unwrap_or(Path::new("."));
        let data_path = dir.join(&index.data_file);
        let len = fs::metadata(&data_path).map_err(|e| Error::io(&data_path, e))?.len();
        if len != (index.samples.len() * index.record_bytes) as u64 {
            return Err(Error::format(&data_path, "data file length does not match the index"));
        }
        Ok(Self { index, data_path })
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    pub fn entry(&self, sample_id: u32) -> Option<&SampleEntry> {
        self.index.samples.get(self.position(sample_id)?)
    }

    fn position(&self, sample_id: u32) -> Option<usize> {
        self.index.samples.binary_search_by_key(&sample_id, |e| e.sample_id).ok()
    }

    pub fn read(&self, sample_id: u32) -> Result<Option<Sample>> {
        let Some(entry) = self.entry(sample_id) else { return Ok(None) };
        let mut f = File::open(&self.data_path).map_err(|e| Error::io(&self.data_path, e))?;
        f.seek(SeekFrom::Start(entry.offset)).map_err(|e| Error::io(&self.data_path, e))?;
        let mut buf = vec![0u8; self.index.record_bytes];
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.data_path, e))?;
        decode_sample(&buf, self.index.canvas, &self.data_path).map(Some)
    }

    /// Streams every sample in index order.
    pub fn for_each(&self, mut f: impl FnMut(Sample) -> Result<()>) -> Result<()> {
        let mut r = open(&self.data_path)?;
        let mut buf = vec![0u8; self.index.record_bytes];
        for _ in 0..self.len() {
            r.read_exact(&mut buf).map_err(|e| Error::io(&self.data_path, e))?;
            f(decode_sample(&buf, self.index.canvas, &self.data_path)?)?;
        }
        Ok(())
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"SSGP";
pub const PARAMS_VERSION: u32 = 1;

fn arch_fields(a: &ArchConfig) -> [u32; 8] {
    [a.input_channels, a.input_size, a.pool, a.conv1_filters, a.conv2_filters, a.kernel, a.stride, a.classes].map(|v| v as u32)
}

/// Magic, version, architecture, value count, little-endian values and a
/// trailing CRC-32 of everything before it.
pub fn encode_params(params: &ClassifierParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 8 * params.values.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for v in arch_fields(&params.arch) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ClassifierParams> {
    let checksum = || Error::Checksum { path: path.to_path_buf() };
    if bytes.len() < 4 {
        return Err(checksum());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]) {
        return Err(checksum());
    }
    let mut cur = body;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::format(path, "unexpected end of data"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != PARAMS_MAGIC {
        return Err(Error::format(path, "not a params file"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_of(take(4)?);
    if version != PARAMS_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: PARAMS_VERSION });
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = u32_of(take(4)?) as usize;
    }
    let arch = ArchConfig {
        input_channels: f[0],
        input_size: f[1],
        pool: f[2],
        conv1_filters: f[3],
        conv2_filters: f[4],
        kernel: f[5],
        stride: f[6],
        classes: f[7],
    };
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap_or_default()) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| Error::format(path, "bad value count"))?)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default())).collect();
    if !take(0)?.is_empty() || !cur.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(ClassifierParams::from_values(&arch, values)?)
}

pub fn write_params(path: &Path, params: &ClassifierParams) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_params(params)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ClassifierParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

pub fn loss_csv(history: &[LossReport]) -> String {
    let mut s = String::from("step,L_l,L_c,L,mode\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_l, r.l_c, r.total, r.mode));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// One row per classifier: per-class F-measure, then both macro averages.
pub fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("classifier");
    for c in ClassLabel::ALL {
        s.push(',');
        s.push_str(c.name());
    }
    s.push_str(",macro_f,macro_f_with_unknown\n");
    for (name, r) in rows {
        s.push_str(name);
        for c in &r.per_class {
            s.push_str(&format!(",{:.1}", c.f_measure));
        }
        s.push_str(&format!(",{:.1},{:.1}\n", r.macro_f, r.macro_f_with_unknown));
    }
    s
}

/// Binary greymap of the range channel, min-max normalized over occupied
/// cells; empty cells are black.
pub fn range_image_pgm(image: &RangeImage) -> Vec<u8> {
    let (lo, hi) = image
        .occupied()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, _, c)| (lo.min(c.range), hi.max(c.range)));
    let mut out = format!("P5\n{} {}\n255\n", image.cols(), image.rows()).into_bytes();
    let body = out.len();
    out.resize(body + image.rows() * image.cols(), 0);
    for (r, c, cell) in image.occupied() {
        let v = if hi > lo { semiseg_core::sample::range_byte(cell.range, lo, hi) } else { 0 };
        out[body + r * image.cols() + c] = v;
    }
    out
}
