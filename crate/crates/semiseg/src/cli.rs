//! Command-line driver. Every stage reads the previous stage's files and
//! writes its own; all paths come from the configuration document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semiseg_core::annotation::{AnnotationRecord, AnnotationSource, AnnotationStore};
use semiseg_core::classifier::{self, ClassifierParams};
use semiseg_core::evaluation::{self, EvalReport};
use semiseg_core::pipeline::{self, PipelineError, SampleInfo};
use semiseg_core::range;
use semiseg_core::sample;
use semiseg_core::scene::{self, PointFrame, SceneTruth};
use semiseg_core::segmentation::{self, Segment};
use semiseg_core::tracking::{self, Constraint, SegmentCloud, Track, TrackingFrame};
use semiseg_core::training::{self, TrainData, TrainError, TrainMode, Validation};
use semiseg_core::ClassLabel;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats::{self, SampleEntry, SampleStore, SampleStoreWriter};
use crate::service::{self, Persistence, Service};

#[derive(Debug, Parser)]
#[command(name = "semiseg", version, about = "Semi-supervised LiDAR segment classification pipeline")]
pub struct Cli {
    /// JSON configuration document; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the scene and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `paths.work_dir`.
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and its point-cloud frames.
    Synth,
    /// Project frames into range images (greymap dumps and statistics).
    Project,
    /// Region-grow every frame into segments.
    Segment,
    /// Rasterize valid segments into the sample store.
    Samples,
    /// Associate sampled segments across frames into tracks.
    Track,
    /// Emit must-link constraints from decided tracks.
    Constraints {
        /// Decide every pending track from ground truth first.
        #[arg(long)]
        simulate_operator: bool,
    },
    /// Train the classifier.
    Train(TrainArgs),
    /// Score one or more parameter files.
    Eval(EvalArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelSource {
    /// Operator annotations (anchors only in fine_tune mode).
    Annotations,
    /// Ground truth stored with the samples.
    Truth,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// supervised | semi | unsupervised | fine_tune
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long, value_enum, default_value = "annotations")]
    pub labels: LabelSource,
    /// Keep at most this many labels per class.
    #[arg(long)]
    pub labels_per_class: Option<usize>,
    /// Starting parameters (required for unsupervised and fine_tune).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Sample store with ground truth used to pick the best checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Output parameter file; defaults to `paths.params`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Parameter files to score; defaults to `paths.params`.
    #[arg(long = "params")]
    pub params: Vec<PathBuf>,
    /// Sample store to score on; defaults to `paths.samples`.
    #[arg(long)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Parameters used to propose anchors; `paths.params` when it exists.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps failures to a JSON line on
/// stderr. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return 2;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg = cfg.with_seed(cli.seed);
    if let Some(w) = &cli.work_dir {
        cfg.paths.work_dir = w.clone();
    }
    Ok(cfg)
}

/// Runs one command and returns its JSON summary.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cfg.paths.work_dir).map_err(|e| Error::io(&cfg.paths.work_dir, e))?;
    match &cli.command {
        Command::Synth => synth(&cfg),
        Command::Project => project(&cfg),
        Command::Segment => segment(&cfg),
        Command::Samples => samples(&cfg),
        Command::Track => track(&cfg),
        Command::Constraints { simulate_operator } => constraints(&cfg, *simulate_operator),
        Command::Train(a) => train(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Serve(a) => serve(&cfg, a),
    }
}

fn p(cfg: &PipelineConfig, f: impl Fn(&crate::config::Paths) -> &Path) -> PathBuf {
    cfg.path(f(&cfg.paths))
}

fn pipeline_err(e: impl Into<PipelineError>) -> Error {
    Error::Pipeline(e.into())
}

pub fn synth(cfg: &PipelineConfig) -> Result<Value> {
    let truth = scene::generate_scene(&cfg.scene, &cfg.sensor).map_err(pipeline_err)?;
    let frames_path = p(cfg, |p| &p.frames);
    let mut w = formats::create(&frames_path)?;
    let mut points = 0;
    for k in 0..truth.frame_count {
        let frame = scene::simulate_frame(&truth, k, &cfg.sensor).map_err(pipeline_err)?;
        points += frame.points.len();
        serde_json::to_writer(&mut w, &formats::FrameRecord::from(&frame))
            .map_err(|e| Error::format(&frames_path, e.to_string()))?;
        std::io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(&frames_path, e))?;
    }
    std::io::Write::flush(&mut w).map_err(|e| Error::io(&frames_path, e))?;
    formats::write_json(&p(cfg, |p| &p.truth), &truth)?;
    Ok(json!({ "command": "synth", "frames": truth.frame_count, "objects": truth.objects.len(), "points": points }))
}

fn read_truth(cfg: &PipelineConfig) -> Result<Option<SceneTruth>> {
    let path = p(cfg, |p| &p.truth);
    if path.exists() {
        formats::read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn ground_z(cfg: &PipelineConfig, truth: Option<&SceneTruth>, frame: &PointFrame) -> f64 {
    match truth {
        Some(t) => pipeline::ground_z_in_sensor(t, &frame.pose),
        None => cfg.ground_world_z() - frame.pose.position.z,
    }
}

fn read_frames(cfg: &PipelineConfig) -> Result<Vec<PointFrame>> {
    formats::read_frames(&p(cfg, |p| &p.frames))
}

pub fn project(cfg: &PipelineConfig) -> Result<Value> {
    let truth = read_truth(cfg)?;
    let dir = p(cfg, |p| &p.range_images);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stats = Vec::new();
    for frame in read_frames(cfg)? {
        let (image, s) = range::project(&frame, &cfg.grid, ground_z(cfg, truth.as_ref(), &frame)).map_err(pipeline_err)?;
        let path = dir.join(format!("frame_{:05}.pgm", frame.frame_index));
        std::fs::write(&path, formats::range_image_pgm(&image)).map_err(|e| Error::io(&path, e))?;
        stats.push(json!({
            "frame_index": frame.frame_index,
            "points": frame.points.len(),
            "occupied": image.occupied_count(),
            "dropped": s.dropped,
            "collisions": s.collisions,
        }));
    }
    let n = stats.len();
    formats::write_jsonl(&dir.join("stats.jsonl"), &stats)?;
    Ok(json!({ "command": "project", "frames": n }))
}

pub fn segment(cfg: &PipelineConfig) -> Result<Value> {
    let truth = read_truth(cfg)?;
    let stage = cfg.stage();
    let mut all: Vec<Segment> = Vec::new();
    let frames = read_frames(cfg)?;
    for frame in &frames {
        let fs = pipeline::segment_frame(frame, ground_z(cfg, truth.as_ref(), frame), &stage)?;
        all.extend(fs.segments);
    }
    formats::write_segments(&p(cfg, |p| &p.segments), &all)?;
    Ok(json!({ "command": "segment", "frames": frames.len(), "segments": all.len() }))
}

fn segments_by_frame(cfg: &PipelineConfig) -> Result<BTreeMap<usize, Vec<Segment>>> {
    let mut by: BTreeMap<usize, Vec<Segment>> = BTreeMap::new();
    for s in formats::read_segments(&p(cfg, |p| &p.segments))? {
        by.entry(s.frame_index).or_default().push(s);
    }
    Ok(by)
}

pub fn samples(cfg: &PipelineConfig) -> Result<Value> {
    let truth = read_truth(cfg)?;
    let stage = cfg.stage();
    let segments = segments_by_frame(cfg)?;
    let mut w = SampleStoreWriter::create(&p(cfg, |p| &p.samples), cfg.sample.canvas)?;
    let mut next_id = 0u32;
    for frame in read_frames(cfg)? {
        let Some(segs) = segments.get(&frame.frame_index) else { continue };
        let image = pipeline::segment_frame(&frame, ground_z(cfg, truth.as_ref(), &frame), &stage)?.image;
        for seg in segs {
            if !sample::is_valid(seg, &cfg.sample).map_err(pipeline_err)? {
                continue;
            }
            let crop = sample::crop_cuboid(&frame, seg, &cfg.sample);
            let raster = sample::rasterize(next_id, &crop, seg, &image, &cfg.sample).map_err(pipeline_err)?;
            let truth_object = truth.as_ref().and_then(|_| pipeline::majority_object(&frame, seg));
            let truth_class = truth
                .as_ref()
                .map(|t| truth_object.and_then(|id| t.class_of(id)).unwrap_or(ClassLabel::Unknown));
            let entry = SampleEntry {
                sample_id: next_id,
                segment_id: seg.segment_id,
                frame_index: frame.frame_index,
                offset: 0,
                label: None,
                point_count: seg.point_count,
                center_distance: seg.center_distance,
                truth_object,
                truth_class,
            };
            w.push(&raster, entry)?;
            next_id += 1;
        }
    }
    let index = w.finish()?;
    Ok(json!({ "command": "samples", "samples": index.samples.len() }))
}

pub fn track(cfg: &PipelineConfig) -> Result<Value> {
    let truth = read_truth(cfg)?;
    let stage = cfg.stage();
    let segments = segments_by_frame(cfg)?;
    let store = SampleStore::open(&p(cfg, |p| &p.samples))?;
    let mut sampled: BTreeMap<usize, Vec<(u32, u32)>> = BTreeMap::new();
    for e in &store.index.samples {
        sampled.entry(e.frame_index).or_default().push((e.segment_id, e.sample_id));
    }

    let mut tracking_frames = Vec::new();
    for frame in read_frames(cfg)? {
        let image = pipeline::segment_frame(&frame, ground_z(cfg, truth.as_ref(), &frame), &stage)?.image;
        let wanted = sampled.get(&frame.frame_index).map(Vec::as_slice).unwrap_or_default();
        let segs = segments.get(&frame.frame_index).map(Vec::as_slice).unwrap_or_default();
        let mut clouds = Vec::new();
        for &(seg_id, _) in wanted {
            let seg = segs
                .iter()
                .find(|s| s.segment_id == seg_id)
                .ok_or_else(|| Error::format(&p(cfg, |p| &p.segments), format!("frame {} lacks segment {seg_id}", frame.frame_index)))?;
            let points = segmentation::segment_points(&image, seg).map_err(pipeline_err)?;
            clouds.push(SegmentCloud { segment_id: seg_id, points });
        }
        tracking_frames.push(TrackingFrame { frame_index: frame.frame_index, pose: Some(frame.pose), segments: clouds });
    }

    let mut associations = Vec::new();
    for k in 1..tracking_frames.len() {
        associations.push(tracking::associate(&tracking_frames[k - 1], &tracking_frames[k], &cfg.association).map_err(pipeline_err)?);
    }
    let lists: Vec<(usize, Vec<u32>)> =
        tracking_frames.iter().map(|f| (f.frame_index, f.segments.iter().map(|s| s.segment_id).collect())).collect();
    let mut tracks = tracking::build_tracks(&lists, &associations).map_err(pipeline_err)?;
    let lookup: BTreeMap<(usize, u32), u32> =
        sampled.iter().flat_map(|(&f, v)| v.iter().map(move |&(seg, id)| ((f, seg), id))).collect();
    tracking::attach_samples(&mut tracks, &lookup);
    formats::write_jsonl(&p(cfg, |p| &p.tracks), &tracks)?;
    let members: usize = tracks.iter().map(Track::len).sum();
    Ok(json!({ "command": "track", "tracks": tracks.len(), "members": members }))
}

fn load_store(cfg: &PipelineConfig) -> Result<AnnotationStore> {
    Service::load_store(&p(cfg, |p| &p.tracks), &p(cfg, |p| &p.audit))
}

fn sample_infos(store: &SampleStore) -> Vec<SampleInfo> {
    store
        .index
        .samples
        .iter()
        .map(|e| SampleInfo {
            sample_id: e.sample_id,
            frame_index: e.frame_index,
            segment_id: e.segment_id,
            point_count: e.point_count,
            center_distance: e.center_distance,
            truth_object: e.truth_object,
            truth_class: e.truth_class.unwrap_or(ClassLabel::Unknown),
        })
        .collect()
}

fn persist_annotations(cfg: &PipelineConfig, store: &AnnotationStore) -> Result<()> {
    formats::write_jsonl(&p(cfg, |p| &p.audit), store.audit_log())?;
    formats::write_jsonl(&p(cfg, |p| &p.annotations), store.records())
}

pub fn constraints(cfg: &PipelineConfig, simulate: bool) -> Result<Value> {
    let mut store = load_store(cfg)?;
    if simulate {
        let samples = SampleStore::open(&p(cfg, |p| &p.samples))?;
        let infos = sample_infos(&samples);
        if infos.iter().enumerate().any(|(k, s)| s.sample_id as usize != k) {
            return Err(Error::format(&p(cfg, |p| &p.samples), "sample ids must be contiguous from 0"));
        }
        if samples.index.samples.iter().any(|e| e.truth_class.is_none()) {
            return Err(Error::format(&p(cfg, |p| &p.samples), "simulated operator needs ground truth"));
        }
        pipeline::simulated_operator(&mut store, &infos, 0)?;
        persist_annotations(cfg, &store)?;
    }
    let constraints = store.constraints();
    formats::write_jsonl(&p(cfg, |p| &p.constraints), &constraints)?;
    Ok(json!({ "command": "constraints", "constraints": constraints.len(), "progress": store.progress() }))
}

/// Pooled network inputs of every sample, in index order.
pub fn load_inputs(store: &SampleStore, cfg: &PipelineConfig) -> Result<Vec<Vec<f64>>> {
    let mut inputs = Vec::with_capacity(store.len());
    store.for_each(|s| {
        inputs.push(classifier::prepare_input(&s, &cfg.arch)?);
        Ok(())
    })?;
    Ok(inputs)
}

fn truth_labels(path: &Path, store: &SampleStore) -> Result<Vec<usize>> {
    store
        .index
        .samples
        .iter()
        .map(|e| e.truth_class.map(ClassLabel::index).ok_or_else(|| Error::format(path, "samples lack ground truth")))
        .collect()
}

pub fn train(cfg: &PipelineConfig, args: &TrainArgs) -> Result<Value> {
    let mut tc = cfg.train.clone();
    if let Some(m) = args.mode {
        tc.mode = m;
    }
    let samples_path = p(cfg, |p| &p.samples);
    let store = SampleStore::open(&samples_path)?;
    let position: BTreeMap<u32, usize> = store.index.samples.iter().enumerate().map(|(k, e)| (e.sample_id, k)).collect();
    let pos = |id: u32| {
        position.get(&id).copied().ok_or_else(|| Error::format(&samples_path, format!("unknown sample {id}")))
    };

    let mut labeled: Vec<(usize, usize)> = Vec::new();
    if tc.mode.uses_labels() {
        match args.labels {
            LabelSource::Truth => {
                labeled = truth_labels(&samples_path, &store)?.into_iter().enumerate().collect();
            }
            LabelSource::Annotations => {
                let records: Vec<AnnotationRecord> = formats::read_jsonl(&p(cfg, |p| &p.annotations))?;
                for r in records {
                    if tc.mode == TrainMode::FineTune && r.source != AnnotationSource::Anchor {
                        continue;
                    }
                    labeled.push((pos(r.sample_id)?, r.label.index()));
                }
                labeled.sort_unstable();
            }
        }
        if let Some(k) = args.labels_per_class {
            labeled = training::subsample_per_class(&labeled, k, tc.seed);
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if tc.mode.uses_constraints() {
        let cs: Vec<Constraint> = formats::read_jsonl(&p(cfg, |p| &p.constraints))?;
        for c in cs {
            pairs.push((pos(c.i)?, pos(c.j)?));
        }
        if pairs.is_empty() {
            return Err(TrainError::ModeMismatch(match tc.mode {
                TrainMode::Semi => "semi mode needs constraints; use supervised mode without them",
                TrainMode::FineTune => "fine_tune mode needs constraints",
                _ => "unsupervised mode needs constraints",
            })
            .into());
        }
    }

    let inputs = load_inputs(&store, cfg)?;
    let initial = args.init.as_deref().map(|f| formats::read_params(&cfg.path(f))).transpose()?;
    let validation = match &args.validation {
        Some(v) => {
            let vp = cfg.path(v);
            let vs = SampleStore::open(&vp)?;
            Some((load_inputs(&vs, cfg)?, truth_labels(&vp, &vs)?))
        }
        None => None,
    };
    let data = TrainData { inputs: &inputs, labeled: &labeled, constraints: &pairs };
    let outcome = training::train(
        data,
        &tc,
        &cfg.arch,
        initial.as_ref(),
        validation.as_ref().map(|(i, t)| Validation { inputs: i, truths: t }),
    )?;

    let ckdir = p(cfg, |p| &p.checkpoints);
    std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let mut listing = Vec::new();
    for (k, c) in outcome.checkpoints.iter().enumerate() {
        let file = format!("step_{:06}.bin", c.step);
        formats::write_params(&ckdir.join(&file), &c.params)?;
        listing.push(json!({
            "step": c.step,
            "file": file,
            "validation_macro_f": c.validation_macro_f,
            "selected": outcome.best == Some(k),
        }));
    }
    formats::write_json(&ckdir.join("checkpoints.json"), &listing)?;
    formats::write_text(&p(cfg, |p| &p.loss), &formats::loss_csv(&outcome.history))?;
    let out = args.output.as_deref().map(|o| cfg.path(o)).unwrap_or_else(|| p(cfg, |p| &p.params));
    formats::write_params(&out, outcome.selected())?;
    let last = outcome.history.last();
    Ok(json!({
        "command": "train",
        "mode": tc.mode,
        "labeled": labeled.len(),
        "constraints": pairs.len(),
        "steps": outcome.history.len(),
        "final_loss": last.map(|r| r.total),
        "converged": outcome.converged,
        "selected_step": outcome.best.map(|b| outcome.checkpoints[b].step),
        "params": out.display().to_string(),
    }))
}

pub fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<Value> {
    let samples_path = args.samples.as_deref().map(|s| cfg.path(s)).unwrap_or_else(|| p(cfg, |p| &p.samples));
    let store = SampleStore::open(&samples_path)?;
    let truths = truth_labels(&samples_path, &store)?;
    let inputs = load_inputs(&store, cfg)?;
    let files: Vec<PathBuf> =
        if args.params.is_empty() { vec![p(cfg, |p| &p.params)] } else { args.params.iter().map(|f| cfg.path(f)).collect() };
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for f in &files {
        let params: ClassifierParams = formats::read_params(f)?;
        let preds = training::predict(&params, &inputs)?;
        let report = evaluation::evaluate(&preds, &truths, params.arch.classes)?;
        let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((name, report));
    }
    let doc: Vec<Value> = rows
        .iter()
        .zip(&files)
        .map(|((name, r), f)| json!({ "classifier": name, "params": f.display().to_string(), "report": r }))
        .collect();
    formats::write_json(&p(cfg, |p| &p.report), &doc)?;
    formats::write_text(&p(cfg, |p| &p.report_table), &formats::report_table(&rows))?;
    let summary: Vec<Value> = rows.iter().map(|(n, r)| json!({ "classifier": n, "macro_f": r.macro_f })).collect();
    Ok(json!({ "command": "eval", "samples": truths.len(), "results": summary }))
}

/// Class probabilities of every sample under `params`.
pub fn predictions(store: &SampleStore, cfg: &PipelineConfig, params: &ClassifierParams) -> Result<Vec<(u32, Vec<f64>)>> {
    let inputs = load_inputs(store, cfg)?;
    store
        .index
        .samples
        .iter()
        .zip(&inputs)
        .map(|(e, x)| Ok((e.sample_id, classifier::forward(params, x)?.0)))
        .collect()
}

pub fn build_service(cfg: &PipelineConfig, params: Option<&Path>) -> Result<Service> {
    let store = load_store(cfg)?;
    let samples = SampleStore::open(&p(cfg, |p| &p.samples))?;
    let default_params = p(cfg, |p| &p.params);
    let params_path = match params {
        Some(f) => Some(cfg.path(f)),
        None => default_params.exists().then_some(default_params),
    };
    let preds = match params_path {
        Some(f) => predictions(&samples, cfg, &formats::read_params(&f)?)?,
        None => Vec::new(),
    };
    let persistence = Persistence { audit: p(cfg, |p| &p.audit), annotations: p(cfg, |p| &p.annotations) };
    Ok(Service::new(store, samples, preds, cfg.anchors, Some(persistence), service::system_clock()))
}

pub fn serve(cfg: &PipelineConfig, args: &ServeArgs) -> Result<Value> {
    let svc = Arc::new(build_service(cfg, args.params.as_deref())?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(Path::new(&args.addr), e))?;
    rt.block_on(service::serve(svc, &args.addr)).map_err(|e| Error::io(Path::new(&args.addr), e))?;
    Ok(json!({ "command": "serve" }))
}
