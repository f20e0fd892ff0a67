//! Dataset files, ingestion, normalization, prompt-length quartiles and the
//! synthetic coupled-motion corpus.
//!
//! Directory layout:
//!
//! ```text
//! motions/<id>.mot            mot-v1 motion file
//! texts/<id>.txt              one prompt per line
//! splits/{train,val,test}.txt one id per line
//! norm/{mean,std}.txt         one float per line (optional)
//! ```
//!
//! A mot-v1 file starts with `mot-v1 <frames> <width> <layout-id>` followed by
//! one line per frame of tab-separated decimals.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use partcoord_tape::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::partition::{Layout, Motion};
use crate::rng::rng_for;

pub const MOT_MAGIC: &str = "mot-v1";
pub const MIN_FRAMES: usize = 40;
pub const MAX_FRAMES: usize = 196;
pub const STD_FLOOR: f64 = 1e-6;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn format_mot(m: &Motion) -> String {
    let mut s = format!("{MOT_MAGIC} {} {} {}\n", m.frames(), m.width(), m.layout().id);
    for row in m.features().iter_rows() {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                s.push('\t');
            }
            write!(s, "{v}").expect("writing to a String cannot fail");
        }
        s.push('\n');
    }
    s
}

/// Parses a mot-v1 file. Zero-frame files are accepted and yield an empty motion.
pub fn parse_mot(text: &str, context: &str) -> Result<Motion> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(context, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != MOT_MAGIC {
        return Err(Error::parse(context, format!("expected `{MOT_MAGIC} <frames> <width> <layout-id>` header")));
    }
    let frames: usize = fields[1].parse().map_err(|_| Error::parse(context, "bad frame count"))?;
    let width: usize = fields[2].parse().map_err(|_| Error::parse(context, "bad width"))?;
    let layout = Layout::resolve(fields[3], width)?;
    let mut data = Vec::with_capacity(frames * width);
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split('\t') {
            let v: f64 =
                tok.trim().parse().map_err(|_| Error::parse(context, format!("line {}: bad number {tok:?}", i + 2)))?;
            data.push(v);
        }
        if data.len() - before != width {
            return Err(Error::parse(context, format!("line {}: expected {width} values", i + 2)));
        }
        n += 1;
    }
    if n != frames {
        return Err(Error::parse(context, format!("header declares {frames} frames, found {n}")));
    }
    if frames == 0 {
        return Ok(Motion::empty(layout));
    }
    Motion::new(layout, Matrix::from_vec(frames, width, data))
}

pub fn read_mot(path: &Path) -> Result<Motion> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mot(&text, &path.display().to_string())
}

pub fn write_mot(path: &Path, m: &Motion) -> Result<()> {
    write_file(path, &format_mot(m))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn read_floats(path: &Path) -> Result<Vec<f64>> {
    read_lines(path)?
        .iter()
        .map(|l| l.parse().map_err(|_| Error::parse(path.display().to_string(), format!("bad number {l:?}"))))
        .collect()
}

fn write_floats(path: &Path, xs: &[f64]) -> Result<()> {
    let mut s = String::new();
    for x in xs {
        writeln!(s, "{x}").expect("writing to a String cannot fail");
    }
    write_file(path, &s)
}

/// Per-column affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Column means and population standard deviations over every frame,
    /// with the deviation floored at [`STD_FLOOR`].
    pub fn compute(motions: &[&Motion]) -> Result<Self> {
        let first =
            motions.first().ok_or_else(|| Error::InvalidArgument("normalization needs a non-empty split".into()))?;
        let w = first.width();
        let frames: usize = motions.iter().map(|m| m.frames()).sum();
        if frames == 0 || motions.iter().any(|m| m.width() != w) {
            return Err(Error::InvalidArgument("normalization needs frames of one width".into()));
        }
        let mut mean = vec![0.0; w];
        for m in motions {
            for row in m.features().iter_rows() {
                for (a, v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a /= frames as f64);
        let mut var = vec![0.0; w];
        for m in motions {
            for row in m.features().iter_rows() {
                for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let std = var.iter().map(|v| (v / frames as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalization { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Motion) -> Result<()> {
        if m.width() != self.width() {
            return Err(Error::Shape(format!("motion width {} vs normalization width {}", m.width(), self.width())));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &Motion) -> Result<Motion> {
        self.check(m)?;
        Ok(self.apply(m, |v, mu, s| (v - mu) / s))
    }

    pub fn denormalize(&self, m: &Motion) -> Result<Motion> {
        self.check(m)?;
        Ok(self.apply(m, |v, mu, s| v * s + mu))
    }

    fn apply(&self, m: &Motion, f: impl Fn(f64, f64, f64) -> f64) -> Motion {
        let mut x = m.features().clone();
        for r in 0..x.rows() {
            for ((v, mu), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *mu, *s);
            }
        }
        if x.rows() == 0 {
            return Motion::empty(m.layout().clone());
        }
        Motion::new(m.layout().clone(), x).expect("affine map of a valid motion stays valid")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mean = read_floats(&dir.join("mean.txt"))?;
        let std = read_floats(&dir.join("std.txt"))?;
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::parse(dir.display().to_string(), "mean/std lengths differ or std is not positive"));
        }
        Ok(Normalization { mean, std })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_floats(&dir.join("mean.txt"), &self.mean)?;
        write_floats(&dir.join("std.txt"), &self.std)
    }
}

/// A dataset directory together with its splits and length policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub norm: Option<Normalization>,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Kept lengths are cropped to a multiple of this.
    pub rate: usize,
}

impl DatasetManifest {
    /// Reads split lists and, when present, normalization files.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let split = |name: &str| -> Result<Vec<String>> {
            let p = root.join("splits").join(format!("{name}.txt"));
            if p.exists() {
                read_lines(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let (train, val, test) = (split("train")?, split("val")?, split("test")?);
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: train split is missing or empty", root.display())));
        }
        let norm_dir = root.join("norm");
        let norm = if norm_dir.join("mean.txt").exists() { Some(Normalization::load(&norm_dir)?) } else { None };
        let m =
            DatasetManifest { root, train, val, test, norm, min_frames: MIN_FRAMES, max_frames: MAX_FRAMES, rate: 4 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("id {id} appears in more than one split entry")));
            }
            for p in [self.motion_path(id), self.text_path(id)] {
                if !p.is_file() {
                    return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
                }
            }
        }
        if self.rate == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("invalid length policy".into()));
        }
        Ok(())
    }

    pub fn split_ids(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::InvalidArgument(format!("unknown split {name:?}"))),
        }
    }

    pub fn motion_path(&self, id: &str) -> PathBuf {
        self.root.join("motions").join(format!("{id}.mot"))
    }

    pub fn text_path(&self, id: &str) -> PathBuf {
        self.root.join("texts").join(format!("{id}.txt"))
    }
}

/// One motion with its prompts, in normalized and raw form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub prompts: Vec<String>,
    pub motion: Motion,
    pub raw: Motion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub kept: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
    pub cropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: Layout,
    pub norm: Normalization,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub report: IngestReport,
}

/// Applies the length policy: `None` if out of bounds, otherwise the motion
/// tail-cropped to a multiple of `rate`.
pub fn apply_length_policy(m: &Motion, min: usize, max: usize, rate: usize) -> Option<Motion> {
    let n = m.frames();
    if n < min || n > max {
        return None;
    }
    let keep = n - n % rate;
    if keep == 0 {
        return None;
    }
    Some(m.truncated(keep))
}

fn load_split(
    manifest: &DatasetManifest,
    ids: &[String],
    report: &mut IngestReport,
) -> Result<Vec<(String, Vec<String>, Motion)>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let m = read_mot(&manifest.motion_path(id))?;
        let prompts = read_lines(&manifest.text_path(id))?;
        match apply_length_policy(&m, manifest.min_frames, manifest.max_frames, manifest.rate) {
            None if m.frames() < manifest.min_frames => report.dropped_short += 1,
            None => report.dropped_long += 1,
            Some(c) => {
                if c.frames() != m.frames() {
                    report.cropped += 1;
                }
                report.kept += 1;
                out.push((id.clone(), prompts, c));
            }
        }
    }
    Ok(out)
}

/// Loads, filters, crops and normalizes every split. Normalization comes from
/// the manifest's files if present, otherwise from the train split alone;
/// the train split is read first and val/test only afterwards.
pub fn ingest(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut report = IngestReport::default();
    let train = load_split(manifest, &manifest.train, &mut report)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no train motion survives the length policy".into()));
    }
    let layout = train[0].2.layout().clone();
    let norm = match &manifest.norm {
        Some(n) => n.clone(),
        None => Normalization::compute(&train.iter().map(|t| &t.2).collect::<Vec<_>>())?,
    };
    let finish = |rows: Vec<(String, Vec<String>, Motion)>| -> Result<Vec<Sample>> {
        rows.into_iter()
            .map(|(id, prompts, raw)| {
                if raw.layout() != &layout {
                    return Err(Error::Shape(format!(
                        "motion {id} uses layout {} but the dataset uses {}",
                        raw.layout().id,
                        layout.id
                    )));
                }
                Ok(Sample { motion: norm.normalize(&raw)?, id, prompts, raw })
            })
            .collect()
    };
    let train = finish(train)?;
    let val = finish(load_split(manifest, &manifest.val, &mut report)?)?;
    let test = finish(load_split(manifest, &manifest.test, &mut report)?)?;
    log::info!(
        "ingested {} motions ({} too short, {} too long, {} cropped)",
        report.kept,
        report.dropped_short,
        report.dropped_long,
        report.cropped
    );
    Ok(Dataset { layout, norm, train, val, test, report })
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::InvalidArgument(format!("unknown split {name:?}"))),
        }
    }

    /// Text/motion pairs of a split, one per prompt line.
    pub fn pairs(&self, name: &str) -> Result<Vec<TextMotionPair>> {
        Ok(self
            .split(name)?
            .iter()
            .flat_map(|s| s.prompts.iter().map(|p| TextMotionPair::new(s.id.clone(), p.clone())))
            .collect())
    }

    /// Writes the raw (cropped, unnormalized) motions, prompts, splits and the
    /// normalization in use, so that ingesting the export reproduces this dataset.
    pub fn export(&self, root: &Path) -> Result<()> {
        for name in SPLITS {
            let samples = self.split(name)?;
            let mut ids = String::new();
            for s in samples {
                write_mot(&root.join("motions").join(format!("{}.mot", s.id)), &s.raw)?;
                write_file(&root.join("texts").join(format!("{}.txt", s.id)), &(s.prompts.join("\n") + "\n"))?;
                ids.push_str(&s.id);
                ids.push('\n');
            }
            write_file(&root.join("splits").join(format!("{name}.txt")), &ids)?;
        }
        self.norm.save(&root.join("norm"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextMotionPair {
    pub motion_id: String,
    pub prompt: String,
    pub token_count: usize,
}

impl TextMotionPair {
    pub fn new(motion_id: String, prompt: String) -> Self {
        let token_count = prompt.split_whitespace().count();
        TextMotionPair { motion_id, prompt, token_count }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuartileStats {
    pub label: &'static str,
    pub min: usize,
    pub max: usize,
    pub avg: f64,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quartiles {
    pub groups: Vec<Vec<TextMotionPair>>,
    pub stats: Vec<QuartileStats>,
}

impl Quartiles {
    pub fn to_table(&self) -> String {
        let mut s = String::from("group,min,max,avg,count,percent\n");
        for g in &self.stats {
            writeln!(s, "{},{},{},{:.1},{},{:.1}", g.label, g.min, g.max, g.avg, g.count, g.percent)
                .expect("String write");
        }
        s
    }
}

/// Sorts by token count (ties by motion id, then original order) and cuts into
/// four contiguous groups whose sizes differ by at most one, larger groups first.
pub fn text_length_quartiles(pairs: &[TextMotionPair]) -> Result<Quartiles> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no text/motion pairs".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.token_count.cmp(&b.token_count).then_with(|| a.motion_id.cmp(&b.motion_id)));
    let n = sorted.len();
    let labels = ["0-25%", "25-50%", "50-75%", "75-100%"];
    let mut groups = Vec::with_capacity(4);
    let mut it = sorted.into_iter();
    for g in 0..4 {
        let size = n / 4 + usize::from(g < n % 4);
        groups.push(it.by_ref().take(size).collect::<Vec<_>>());
    }
    let stats = groups
        .iter()
        .zip(labels)
        .map(|(g, label)| {
            let lens: Vec<usize> = g.iter().map(|p| p.token_count).collect();
            QuartileStats {
                label,
                min: lens.iter().copied().min().unwrap_or(0),
                max: lens.iter().copied().max().unwrap_or(0),
                avg: if lens.is_empty() { 0.0 } else { lens.iter().sum::<usize>() as f64 / lens.len() as f64 },
                count: g.len(),
                percent: 100.0 * g.len() as f64 / n as f64,
            }
        })
        .collect();
    Ok(Quartiles { groups, stats })
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Rest-pose joint positions relative to the pelvis (x left/right, y up, z forward).
const REST_POSE: [[f64; 3]; 22] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, 0.0],
    [0.1, -0.47, 0.0],
    [-0.1, -0.47, 0.0],
    [0.0, 0.25, 0.0],
    [0.1, -0.87, -0.03],
    [-0.1, -0.87, -0.03],
    [0.0, 0.31, 0.02],
    [0.11, -0.93, 0.09],
    [-0.11, -0.93, 0.09],
    [0.0, 0.52, 0.0],
    [0.07, 0.43, 0.0],
    [-0.07, 0.43, 0.0],
    [0.0, 0.6, 0.04],
    [0.18, 0.45, 0.0],
    [-0.18, 0.45, 0.0],
    [0.44, 0.44, 0.0],
    [-0.44, 0.44, 0.0],
    [0.69, 0.45, 0.0],
    [-0.69, 0.45, 0.0],
];

const LEFT_LEG: [usize; 4] = [1, 4, 7, 10];
const RIGHT_LEG: [usize; 4] = [2, 5, 8, 11];
const LEFT_ARM: [usize; 4] = [13, 16, 18, 20];
const RIGHT_ARM: [usize; 4] = [14, 17, 19, 21];
const SPINE: [usize; 5] = [3, 6, 9, 12, 15];

/// Motion classes of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthClass {
    Walk,
    WalkWaveLeft,
    Jog,
    RaiseArms,
    TurnWalk,
    WaveRight,
}

impl SynthClass {
    pub const ALL: [SynthClass; 6] = [
        SynthClass::Walk,
        SynthClass::WalkWaveLeft,
        SynthClass::Jog,
        SynthClass::RaiseArms,
        SynthClass::TurnWalk,
        SynthClass::WaveRight,
    ];

    pub fn prompts(self) -> &'static [&'static str] {
        match self {
            SynthClass::Walk => &["a person walks forward", "someone walks straight ahead at a steady pace", "walk"],
            SynthClass::WalkWaveLeft => &[
                "wave left arm while walking",
                "a person walks forward and waves with the left hand",
                "someone strolls ahead while waving their left arm high above the shoulder",
            ],
            SynthClass::Jog => &["a person jogs in place", "jogging on the spot with bouncing steps", "jog"],
            SynthClass::RaiseArms => {
                &["a person raises both arms", "someone lifts both arms up and lowers them again slowly", "raise arms"]
            }
            SynthClass::TurnWalk => &[
                "a person turns around while walking",
                "someone walks in a circle turning to the left",
                "walking forward then turning around to face the other direction",
            ],
            SynthClass::WaveRight => &[
                "a person waves the right arm",
                "standing still and waving with the right hand",
                "someone stands in place and waves their right arm back and forth to greet a friend",
            ],
        }
    }

    fn legs_move(self) -> f64 {
        match self {
            SynthClass::RaiseArms | SynthClass::WaveRight => 0.1,
            SynthClass::Jog => 1.3,
            _ => 1.0,
        }
    }
}

/// A generated corpus: motions with one prompt each and the class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub motions: Vec<Motion>,
    pub prompts: Vec<String>,
    pub classes: Vec<SynthClass>,
}

/// Scale of the independent per-frame jitter.
pub const SYNTH_NOISE: f64 = 0.3;

/// Frames by which each part trails the global phase.
pub const SYNTH_LAGS: [(&str, usize); 3] = [("legs/root", 0), ("backbone", 2), ("arms", 6)];

fn set_joint(row: &mut [f64], j: usize, p: [f64; 3]) {
    let c = Layout::joint_columns(j);
    for (k, &col) in c.iter().enumerate() {
        row[col] = p[k];
    }
}

/// Generates `n` coupled motions of `frames` frames in the SMPL-22 layout.
///
/// A per-sequence phase process (random period, AR(1) tempo noise and a slow
/// amplitude envelope) drives every part's oscillator. Parts read the phase
/// with their own lag, so the legs lead and the arms follow a few frames later;
/// arms swing against the same-side leg. Independent jitter is added per part.
pub fn synth_generate(n: usize, frames: usize, seed: u64) -> Result<SynthCorpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("requested an empty corpus".into()));
    }
    if frames < MIN_FRAMES {
        return Err(Error::InvalidArgument(format!("frames {frames} is below the minimum length {MIN_FRAMES}")));
    }
    if frames > MAX_FRAMES {
        return Err(Error::InvalidArgument(format!("frames {frames} is above the maximum length {MAX_FRAMES}")));
    }
    let layout = Layout::smpl22();
    let mut corpus =
        SynthCorpus { motions: Vec::with_capacity(n), prompts: Vec::with_capacity(n), classes: Vec::with_capacity(n) };
    let lag_arm = SYNTH_LAGS[2].1;
    let lag_spine = SYNTH_LAGS[1].1;
    for s in 0..n {
        let mut rng = rng_for(seed, "synth", s as u64);
        let class = *SynthClass::ALL.choose(&mut rng).expect("non-empty");
        let prompt = class.prompts().choose(&mut rng).expect("non-empty").to_string();
        let period: f64 = rng.gen_range(24.0..40.0);
        let omega = TAU / period;
        let phase0: f64 = rng.gen_range(0.0..TAU);
        let amp0: f64 = rng.gen_range(0.7..1.3);
        let env_freq: f64 = rng.gen_range(0.5..1.5) * TAU / frames as f64;
        let env_phase: f64 = rng.gen_range(0.0..TAU);

        // Phase and amplitude histories, extended backwards so lagged parts
        // read a defined past.
        let total = frames + lag_arm;
        let mut phase = Vec::with_capacity(total);
        let mut amp = Vec::with_capacity(total);
        let mut tempo = 0.0;
        let mut ph = phase0;
        for t in 0..total {
            tempo = 0.9 * tempo + rng.gen_range(-0.08..0.08);
            ph += omega * (1.0 + tempo);
            phase.push(ph);
            amp.push(amp0 * (1.0 + 0.3 * (env_freq * t as f64 + env_phase).sin()));
        }
        let at = |lag: usize, t: usize| (phase[t + lag_arm - lag], amp[t + lag_arm - lag]);
        let mut jitter = |scale: f64| SYNTH_NOISE * rng.gen_range(-scale..scale);

        let legs = class.legs_move();
        let mut x = Matrix::zeros(frames, layout.width);
        let mut heading = 0.0f64;
        for t in 0..frames {
            let row = x.row_mut(t);
            let (pl, al) = at(0, t);
            let (pa, aa) = at(lag_arm, t);
            let (ps, as_) = at(lag_spine, t);
            // Lag compensation keeps arms in antiphase with the same-side leg
            // when the tempo is steady.
            let arm_phase = pa + omega * lag_arm as f64;
            for j in 0..22 {
                set_joint(row, j, REST_POSE[j]);
            }
            for (side, joints, off) in [(1.0, LEFT_LEG, 0.0), (-1.0, RIGHT_LEG, PI)] {
                let swing = legs * al * (pl + off).sin();
                let lift = legs * al * (pl + off).cos().max(0.0);
                for (depth, &j) in joints.iter().enumerate() {
                    let w = (depth + 1) as f64 / 4.0;
                    let mut p = REST_POSE[j];
                    p[2] += 0.25 * w * swing + jitter(0.01);
                    p[1] += 0.08 * w * lift + jitter(0.01);
                    p[0] += side * 0.01 * swing + jitter(0.005);
                    set_joint(row, j, p);
                }
            }
            for (joints, off, is_left) in [(LEFT_ARM, PI, true), (RIGHT_ARM, 0.0, false)] {
                let swing = aa * (arm_phase + off).sin();
                for (depth, &j) in joints.iter().enumerate() {
                    let w = (depth + 1) as f64 / 4.0;
                    let mut p = REST_POSE[j];
                    let (walk_swing, raise, wave) = match class {
                        SynthClass::Walk | SynthClass::TurnWalk => (legs, 0.0, 0.0),
                        SynthClass::Jog => (1.2, 0.1, 0.0),
                        SynthClass::WalkWaveLeft => {
                            if is_left {
                                (0.0, 0.9, 1.0)
                            } else {
                                (legs, 0.0, 0.0)
                            }
                        }
                        SynthClass::RaiseArms => (0.0, 0.5 + 0.5 * (arm_phase * 0.5).sin(), 0.0),
                        SynthClass::WaveRight => {
                            if is_left {
                                (0.1, 0.0, 0.0)
                            } else {
                                (0.0, 0.9, 1.0)
                            }
                        }
                    };
                    p[2] += 0.22 * w * walk_swing * swing + jitter(0.01);
                    p[1] += 0.35 * w * raise * aa + jitter(0.01);
                    p[0] += 0.12 * w * wave * (2.0 * arm_phase).sin() * aa + jitter(0.005);
                    set_joint(row, j, p);
                }
            }
            for (depth, &j) in SPINE.iter().enumerate() {
                let w = (depth + 1) as f64 / 5.0;
                let mut p = REST_POSE[j];
                p[1] += 0.02 * legs * as_ * (2.0 * ps).sin() + jitter(0.004);
                p[0] += 0.03 * w * legs * as_ * ps.sin() + jitter(0.004);
                if class == SynthClass::TurnWalk {
                    p[2] += 0.04 * w * (ps * 0.5).sin();
                }
                set_joint(row, j, p);
            }
            let turn = if class == SynthClass::TurnWalk { PI / frames as f64 * 1.8 } else { 0.0 };
            heading += turn;
            let speed = match class {
                SynthClass::Walk | SynthClass::WalkWaveLeft | SynthClass::TurnWalk => 0.035 * al,
                _ => 0.0,
            };
            row[0] = turn + jitter(0.002);
            row[1] = speed * heading.sin() + jitter(0.002);
            row[2] = speed * heading.cos() * (1.0 + 0.3 * (2.0 * pl).sin()) + jitter(0.002);
            row[3] = 0.93 + 0.02 * legs * al * (2.0 * pl).cos() + jitter(0.002);
        }
        corpus.motions.push(Motion::new(layout.clone(), x)?);
        corpus.prompts.push(prompt);
        corpus.classes.push(class);
    }
    Ok(corpus)
}

/// Deterministic train/val/test assignment: 80/10/10 with at least one
/// validation and test item once there are three or more sequences.
pub fn synth_splits(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "synth/splits", 0));
    let held = if n >= 3 { (n / 10).max(1) } else { 0 };
    let test = idx.split_off(n - held);
    let val = idx.split_off(idx.len() - held);
    let mut out = [idx, val, test];
    out.iter_mut().for_each(|s| s.sort_unstable());
    out
}

pub fn synth_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Writes a synthetic corpus as a dataset directory, including train-split normalization.
pub fn write_synth_dataset(root: &Path, corpus: &SynthCorpus, seed: u64) -> Result<()> {
    let splits = synth_splits(corpus.motions.len(), seed);
    for (i, (m, p)) in corpus.motions.iter().zip(&corpus.prompts).enumerate() {
        write_mot(&root.join("motions").join(format!("{}.mot", synth_id(i))), m)?;
        write_file(&root.join("texts").join(format!("{}.txt", synth_id(i))), &format!("{p}\n"))?;
    }
    for (name, ids) in SPLITS.iter().zip(&splits) {
        let text: String = ids.iter().map(|&i| synth_id(i) + "\n").collect();
        write_file(&root.join("splits").join(format!("{name}.txt")), &text)?;
    }
    let train: Vec<&Motion> = splits[0].iter().map(|&i| &corpus.motions[i]).collect();
    Normalization::compute(&train)?.save(&root.join("norm"))
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Corpus-wide correlation between the right wrist's and left ankle's forward
/// coordinates; `pairing[s]` selects which sequence's ankle is paired with
/// sequence `s`'s wrist (the identity for the coupled measurement).
pub fn arm_leg_correlation(corpus: &SynthCorpus, pairing: &[usize]) -> f64 {
    let wrist = Layout::joint_columns(21)[2];
    let ankle = Layout::joint_columns(7)[2];
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (s, &p) in pairing.iter().enumerate() {
        let (ma, mb) = (corpus.motions[s].features(), corpus.motions[p].features());
        for t in 0..ma.rows().min(mb.rows()) {
            a.push(ma.get(t, wrist));
            b.push(mb.get(t, ankle));
        }
    }
    pearson(&a, &b)
}
