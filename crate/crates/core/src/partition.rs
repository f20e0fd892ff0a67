//! Whole-body motion, the six body parts, and splitting/merging between them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use partcoord_tape::Matrix;

use crate::error::{Error, Result};

/// Number of body parts.
pub const NUM_PARTS: usize = 6;

/// A body part. The declaration order is the canonical stream order used
/// everywhere (token grids, generator streams, coordination inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartId {
    RightLeg,
    LeftLeg,
    RightArm,
    LeftArm,
    Backbone,
    Root,
}

impl PartId {
    pub const ALL: [PartId; NUM_PARTS] =
        [PartId::RightLeg, PartId::LeftLeg, PartId::RightArm, PartId::LeftArm, PartId::Backbone, PartId::Root];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<PartId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PartId::RightLeg => "R.Leg",
            PartId::LeftLeg => "L.Leg",
            PartId::RightArm => "R.Arm",
            PartId::LeftArm => "L.Arm",
            PartId::Backbone => "Backbone",
            PartId::Root => "Root",
        }
    }
}

impl fmt::Display for PartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartId::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Scheme(format!("unknown part name {s:?}")))
    }
}

/// Feature layout: an identifier plus the number of feature columns per frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub id: String,
    pub width: usize,
}

impl Layout {
    /// Root block (rotational velocity, planar x/z velocity, height) followed by
    /// local xyz for SMPL joints 1..=21.
    pub const SMPL22_ID: &'static str = "joints3d-v1";
    /// Same convention for the 21-joint MMM skeleton (joints 1..=20).
    pub const MMM21_ID: &'static str = "joints3d-mmm-v1";
    pub const ROOT_WIDTH: usize = 4;

    pub fn smpl22() -> Self {
        Layout { id: Self::SMPL22_ID.into(), width: Self::ROOT_WIDTH + 21 * 3 }
    }

    pub fn mmm21() -> Self {
        Layout { id: Self::MMM21_ID.into(), width: Self::ROOT_WIDTH + 20 * 3 }
    }

    /// Resolves a layout from an identifier and a declared width. Known
    /// identifiers must carry their fixed width; any other identifier is
    /// accepted as a user-defined layout of the declared width.
    pub fn resolve(id: &str, width: usize) -> Result<Self> {
        let known = match id {
            Self::SMPL22_ID => Some(Self::smpl22()),
            Self::MMM21_ID => Some(Self::mmm21()),
            _ => None,
        };
        match known {
            Some(l) if l.width != width => Err(Error::Shape(format!("layout {id} has width {}, got {width}", l.width))),
            Some(l) => Ok(l),
            None if width == 0 => Err(Error::Shape(format!("layout {id} declared with zero width"))),
            None => Ok(Layout { id: id.into(), width }),
        }
    }

    /// Feature columns of joint `j` under the joints3d convention. Joint 0 (the
    /// pelvis) has no local columns; it is carried entirely by the root block.
    pub fn joint_columns(j: usize) -> Vec<usize> {
        if j == 0 {
            Vec::new()
        } else {
            let base = Self::ROOT_WIDTH + 3 * (j - 1);
            vec![base, base + 1, base + 2]
        }
    }

    pub fn root_columns() -> Vec<usize> {
        (0..Self::ROOT_WIDTH).collect()
    }
}

/// Whole-body motion: `frames × layout.width` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    layout: Layout,
    features: Matrix,
}

impl Motion {
    pub fn new(layout: Layout, features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("a motion needs at least one frame".into()));
        }
        if features.cols() != layout.width {
            return Err(Error::Shape(format!(
                "motion has {} columns but layout {} declares {}",
                features.cols(),
                layout.id,
                layout.width
            )));
        }
        if !features.is_finite() {
            return Err(Error::Shape("motion contains non-finite values".into()));
        }
        Ok(Motion { layout, features })
    }

    /// A zero-frame motion. Only produced by generation when the first sampled
    /// step already ends the sequence; every other constructor requires frames.
    pub fn empty(layout: Layout) -> Self {
        let w = layout.width;
        Motion { layout, features: Matrix::zeros(0, w) }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    /// Keeps the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Motion {
        Motion { layout: self.layout.clone(), features: self.features.slice_rows(0, frames.min(self.frames())) }
    }
}

/// One part's slice of a motion.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMotion {
    pub part: PartId,
    pub features: Matrix,
}

impl PartMotion {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartSpec {
    pub part: PartId,
    pub columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedColumn {
    pub column: usize,
    pub owners: Vec<PartId>,
}

/// Assignment of feature columns to the six parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionScheme {
    pub layout: Layout,
    pub parts: Vec<PartSpec>,
    pub shared: Vec<SharedColumn>,
}

/// A single broken scheme invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    WrongPartCount(usize),
    DuplicatePart(PartId),
    MissingPart(PartId),
    EmptyPart(PartId),
    ColumnOutOfRange { part: PartId, column: usize },
    RepeatedColumnInPart { part: PartId, column: usize },
    UncoveredColumn(usize),
    UnregisteredSharedColumn(usize),
    SpuriousSharedColumn(usize),
    WidthMismatch { scheme: usize, layout: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongPartCount(n) => write!(f, "expected {NUM_PARTS} parts, found {n}"),
            Violation::DuplicatePart(p) => write!(f, "part {p} listed more than once"),
            Violation::MissingPart(p) => write!(f, "missing part {p}"),
            Violation::EmptyPart(p) => write!(f, "part {p} has no columns"),
            Violation::ColumnOutOfRange { part, column } => write!(f, "part {part} column {column} out of range"),
            Violation::RepeatedColumnInPart { part, column } => write!(f, "part {part} lists column {column} twice"),
            Violation::UncoveredColumn(c) => write!(f, "uncovered column {c}"),
            Violation::UnregisteredSharedColumn(c) => write!(f, "unregistered shared column {c}"),
            Violation::SpuriousSharedColumn(c) => {
                write!(f, "column {c} is registered as shared but its owners do not match the parts using it")
            }
            Violation::WidthMismatch { scheme, layout } => {
                write!(f, "scheme is defined for width {scheme} but the layout has width {layout}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Scheme(self.messages().join("; ")))
        }
    }
}

impl PartitionScheme {
    /// Builds a scheme from per-part column lists, registering every column
    /// that appears in more than one part as shared. Parts are stored in
    /// canonical order.
    pub fn from_parts(layout: Layout, mut parts: Vec<PartSpec>) -> Self {
        parts.sort_by_key(|p| p.part);
        let mut owners: BTreeMap<usize, Vec<PartId>> = BTreeMap::new();
        for spec in &parts {
            for &c in &spec.columns {
                let o = owners.entry(c).or_default();
                if !o.contains(&spec.part) {
                    o.push(spec.part);
                }
            }
        }
        let shared = owners
            .into_iter()
            .filter(|(_, o)| o.len() > 1)
            .map(|(column, owners)| SharedColumn { column, owners })
            .collect();
        PartitionScheme { layout, parts, shared }
    }

    /// Default SMPL-22 assignment. Joint 9 (spine3) belongs to both arms and the
    /// backbone; the pelvis (joint 0) is listed under the backbone but has no
    /// columns of its own in this layout.
    pub fn smpl22() -> Self {
        let joints = |js: &[usize]| js.iter().flat_map(|&j| Layout::joint_columns(j)).collect::<Vec<_>>();
        let parts = vec![
            PartSpec { part: PartId::RightLeg, columns: joints(&[2, 5, 8, 11]) },
            PartSpec { part: PartId::LeftLeg, columns: joints(&[1, 4, 7, 10]) },
            PartSpec { part: PartId::RightArm, columns: joints(&[9, 14, 17, 19, 21]) },
            PartSpec { part: PartId::LeftArm, columns: joints(&[9, 13, 16, 18, 20]) },
            PartSpec { part: PartId::Backbone, columns: joints(&[0, 3, 6, 9, 12, 15]) },
            PartSpec { part: PartId::Root, columns: Layout::root_columns() },
        ];
        Self::from_parts(Layout::smpl22(), parts)
    }

    /// Parses the text format: one `<name>: i0,i1,...` line per part; blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str, layout: Layout) -> Result<Self> {
        let mut parts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = || format!("scheme line {}", n + 1);
            let (name, cols) =
                line.split_once(':').ok_or_else(|| Error::parse(ctx(), "expected `<name>: i0,i1,...`"))?;
            let part: PartId = name.trim().parse()?;
            let columns = cols
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|e| Error::parse(ctx(), format!("bad column {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            parts.push(PartSpec { part, columns });
        }
        Ok(Self::from_parts(layout, parts))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for spec in &self.parts {
            let cols: Vec<String> = spec.columns.iter().map(ToString::to_string).collect();
            out.push_str(&format!("{}: {}\n", spec.part, cols.join(",")));
        }
        out
    }

    pub fn part(&self, id: PartId) -> Option<&PartSpec> {
        self.parts.iter().find(|p| p.part == id)
    }

    /// Column count of each part in canonical order.
    pub fn part_widths(&self) -> Vec<usize> {
        PartId::ALL.iter().map(|&p| self.part(p).map_or(0, |s| s.columns.len())).collect()
    }

    /// Checks every scheme invariant against a feature width.
    pub fn validate(&self, layout_width: usize) -> ValidationReport {
        let mut v = Vec::new();
        if self.layout.width != layout_width {
            v.push(Violation::WidthMismatch { scheme: self.layout.width, layout: layout_width });
        }
        if self.parts.len() != NUM_PARTS {
            v.push(Violation::WrongPartCount(self.parts.len()));
        }
        let mut seen = Vec::new();
        for spec in &self.parts {
            if seen.contains(&spec.part) {
                v.push(Violation::DuplicatePart(spec.part));
            }
            seen.push(spec.part);
            if spec.columns.is_empty() {
                v.push(Violation::EmptyPart(spec.part));
            }
            let mut cols_seen = std::collections::BTreeSet::new();
            for &c in &spec.columns {
                if c >= layout_width {
                    v.push(Violation::ColumnOutOfRange { part: spec.part, column: c });
                }
                if !cols_seen.insert(c) {
                    v.push(Violation::RepeatedColumnInPart { part: spec.part, column: c });
                }
            }
        }
        for p in PartId::ALL {
            if !seen.contains(&p) {
                v.push(Violation::MissingPart(p));
            }
        }
        let mut owners: BTreeMap<usize, Vec<PartId>> = BTreeMap::new();
        for spec in &self.parts {
            for &c in &spec.columns {
                let o = owners.entry(c).or_default();
                if !o.contains(&spec.part) {
                    o.push(spec.part);
                }
            }
        }
        for c in 0..layout_width {
            if !owners.contains_key(&c) {
                v.push(Violation::UncoveredColumn(c));
            }
        }
        for (&c, o) in &owners {
            if o.len() > 1 && !self.shared.iter().any(|s| s.column == c) {
                v.push(Violation::UnregisteredSharedColumn(c));
            }
        }
        for s in &self.shared {
            let actual = owners.get(&s.column).cloned().unwrap_or_default();
            let mut want = s.owners.clone();
            want.sort();
            let mut have = actual;
            have.sort();
            if have.len() < 2 || want != have {
                v.push(Violation::SpuriousSharedColumn(s.column));
            }
        }
        ValidationReport { violations: v }
    }
}

/// Free-function form of [`PartitionScheme::validate`].
pub fn validate_scheme(scheme: &PartitionScheme, layout_width: usize) -> ValidationReport {
    scheme.validate(layout_width)
}

/// Splits a motion into the six part motions (canonical order).
pub fn split(whole: &Motion, scheme: &PartitionScheme) -> Result<Vec<PartMotion>> {
    if whole.layout().id != scheme.layout.id {
        return Err(Error::Scheme(format!(
            "scheme is for layout {} but motion uses {}",
            scheme.layout.id,
            whole.layout().id
        )));
    }
    scheme.validate(whole.width()).into_result()?;
    Ok(scheme
        .parts
        .iter()
        .map(|spec| PartMotion { part: spec.part, features: whole.features().select_cols(&spec.columns) })
        .collect())
}

/// Reassembles whole-body motion. Each shared column is the arithmetic mean of
/// its owners' values, computed incrementally so agreeing owners reproduce
/// their common value exactly.
pub fn merge(parts: &[PartMotion], scheme: &PartitionScheme) -> Result<Motion> {
    scheme.validate(scheme.layout.width).into_result()?;
    let mut by_part: BTreeMap<PartId, &PartMotion> = BTreeMap::new();
    for p in parts {
        if by_part.insert(p.part, p).is_some() {
            return Err(Error::InvalidArgument(format!("part {} supplied twice", p.part)));
        }
    }
    let frames = parts.first().map(PartMotion::frames).ok_or_else(|| Error::InvalidArgument("no parts".into()))?;
    for spec in &scheme.parts {
        let pm =
            by_part.get(&spec.part).ok_or_else(|| Error::InvalidArgument(format!("missing part {}", spec.part)))?;
        if pm.frames() != frames {
            return Err(Error::Shape(format!("part {} has {} frames, expected {frames}", spec.part, pm.frames())));
        }
        if pm.features.cols() != spec.columns.len() {
            return Err(Error::Shape(format!(
                "part {} has {} columns, scheme expects {}",
                spec.part,
                pm.features.cols(),
                spec.columns.len()
            )));
        }
    }
    let width = scheme.layout.width;
    let mut out = Matrix::zeros(frames, width);
    let mut counts = vec![0usize; width];
    for spec in &scheme.parts {
        let pm = by_part[&spec.part];
        for (k, &c) in spec.columns.iter().enumerate() {
            counts[c] += 1;
            let n = counts[c] as f64;
            for f in 0..frames {
                let x = pm.features.get(f, k);
                let m = out.get(f, c);
                out.set(f, c, if counts[c] == 1 { x } else { m + (x - m) / n });
            }
        }
    }
    if frames == 0 {
        return Ok(Motion::empty(scheme.layout.clone()));
    }
    Motion::new(scheme.layout.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_motion(frames: usize) -> Motion {
        let w = Layout::smpl22().width;
        Motion::new(
            Layout::smpl22(),
            Matrix::from_vec(frames, w, (0..frames * w).map(|i| i as f64 * 0.25 - 3.0).collect()),
        )
        .unwrap()
    }

    #[test]
    fn default_scheme_is_valid_and_covers_width() {
        let s = PartitionScheme::smpl22();
        let report = validate_scheme(&s, 67);
        assert!(report.is_ok(), "{:?}", report.messages());
        let slots: usize = s.part_widths().iter().sum();
        let dup: usize = s.shared.iter().map(|c| c.owners.len() - 1).sum();
        assert_eq!(slots, 67 + dup);
        // Joint 9 is the only shared joint: three columns, three owners each.
        assert_eq!(s.shared.len(), 3);
        assert!(s.shared.iter().all(|c| c.owners.len() == 3));
    }

    #[test]
    fn default_scheme_enumerated_coverage() {
        // Brute-force: every column of the 67-wide layout belongs to at least one part.
        let s = PartitionScheme::smpl22();
        for c in 0..67 {
            assert!(s.parts.iter().any(|p| p.columns.contains(&c)), "column {c}");
        }
    }

    #[test]
    fn missing_column_zero_is_reported() {
        let mut s = PartitionScheme::smpl22();
        let root = s.parts.iter_mut().find(|p| p.part == PartId::Root).unwrap();
        root.columns.retain(|&c| c != 0);
        let msgs = s.validate(67).messages();
        assert!(msgs.contains(&"uncovered column 0".to_string()), "{msgs:?}");
    }

    #[test]
    fn unregistered_shared_column_is_reported() {
        let mut s = PartitionScheme::smpl22();
        s.parts.iter_mut().find(|p| p.part == PartId::Root).unwrap().columns.push(10);
        let msgs = s.validate(67).messages();
        assert!(msgs.contains(&"unregistered shared column 10".to_string()), "{msgs:?}");
    }

    #[test]
    fn split_places_value_at_mapped_position() {
        let mut f = Matrix::zeros(1, 67);
        f.set(0, 7, 7.5);
        let m = Motion::new(Layout::smpl22(), f).unwrap();
        let s = PartitionScheme::smpl22();
        let parts = split(&m, &s).unwrap();
        for (spec, pm) in s.parts.iter().zip(&parts) {
            if let Some(k) = spec.columns.iter().position(|&c| c == 7) {
                assert_eq!(pm.features.get(0, k), 7.5);
            }
        }
    }

    #[test]
    fn both_arms_carry_joint_nine() {
        let s = PartitionScheme::smpl22();
        let j9 = Layout::joint_columns(9);
        for part in [PartId::RightArm, PartId::LeftArm, PartId::Backbone] {
            let cols = &s.part(part).unwrap().columns;
            assert!(j9.iter().all(|c| cols.contains(c)), "{part}");
        }
    }

    #[test]
    fn shared_prediction_average() {
        let s = PartitionScheme::smpl22();
        let m = ramp_motion(2);
        let mut parts = split(&m, &s).unwrap();
        let c = Layout::joint_columns(9)[0];
        for (pm, v) in parts
            .iter_mut()
            .filter(|p| matches!(p.part, PartId::RightArm | PartId::LeftArm | PartId::Backbone))
            .zip([1.0, 2.0, 3.0])
        {
            let k = s.part(pm.part).unwrap().columns.iter().position(|&x| x == c).unwrap();
            pm.features.set(0, k, v);
        }
        let merged = merge(&parts, &s).unwrap();
        assert_eq!(merged.features().get(0, c), 2.0);
    }

    #[test]
    fn merge_rejects_frame_mismatch_and_missing_part() {
        let s = PartitionScheme::smpl22();
        let m = ramp_motion(3);
        let mut parts = split(&m, &s).unwrap();
        parts[1].features = parts[1].features.slice_rows(0, 2);
        assert!(matches!(merge(&parts, &s), Err(Error::Shape(_))));
        let mut parts = split(&m, &s).unwrap();
        parts.pop();
        assert!(matches!(merge(&parts, &s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scheme_text_round_trip() {
        let s = PartitionScheme::smpl22();
        let parsed = PartitionScheme::parse(&s.to_text(), Layout::smpl22()).unwrap();
        assert_eq!(parsed, s);
        assert!(PartitionScheme::parse("Tail: 1,2", Layout::smpl22()).is_err());
    }

    #[test]
    fn motion_rejects_bad_width() {
        assert!(Motion::new(Layout::smpl22(), Matrix::zeros(2, 66)).is_err());
        assert!(Layout::resolve("joints3d-v1", 66).is_err());
        assert_eq!(Layout::resolve("hml-263", 263).unwrap().width, 263);
    }
}
