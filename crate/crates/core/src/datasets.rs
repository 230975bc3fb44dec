//! Feature ingestion, sample assembly, train/test splitting and the
//! synthetic corridor world.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GlnError, Result};
use crate::floorplan::{FloorPlan, LocationId, Split, VIEW_COUNT};
use crate::gln::MultiViewSample;
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"FTB1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub location: u32,
    pub view: u8,
    pub group: u32,
    pub values: Vec<f32>,
}

/// Per-(group, view) feature vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureTable {
    /// Validates that every group has exactly the four views, all at one location.
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut groups: BTreeMap<u32, (u32, [bool; VIEW_COUNT])> = BTreeMap::new();
        for r in &records {
            if r.values.len() != dim {
                return Err(GlnError::Data(format!(
                    "group {} view {}: {} values, expected {dim}",
                    r.group,
                    r.view,
                    r.values.len()
                )));
            }
            if r.view as usize >= VIEW_COUNT {
                return Err(GlnError::Data(format!(
                    "group {}: view index {} outside 0..{VIEW_COUNT}",
                    r.group, r.view
                )));
            }
            let entry = groups.entry(r.group).or_insert((r.location, [false; VIEW_COUNT]));
            if entry.0 != r.location {
                return Err(GlnError::Data(format!(
                    "group {} mixes locations {} and {}",
                    r.group, entry.0, r.location
                )));
            }
            if std::mem::replace(&mut entry.1[r.view as usize], true) {
                return Err(GlnError::Data(format!(
                    "duplicate record for group {} view {}",
                    r.group, r.view
                )));
            }
        }
        let incomplete: Vec<u32> = groups
            .iter()
            .filter(|(_, (_, v))| v.iter().any(|&x| !x))
            .map(|(&g, _)| g)
            .collect();
        if !incomplete.is_empty() {
            return Err(GlnError::Data(format!(
                "incomplete view groups (need {VIEW_COUNT} views): {incomplete:?}"
            )));
        }
        Ok(FeatureTable { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn group_count(&self) -> usize {
        self.records.len() / VIEW_COUNT
    }

    /// Assembles one sample per group, ordered by group id, views in
    /// front/behind/right/left order.
    pub fn samples(&self) -> Vec<MultiViewSample> {
        let mut groups: BTreeMap<u32, (u32, Matrix)> = BTreeMap::new();
        for r in &self.records {
            let entry = groups
                .entry(r.group)
                .or_insert_with(|| (r.location, Matrix::zeros(VIEW_COUNT, self.dim)));
            for (dst, &v) in entry.1.row_mut(r.view as usize).iter_mut().zip(&r.values) {
                *dst = v as f64;
            }
        }
        groups
            .into_iter()
            .map(|(group, (loc, views))| MultiViewSample {
                location: loc as LocationId,
                group,
                views,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.records.len() * (9 + 4 * self.dim));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.location.to_le_bytes());
            out.push(r.view);
            out.extend_from_slice(&r.group.to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != FEATURE_MAGIC {
            return Err(GlnError::Data("bad magic: not an FTB1 feature file".into()));
        }
        let count = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let rec = (|| -> Result<FeatureRecord> {
                let location = cur.u32()?;
                let view = cur.take(1)?[0];
                let group = cur.u32()?;
                let raw = cur.take(4 * dim)?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(FeatureRecord {
                    location,
                    view,
                    group,
                    values,
                })
            })()
            .map_err(|_| GlnError::Data(format!("truncated record {i} of {count}")))?;
            records.push(rec);
        }
        if cur.pos != bytes.len() {
            return Err(GlnError::Data(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - cur.pos
            )));
        }
        FeatureTable::new(dim, records)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("location,view,group");
        for i in 0..self.dim {
            let _ = write!(s, ",f{i}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{},{}", r.location, r.view, r.group);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| GlnError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[..3] != ["location", "view", "group"] {
            return Err(perr(1, "header must start with `location,view,group`".into()));
        }
        let dim = cols.len() - 3;
        let mut records = Vec::new();
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 3 {
                return Err(perr(idx + 1, format!("{} fields, expected {}", fields.len(), dim + 3)));
            }
            let bad = |f: &str| perr(idx + 1, format!("cannot parse `{f}`"));
            let location = fields[0].parse().map_err(|_| bad(fields[0]))?;
            let view = fields[1].parse().map_err(|_| bad(fields[1]))?;
            let group = fields[2].parse().map_err(|_| bad(fields[2]))?;
            let values = fields[3..]
                .iter()
                .map(|f| f.parse::<f32>().map_err(|_| bad(f)))
                .collect::<Result<Vec<_>>>()?;
            records.push(FeatureRecord {
                location,
                view,
                group,
                values,
            });
        }
        FeatureTable::new(dim, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_csv(path) {
            self.to_csv().into_bytes()
        } else {
            self.to_bytes()
        };
        fs::write(path, bytes).map_err(|e| GlnError::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| GlnError::Data("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Loads the binary `FTB1` format, or CSV when the extension is `.csv`.
pub fn load_features(path: &Path) -> Result<FeatureTable> {
    if is_csv(path) {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        FeatureTable::from_csv(&text, &path.display().to_string())
    } else {
        let bytes = fs::read(path).map_err(|e| GlnError::io(path, e))?;
        FeatureTable::from_bytes(&bytes)
    }
}

/// Checks every sample location against the plan.
pub fn check_locations(samples: &[MultiViewSample], plan: &FloorPlan) -> Result<()> {
    let k = plan.location_count();
    if let Some(s) = samples.iter().find(|s| s.location >= k) {
        return Err(GlnError::Data(format!(
            "group {} has location {} but the plan has {k} locations",
            s.group, s.location
        )));
    }
    Ok(())
}

/// Stratified split: within each location, `round(n·ratio)` samples (at
/// least one) go to train. Both halves are returned in group order.
pub fn standard_split(
    samples: &[MultiViewSample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<MultiViewSample>, Vec<MultiViewSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GlnError::Parameter(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_loc: BTreeMap<LocationId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_loc.entry(s.location).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; samples.len()];
    for (loc, mut idx) in by_loc {
        if idx.len() == 1 {
            warn!("location {loc} has a single sample; assigned to train");
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len());
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].group);
    for i in order {
        if in_train[i] {
            train.push(samples[i].clone());
        } else {
            test.push(samples[i].clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    fn tag(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

/// Explicit group-to-partition assignment (`train|val|test <group>` lines).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSplit {
    assignment: BTreeMap<u32, Part>,
}

#[derive(Debug, Clone, Default)]
pub struct Partitioned {
    pub train: Vec<MultiViewSample>,
    pub val: Vec<MultiViewSample>,
    pub test: Vec<MultiViewSample>,
}

impl SampleSplit {
    pub fn assign(&mut self, group: u32, part: Part) {
        self.assignment.insert(group, part);
    }

    pub fn part_of(&self, group: u32) -> Option<Part> {
        self.assignment.get(&group).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (g, p) in &self.assignment {
            let _ = writeln!(s, "{} {g}", p.tag());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut split = SampleSplit::default();
        for (idx, raw) in text.lines().enumerate() {
            let perr = |msg: String| GlnError::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(perr(format!("expected `train|val|test <group>`, got `{line}`")));
            }
            let part = match fields[0] {
                "train" => Part::Train,
                "val" => Part::Val,
                "test" => Part::Test,
                other => return Err(perr(format!("unknown partition `{other}`"))),
            };
            let group: u32 = fields[1]
                .parse()
                .map_err(|_| perr(format!("cannot parse group `{}`", fields[1])))?;
            if split.assignment.insert(group, part).is_some() {
                return Err(perr(format!("group {group} listed twice")));
            }
        }
        Ok(split)
    }

    /// Partitions samples exactly as listed; unlisted samples are dropped.
    pub fn apply(&self, samples: &[MultiViewSample]) -> Result<Partitioned> {
        let present: HashSet<u32> = samples.iter().map(|s| s.group).collect();
        let missing: Vec<u32> = self
            .assignment
            .keys()
            .filter(|g| !present.contains(g))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(GlnError::Data(format!("split lists unknown groups {missing:?}")));
        }
        let mut out = Partitioned::default();
        let mut dropped = 0usize;
        for s in samples {
            match self.part_of(s.group) {
                Some(Part::Train) => out.train.push(s.clone()),
                Some(Part::Val) => out.val.push(s.clone()),
                Some(Part::Test) => out.test.push(s.clone()),
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            warn!("{dropped} samples not listed in the split were ignored");
        }
        Ok(out)
    }
}

/// Train/test assignment from [`standard_split`], optionally carving a
/// validation set out of train with the same stratification.
pub fn standard_sample_split(
    samples: &[MultiViewSample],
    ratio: f64,
    val_ratio: Option<f64>,
    seed: u64,
) -> Result<SampleSplit> {
    let (train, test) = standard_split(samples, ratio, seed)?;
    let mut split = SampleSplit::default();
    for s in &test {
        split.assign(s.group, Part::Test);
    }
    match val_ratio {
        Some(v) => {
            let (tr, va) = standard_split(&train, 1.0 - v, seed.wrapping_add(1))?;
            tr.iter().for_each(|s| split.assign(s.group, Part::Train));
            va.iter().for_each(|s| split.assign(s.group, Part::Val));
        }
        None => train.iter().for_each(|s| split.assign(s.group, Part::Train)),
    }
    Ok(split)
}

/// Zero-shot assignment: seen-location samples split into train/val with
/// `train_ratio`, every unseen-location sample goes to test.
pub fn zero_shot_sample_split(
    samples: &[MultiViewSample],
    locations: &Split,
    train_ratio: f64,
    seed: u64,
) -> Result<SampleSplit> {
    let (seen, unseen): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| locations.is_seen(s.location));
    let mut split = SampleSplit::default();
    let (train, val) = standard_split(&seen, train_ratio, seed)?;
    train.iter().for_each(|s| split.assign(s.group, Part::Train));
    val.iter().for_each(|s| split.assign(s.group, Part::Val));
    unseen.iter().for_each(|s| split.assign(s.group, Part::Test));
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Corridor overlap ρ ∈ [0, 1): weight of the shared corridor-direction vector.
    pub overlap: f64,
    /// Standard deviation of per-entry Gaussian noise.
    pub noise: f64,
    pub samples_per_location: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 6,
            height: 10,
            overlap: 0.5,
            noise: 0.1,
            samples_per_location: 8,
            feature_dim: 128,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Identity vectors plus two directions per row and per column corridor.
    pub fn min_feature_dim(&self) -> usize {
        self.width * self.height + 2 * (self.width + self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(GlnError::Config("synthetic grid must be at least 2x2".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(GlnError::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(GlnError::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        if self.samples_per_location == 0 {
            return Err(GlnError::Config("samples_per_location must be positive".into()));
        }
        if self.feature_dim < self.min_feature_dim() {
            return Err(GlnError::Config(format!(
                "feature_dim {} too small; this grid needs at least {}",
                self.feature_dim,
                self.min_feature_dim()
            )));
        }
        Ok(())
    }
}

/// Location id of grid cell `(x, y)`.
pub fn grid_id(width: usize, x: usize, y: usize) -> LocationId {
    y * width + x
}

/// Builds a `width × height` grid plan with 1-meter spacing and four-view
/// features. Front/behind views look along the location's column corridor,
/// right/left views along its row corridor; parallel views on one corridor
/// share a direction vector.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(FloorPlan, FeatureTable)> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let k = w * h;
    let mut coords = Vec::with_capacity(k);
    let mut edges = Vec::with_capacity(2 * k);
    for y in 0..h {
        for x in 0..w {
            coords.push([x as f64, y as f64]);
            if x + 1 < w {
                edges.push((grid_id(w, x, y), grid_id(w, x + 1, y)));
            }
            if y + 1 < h {
                edges.push((grid_id(w, x, y), grid_id(w, x, y + 1)));
            }
        }
    }
    let plan = FloorPlan::new(coords, edges)?;

    // One-hot layout: [identities | column corridors (N,S) | row corridors (E,W)].
    let corridor_index = |x: usize, y: usize, view: usize| -> usize {
        match view {
            0 => k + 2 * x,
            1 => k + 2 * x + 1,
            2 => k + 2 * w + 2 * y,
            _ => k + 2 * w + 2 * y + 1,
        }
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| GlnError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spl = cfg.samples_per_location;
    let mut records = Vec::with_capacity(k * spl * VIEW_COUNT);
    for y in 0..h {
        for x in 0..w {
            let loc = grid_id(w, x, y);
            for s in 0..spl {
                let group = (loc * spl + s) as u32;
                for view in 0..VIEW_COUNT {
                    let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| noise.sample(&mut rng)).collect();
                    v[loc] += 1.0 - cfg.overlap;
                    v[corridor_index(x, y, view)] += cfg.overlap;
                    records.push(FeatureRecord {
                        location: loc as u32,
                        view: view as u8,
                        group,
                        values: v.into_iter().map(|f| f as f32).collect(),
                    });
                }
            }
        }
    }
    Ok((plan, FeatureTable::new(cfg.feature_dim, records)?))
}
