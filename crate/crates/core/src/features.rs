//! Scene factors, window partitioning and the per-segment feature block.
//!
//! Each segment contributes 26 values in this order:
//!
//! | dims  | content                                                    |
//! |-------|------------------------------------------------------------|
//! | 0-9   | velocity (lateral, longitudinal) of TV, LF, CF, RF, OT mean |
//! | 10-19 | acceleration, same layout                                  |
//! | 20-22 | longitudinal gap TV to LF, CF, RF                          |
//! | 23-25 | longitudinal relative velocity `v_TV - v` for LF, CF, RF   |
//!
//! Dimension `26 * j + k` is feature `k` of segment `j`.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Example, SceneIndex, TrajectoryPoint, VehicleTrack};
use crate::error::{Error, Result};
use crate::io::{decode_framed, encode_framed, read_bytes, take_f64s, write_atomic};
use crate::{FRAME_DT, FRAME_RATE_HZ, FUTURE_FRAMES, HISTORY_FRAMES};

pub const FEATURES_PER_SEGMENT: usize = 26;
/// Raw gap assigned to a missing front vehicle.
pub const MISSING_GAP_M: f64 = 200.0;
/// Longitudinal radius around the target for "other" scene vehicles.
pub const OTHER_RADIUS_M: f64 = 60.0;
pub const STD_FLOOR: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; FEATURES_PER_SEGMENT] = [
    "tv_vlat", "tv_vlong", "lf_vlat", "lf_vlong", "cf_vlat", "cf_vlong", "rf_vlat", "rf_vlong", "ot_vlat", "ot_vlong",
    "tv_alat", "tv_along", "lf_alat", "lf_along", "cf_alat", "cf_along", "rf_alat", "rf_along", "ot_alat", "ot_along",
    "gap_lf", "gap_cf", "gap_rf", "dv_lf", "dv_cf", "dv_rf",
];

/// Observation window (`X`) or full course (`Z`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    X,
    Z,
}

impl Scope {
    pub fn window_frames(self) -> usize {
        match self {
            Scope::X => HISTORY_FRAMES,
            Scope::Z => HISTORY_FRAMES + FUTURE_FRAMES,
        }
    }

    /// Inclusive frame bounds of the window for `example`.
    pub fn frame_bounds(self, example: &Example) -> (i64, i64) {
        match self {
            Scope::X => (example.first_frame(), example.t_frame),
            Scope::Z => (example.first_frame(), example.last_frame()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::X => "x",
            Scope::Z => "z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionScheme {
    /// Fixed number of segments.
    FixSegNum(u32),
    /// Fixed segment length in seconds.
    FixSegLen(f64),
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::FixSegNum(5)
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::FixSegNum(k) => write!(f, "fixsegnum:{k}"),
            PartitionScheme::FixSegLen(s) => write!(f, "fixseglen:{s}"),
        }
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad partition scheme {s:?}, expected fixsegnum:<count> or fixseglen:<seconds>"));
        let (mode, kappa) = s.split_once(':').ok_or_else(bad)?;
        match mode.trim().to_ascii_lowercase().as_str() {
            "fixsegnum" => {
                let k: u32 = kappa.trim().parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(PartitionScheme::FixSegNum(k))
            }
            "fixseglen" => {
                let k: f64 = kappa.trim().parse().map_err(|_| bad())?;
                if !(k > 0.0 && k.is_finite()) {
                    return Err(bad());
                }
                Ok(PartitionScheme::FixSegLen(k))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for PartitionScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartitionScheme> for String {
    fn from(p: PartitionScheme) -> String {
        p.to_string()
    }
}

/// Splits `window_frames` frames into ordered, non-overlapping ranges that
/// tile the window.
///
/// `FixSegNum(k)` gives `k` segments whose sizes differ by at most one;
/// `FixSegLen(s)` gives segments of `round(10 s)` frames with a shorter final
/// remainder.
pub fn partition(window_frames: usize, scheme: PartitionScheme) -> Result<Vec<Range<usize>>> {
    match scheme {
        PartitionScheme::FixSegNum(k) => {
            let k = k as usize;
            if k == 0 || k > window_frames {
                return Err(Error::Argument(format!("FixSegNum({k}) on a {window_frames}-frame window")));
            }
            Ok((0..k).map(|j| j * window_frames / k..(j + 1) * window_frames / k).collect())
        }
        PartitionScheme::FixSegLen(secs) => {
            let len = (secs * FRAME_RATE_HZ).round();
            if !(len >= 1.0) || len as usize > window_frames {
                return Err(Error::Argument(format!("FixSegLen({secs}) on a {window_frames}-frame window")));
            }
            let len = len as usize;
            Ok((0..window_frames.div_ceil(len))
                .map(|j| j * len..((j + 1) * len).min(window_frames))
                .collect())
        }
    }
}

pub fn segment_count(scope: Scope, scheme: PartitionScheme) -> Result<usize> {
    Ok(partition(scope.window_frames(), scheme)?.len())
}

/// Front neighbors and remaining scene vehicles of a target at time `T`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneFactors {
    pub lf_id: Option<i64>,
    pub cf_id: Option<i64>,
    pub rf_id: Option<i64>,
    pub ot_ids: Vec<i64>,
}

/// Picks CF/LF/RF as the nearest vehicle strictly ahead at `T` in the
/// target's lane, lane - 1 and lane + 1. A chosen vehicle that does not cover
/// the whole `scope` window leaves its slot empty. OT collects every other
/// scene vehicle present at `T` within ±60 m longitudinally.
pub fn assign_scene_factors(example: &Example, index: &SceneIndex<'_>, scope: Scope) -> SceneFactors {
    let tv = example.history[HISTORY_FRAMES - 1];
    let t = example.t_frame;
    let (from, to) = scope.frame_bounds(example);

    let mut nearest: [Option<(f64, i64)>; 3] = [None; 3];
    let mut present = Vec::new();
    for &id in &example.scene_ids {
        if id == example.target_id {
            continue;
        }
        let Some(p) = index.point_at(id, t) else { continue };
        present.push((id, p.longitudinal));
        let gap = p.longitudinal - tv.longitudinal;
        if gap <= 0.0 {
            continue;
        }
        let slot = match p.lane_id - tv.lane_id {
            -1 => 0,
            0 => 1,
            1 => 2,
            _ => continue,
        };
        if nearest[slot].is_none_or(|(g, _)| gap < g) {
            nearest[slot] = Some((gap, id));
        }
    }
    let keep = |s: Option<(f64, i64)>| s.map(|(_, id)| id).filter(|&id| index.covers(id, from, to));
    let (lf_id, cf_id, rf_id) = (keep(nearest[0]), keep(nearest[1]), keep(nearest[2]));
    let chosen = [lf_id, cf_id, rf_id];
    let ot_ids = present
        .into_iter()
        .filter(|(id, y)| !chosen.contains(&Some(*id)) && (y - tv.longitudinal).abs() <= OTHER_RADIUS_M)
        .map(|(id, _)| id)
        .collect();
    SceneFactors { lf_id, cf_id, rf_id, ot_ids }
}

/// Central-difference derivative with one-sided ends.
fn derivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|k| {
                if k == 0 {
                    (values[1] - values[0]) / FRAME_DT
                } else if k == n - 1 {
                    (values[n - 1] - values[n - 2]) / FRAME_DT
                } else {
                    (values[k + 1] - values[k - 1]) / (2.0 * FRAME_DT)
                }
            })
            .collect(),
    }
}

/// Per-frame kinematics of one vehicle over a contiguous run of frames.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub first_frame: i64,
    pub lat: Vec<f64>,
    pub long: Vec<f64>,
    pub v_lat: Vec<f64>,
    pub v_long: Vec<f64>,
    pub a_lat: Vec<f64>,
    pub a_long: Vec<f64>,
}

impl Kinematics {
    pub fn from_points(points: &[TrajectoryPoint]) -> Self {
        let lat: Vec<f64> = points.iter().map(|p| p.lateral).collect();
        let long: Vec<f64> = points.iter().map(|p| p.longitudinal).collect();
        let v_lat = derivative(&lat);
        let v_long = derivative(&long);
        let a_lat = derivative(&v_lat);
        let a_long = derivative(&v_long);
        Kinematics { first_frame: points[0].frame, lat, long, v_lat, v_long, a_lat, a_long }
    }

    fn len(&self) -> usize {
        self.lat.len()
    }

    /// Local indices of the frames `[from, to)` this run covers.
    fn local(&self, from: i64, to: i64) -> Range<usize> {
        let lo = (from - self.first_frame).clamp(0, self.len() as i64) as usize;
        let hi = (to - self.first_frame).clamp(0, self.len() as i64) as usize;
        lo..hi.max(lo)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Target and neighbor kinematics over one scope window.
#[derive(Debug, Clone)]
pub struct WindowKinematics {
    pub first_frame: i64,
    pub target: Kinematics,
    /// LF, CF, RF in that order.
    pub fronts: [Option<Kinematics>; 3],
    /// Runs of every OT vehicle with at least two frames in the window.
    pub others: Vec<Vec<Kinematics>>,
}

impl WindowKinematics {
    pub fn build(example: &Example, factors: &SceneFactors, index: &SceneIndex<'_>, scope: Scope) -> Self {
        let (from, to) = scope.frame_bounds(example);
        let course = example.course();
        let target = Kinematics::from_points(&course[..scope.window_frames()]);
        let front = |id: Option<i64>| {
            let id = id?;
            let track = index_track_covering(index, id, from, to)?;
            let lo = (from - track.first_frame()) as usize;
            let hi = (to - track.first_frame()) as usize;
            Some(Kinematics::from_points(&track.points[lo..=hi]))
        };
        let fronts = [front(factors.lf_id), front(factors.cf_id), front(factors.rf_id)];
        let others = factors
            .ot_ids
            .iter()
            .map(|&id| {
                index
                    .tracks_of(id)
                    .filter(|t| t.first_frame() <= to && t.last_frame() >= from)
                    .filter_map(|t| {
                        let lo = (from.max(t.first_frame()) - t.first_frame()) as usize;
                        let hi = (to.min(t.last_frame()) - t.first_frame()) as usize;
                        (hi > lo).then(|| Kinematics::from_points(&t.points[lo..=hi]))
                    })
                    .collect::<Vec<_>>()
            })
            .filter(|runs| !runs.is_empty())
            .collect();
        WindowKinematics { first_frame: from, target, fronts, others }
    }
}

fn index_track_covering<'a>(index: &SceneIndex<'a>, id: i64, from: i64, to: i64) -> Option<&'a VehicleTrack> {
    index.tracks_of(id).find(|t| t.covers(from, to))
}

/// The 26 features of one segment plus which of them were imputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentFeatures {
    pub values: [f64; FEATURES_PER_SEGMENT],
    /// `false` where a missing factor was imputed.
    pub mask: [bool; FEATURES_PER_SEGMENT],
}

/// Features of the window-local frames `frames`.
pub fn segment_features(window: &WindowKinematics, frames: Range<usize>) -> SegmentFeatures {
    let mut values = [0.0; FEATURES_PER_SEGMENT];
    let mut mask = [true; FEATURES_PER_SEGMENT];
    let tv = &window.target;
    let r = frames.clone();
    let tv_vlat = mean(&tv.v_lat[r.clone()]);
    let tv_vlong = mean(&tv.v_long[r.clone()]);
    values[0] = tv_vlat;
    values[1] = tv_vlong;
    values[10] = mean(&tv.a_lat[r.clone()]);
    values[11] = mean(&tv.a_long[r.clone()]);

    for (slot, front) in window.fronts.iter().enumerate() {
        let (v, a, gap, dv) = (2 + 2 * slot, 12 + 2 * slot, 20 + slot, 23 + slot);
        match front {
            Some(k) => {
                values[v] = mean(&k.v_lat[r.clone()]);
                values[v + 1] = mean(&k.v_long[r.clone()]);
                values[a] = mean(&k.a_lat[r.clone()]);
                values[a + 1] = mean(&k.a_long[r.clone()]);
                let gaps: Vec<f64> = r.clone().map(|i| k.long[i] - tv.long[i]).collect();
                values[gap] = mean(&gaps);
                let dvs: Vec<f64> = r.clone().map(|i| tv.v_long[i] - k.v_long[i]).collect();
                values[dv] = mean(&dvs);
            }
            None => {
                values[v] = tv_vlat;
                values[v + 1] = tv_vlong;
                values[a] = 0.0;
                values[a + 1] = 0.0;
                values[gap] = MISSING_GAP_M;
                values[dv] = 0.0;
                for d in [v, v + 1, a, a + 1, gap, dv] {
                    mask[d] = false;
                }
            }
        }
    }

    // OT: mean over vehicles of each vehicle's own segment mean.
    let seg_from = window.first_frame + frames.start as i64;
    let seg_to = window.first_frame + frames.end as i64;
    let mut per_vehicle = Vec::new();
    for runs in &window.others {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for k in runs {
            for i in k.local(seg_from, seg_to) {
                acc[0] += k.v_lat[i];
                acc[1] += k.v_long[i];
                acc[2] += k.a_lat[i];
                acc[3] += k.a_long[i];
                n += 1;
            }
        }
        if n > 0 {
            per_vehicle.push(acc.map(|s| s / n as f64));
        }
    }
    if per_vehicle.is_empty() {
        values[8] = tv_vlat;
        values[9] = tv_vlong;
        values[18] = 0.0;
        values[19] = 0.0;
        for d in [8, 9, 18, 19] {
            mask[d] = false;
        }
    } else {
        let m = per_vehicle.len() as f64;
        for (c, d) in [8, 9, 18, 19].into_iter().enumerate() {
            values[d] = per_vehicle.iter().map(|v| v[c]).sum::<f64>() / m;
        }
    }
    SegmentFeatures { values, mask }
}

/// Concatenated segment blocks for one example and scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub scope: Scope,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn extract_feature_vector(
    example: &Example,
    scope: Scope,
    scheme: PartitionScheme,
    index: &SceneIndex<'_>,
) -> Result<FeatureVector> {
    let segments = partition(scope.window_frames(), scheme)?;
    let factors = assign_scene_factors(example, index, scope);
    let window = WindowKinematics::build(example, &factors, index, scope);
    let mut values = Vec::with_capacity(segments.len() * FEATURES_PER_SEGMENT);
    let mut mask = Vec::with_capacity(values.capacity());
    for seg in segments {
        let f = segment_features(&window, seg);
        values.extend_from_slice(&f.values);
        mask.extend_from_slice(&f.mask);
    }
    Ok(FeatureVector { scope, values, mask })
}

pub fn extract_all(
    examples: &[Example],
    tracks: &[VehicleTrack],
    scope: Scope,
    scheme: PartitionScheme,
) -> Result<Vec<FeatureVector>> {
    let index = SceneIndex::new(tracks);
    examples.iter().map(|e| extract_feature_vector(e, scope, scheme, &index)).collect()
}

/// Per-dimension affine standardization fit on observed (non-imputed) entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per dimension; std is floored
    /// at [`STD_FLOOR`].
    pub fn fit(features: &[FeatureVector]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Argument(format!("standardizer needs at least 2 vectors, got {}", features.len())));
        }
        let dim = features[0].dim();
        if let Some(f) = features.iter().find(|f| f.dim() != dim || f.mask.len() != dim) {
            return Err(Error::Argument(format!("feature length {} differs from {dim}", f.dim())));
        }
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        for d in 0..dim {
            let observed: Vec<f64> = features.iter().filter(|f| f.mask[d]).map(|f| f.values[d]).collect();
            if observed.is_empty() {
                return Err(Error::Data(format!(
                    "standardizer: dimension {d} ({}) has no observed entries",
                    dimension_name(d)
                )));
            }
            let m = mean_of(&observed);
            let var = observed.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / observed.len() as f64;
            mean[d] = m;
            std[d] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std`, with imputed entries set to exactly 0.
    pub fn apply(&self, v: &FeatureVector) -> Result<Vec<f64>> {
        if v.dim() != self.dim() {
            return Err(Error::Config(format!("feature dimension {} does not match standardizer {}", v.dim(), self.dim())));
        }
        Ok((0..v.dim())
            .map(|d| if v.mask[d] { (v.values[d] - self.mean[d]) / self.std[d] } else { 0.0 })
            .collect())
    }
}

/// Mean with a second correction pass, so that standardized data averages to
/// zero tightly.
fn mean_of(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    m + xs.iter().map(|x| x - m).sum::<f64>() / n
}

pub fn dimension_name(d: usize) -> String {
    format!("seg{}.{}", d / FEATURES_PER_SEGMENT, FEATURE_NAMES[d % FEATURES_PER_SEGMENT])
}

pub const FEATURE_MAGIC: &str = "TRAJMINE-FEAT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub scope: Scope,
    pub scheme: PartitionScheme,
    pub segments: usize,
    pub dim: usize,
    pub rows: usize,
    pub dimension_order: Vec<String>,
    pub config_hash: String,
}

/// Row-major feature vectors of one scope, as stored between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub scope: Scope,
    pub scheme: PartitionScheme,
    pub rows: Vec<FeatureVector>,
    pub config_hash: String,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, FeatureVector::dim)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.dim();
        let header = FeatureHeader {
            scope: self.scope,
            scheme: self.scheme,
            segments: dim / FEATURES_PER_SEGMENT,
            dim,
            rows: self.rows.len(),
            dimension_order: (0..dim).map(dimension_name).collect(),
            config_hash: self.config_hash.clone(),
        };
        let values: Vec<f64> = self.rows.iter().flat_map(|r| r.values.iter().copied()).collect();
        let mask: Vec<u8> = self.rows.iter().flat_map(|r| r.mask.iter().map(|&m| m as u8)).collect();
        encode_framed(FEATURE_MAGIC, &header, &values, &mask)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, rest): (FeatureHeader, _) = decode_framed(FEATURE_MAGIC, bytes)?;
        let (values, mask) = take_f64s(rest, h.rows * h.dim)?;
        if mask.len() != h.rows * h.dim {
            return Err(Error::Schema(format!("{FEATURE_MAGIC}: mask holds {} bytes, expected {}", mask.len(), h.rows * h.dim)));
        }
        let rows = (0..h.rows)
            .map(|i| FeatureVector {
                scope: h.scope,
                values: values[i * h.dim..(i + 1) * h.dim].to_vec(),
                mask: mask[i * h.dim..(i + 1) * h.dim].iter().map(|&b| b != 0).collect(),
            })
            .collect();
        Ok(FeatureMatrix { scope: h.scope, scheme: h.scheme, rows, config_hash: h.config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}
