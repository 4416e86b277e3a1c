//! Trajectory records, NGSIM-style CSV ingest and example windowing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{FRAME_DT, FUTURE_FRAMES, HISTORY_FRAMES};

pub const FEET_TO_METERS: f64 = 0.3048;

/// One sampled position of a vehicle.
///
/// `lateral` is NGSIM `Local_X` (across the road, growing to the right) and
/// `longitudinal` is `Local_Y` (along the direction of travel), both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PointRepr", into = "PointRepr")]
pub struct TrajectoryPoint {
    pub frame: i64,
    pub lateral: f64,
    pub longitudinal: f64,
    pub lane_id: i32,
}

#[derive(Serialize, Deserialize)]
struct PointRepr(i64, f64, f64, i32);

impl From<PointRepr> for TrajectoryPoint {
    fn from(p: PointRepr) -> Self {
        TrajectoryPoint { frame: p.0, lateral: p.1, longitudinal: p.2, lane_id: p.3 }
    }
}

impl From<TrajectoryPoint> for PointRepr {
    fn from(p: TrajectoryPoint) -> Self {
        PointRepr(p.frame, p.lateral, p.longitudinal, p.lane_id)
    }
}

impl TrajectoryPoint {
    pub fn time(&self) -> f64 {
        self.frame as f64 * FRAME_DT
    }
}

/// A contiguous run of 10 Hz samples for one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub vehicle_id: i64,
    pub points: Vec<TrajectoryPoint>,
}

impl VehicleTrack {
    pub fn first_frame(&self) -> i64 {
        self.points[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.points[self.points.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_at(&self, frame: i64) -> Option<&TrajectoryPoint> {
        if self.points.is_empty() || frame < self.first_frame() || frame > self.last_frame() {
            return None;
        }
        self.points.get((frame - self.first_frame()) as usize)
    }

    pub fn covers(&self, from: i64, to: i64) -> bool {
        !self.points.is_empty() && self.first_frame() <= from && self.last_frame() >= to
    }

    /// Checks the 10 Hz contiguity and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Data(format!("vehicle {}: empty track", self.vehicle_id)));
        }
        for w in self.points.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::Data(format!(
                    "vehicle {}: frames {} and {} are not consecutive",
                    self.vehicle_id, w[0].frame, w[1].frame
                )));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !p.lateral.is_finite() || !p.longitudinal.is_finite()) {
            return Err(Error::Data(format!("vehicle {}: non-finite position at frame {}", self.vehicle_id, p.frame)));
        }
        Ok(())
    }
}

/// One prediction instance: 30 history frames ending at the prediction frame
/// (inclusive) and the 50 frames after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub target_id: i64,
    /// Frame index of the prediction time `T` (last history frame).
    pub t_frame: i64,
    pub history: Vec<TrajectoryPoint>,
    pub future: Vec<TrajectoryPoint>,
    /// Other vehicles with at least one frame inside the course window.
    pub scene_ids: Vec<i64>,
}

impl Example {
    pub fn prediction_time(&self) -> f64 {
        self.t_frame as f64 * FRAME_DT
    }

    /// History followed by future: the 80-frame course window.
    pub fn course(&self) -> Vec<TrajectoryPoint> {
        self.history.iter().chain(self.future.iter()).copied().collect()
    }

    pub fn first_frame(&self) -> i64 {
        self.t_frame - HISTORY_FRAMES as i64 + 1
    }

    pub fn last_frame(&self) -> i64 {
        self.t_frame + FUTURE_FRAMES as i64
    }

    pub fn validate(&self) -> Result<()> {
        if self.history.len() != HISTORY_FRAMES || self.future.len() != FUTURE_FRAMES {
            return Err(Error::Data(format!(
                "example of vehicle {} at frame {}: {} history / {} future frames",
                self.target_id,
                self.t_frame,
                self.history.len(),
                self.future.len()
            )));
        }
        let expected = self.first_frame();
        for (i, p) in self.history.iter().chain(self.future.iter()).enumerate() {
            if p.frame != expected + i as i64 {
                return Err(Error::Data(format!(
                    "example of vehicle {} at frame {}: frame {} out of place",
                    self.target_id, self.t_frame, p.frame
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    Meters,
    Feet,
}

impl LengthUnit {
    pub fn to_meters(self) -> f64 {
        match self {
            LengthUnit::Meters => 1.0,
            LengthUnit::Feet => FEET_TO_METERS,
        }
    }
}

/// Result of reading a trajectory table.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub tracks: Vec<VehicleTrack>,
    /// Line numbers (header is line 1) of rows dropped for non-finite values.
    pub rejected_rows: Vec<u64>,
}

const REQUIRED_COLUMNS: [&str; 5] = ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID"];

pub fn ingest_csv(path: &Path, unit: LengthUnit) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, unit)
}

/// Parses a table with columns `Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID`
/// (extra columns are ignored). Rows of one vehicle must have strictly
/// increasing `Frame_ID`; gaps split the vehicle into several tracks.
pub fn ingest_reader<R: Read>(reader: R, unit: LengthUnit) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))?;
    }
    let scale = unit.to_meters();

    let mut per_vehicle: BTreeMap<i64, Vec<TrajectoryPoint>> = BTreeMap::new();
    let mut rejected_rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| record.get(cols[k]).unwrap_or("");
        let vehicle_id = parse_int(field(0), line, REQUIRED_COLUMNS[0])?;
        let frame = parse_int(field(1), line, REQUIRED_COLUMNS[1])?;
        let lateral = parse_float(field(2), line, REQUIRED_COLUMNS[2])?;
        let longitudinal = parse_float(field(3), line, REQUIRED_COLUMNS[3])?;
        let lane_id = parse_int(field(4), line, REQUIRED_COLUMNS[4])? as i32;
        if !lateral.is_finite() || !longitudinal.is_finite() {
            rejected_rows.push(line);
            continue;
        }
        let points = per_vehicle.entry(vehicle_id).or_default();
        if let Some(last) = points.last() {
            if frame <= last.frame {
                return Err(Error::Data(format!(
                    "vehicle {vehicle_id}: Frame_ID {frame} on line {line} does not increase (previous {})",
                    last.frame
                )));
            }
        }
        points.push(TrajectoryPoint {
            frame,
            lateral: lateral * scale,
            longitudinal: longitudinal * scale,
            lane_id,
        });
    }

    let mut tracks = Vec::new();
    for (vehicle_id, points) in per_vehicle {
        tracks.extend(split_contiguous(vehicle_id, points));
    }
    Ok(Ingested { tracks, rejected_rows })
}

fn parse_int(s: &str, line: u64, col: &str) -> Result<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
        _ => Err(Error::Data(format!("line {line}: {col} value {s:?} is not an integer"))),
    }
}

fn parse_float(s: &str, line: u64, col: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}: {col} value {s:?} is not a number")))
}

/// Splits time-ordered points into maximal runs of consecutive frames.
pub fn split_contiguous(vehicle_id: i64, points: Vec<TrajectoryPoint>) -> Vec<VehicleTrack> {
    let mut out = Vec::new();
    let mut current: Vec<TrajectoryPoint> = Vec::new();
    for p in points {
        if let Some(last) = current.last() {
            if p.frame != last.frame + 1 {
                out.push(VehicleTrack { vehicle_id, points: std::mem::take(&mut current) });
            }
        }
        current.push(p);
    }
    if !current.is_empty() {
        out.push(VehicleTrack { vehicle_id, points: current });
    }
    out
}

const BUCKET_FRAMES: i64 = 100;

/// Lookup structure over a set of tracks: by vehicle id and by time.
#[derive(Debug)]
pub struct SceneIndex<'a> {
    tracks: &'a [VehicleTrack],
    by_vehicle: HashMap<i64, Vec<usize>>,
    by_bucket: HashMap<i64, Vec<usize>>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(tracks: &'a [VehicleTrack]) -> Self {
        let mut by_vehicle: HashMap<i64, Vec<usize>> = HashMap::new();
        let mut by_bucket: HashMap<i64, Vec<usize>> = HashMap::new();
        for (i, t) in tracks.iter().enumerate() {
            if t.is_empty() {
                continue;
            }
            by_vehicle.entry(t.vehicle_id).or_default().push(i);
            for b in t.first_frame().div_euclid(BUCKET_FRAMES)..=t.last_frame().div_euclid(BUCKET_FRAMES) {
                by_bucket.entry(b).or_default().push(i);
            }
        }
        SceneIndex { tracks, by_vehicle, by_bucket }
    }

    pub fn tracks(&self) -> &'a [VehicleTrack] {
        self.tracks
    }

    pub fn tracks_of(&self, vehicle_id: i64) -> impl Iterator<Item = &'a VehicleTrack> + '_ {
        let tracks = self.tracks;
        self.by_vehicle.get(&vehicle_id).into_iter().flatten().map(move |&i| &tracks[i])
    }

    /// Position of `vehicle_id` at `frame`, if any of its tracks covers it.
    pub fn point_at(&self, vehicle_id: i64, frame: i64) -> Option<&'a TrajectoryPoint> {
        self.by_vehicle
            .get(&vehicle_id)?
            .iter()
            .find_map(|&i| self.tracks[i].point_at(frame))
    }

    /// Whether one track of `vehicle_id` covers every frame in `[from, to]`.
    pub fn covers(&self, vehicle_id: i64, from: i64, to: i64) -> bool {
        self.by_vehicle
            .get(&vehicle_id)
            .is_some_and(|ix| ix.iter().any(|&i| self.tracks[i].covers(from, to)))
    }

    /// Sorted ids of vehicles with at least one frame in `[from, to]`.
    pub fn vehicles_in(&self, from: i64, to: i64) -> Vec<i64> {
        let mut ids = BTreeSet::new();
        for b in from.div_euclid(BUCKET_FRAMES)..=to.div_euclid(BUCKET_FRAMES) {
            if let Some(ix) = self.by_bucket.get(&b) {
                for &i in ix {
                    let t = &self.tracks[i];
                    if t.first_frame() <= to && t.last_frame() >= from {
                        ids.insert(t.vehicle_id);
                    }
                }
            }
        }
        ids.into_iter().collect()
    }
}

/// Slices every track into examples, `stride` frames apart.
pub fn window_examples(tracks: &[VehicleTrack], stride: usize) -> Result<Vec<Example>> {
    window_examples_for(tracks, stride, None)
}

/// As [`window_examples`], but only vehicles in `targets` (when given) become
/// prediction targets; all tracks still count as scene context.
pub fn window_examples_for(
    tracks: &[VehicleTrack],
    stride: usize,
    targets: Option<&BTreeSet<i64>>,
) -> Result<Vec<Example>> {
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    let index = SceneIndex::new(tracks);
    let mut order: Vec<&VehicleTrack> = tracks
        .iter()
        .filter(|t| targets.is_none_or(|s| s.contains(&t.vehicle_id)))
        .collect();
    order.sort_by_key(|t| (t.vehicle_id, t.points.first().map(|p| p.frame)));

    let span = HISTORY_FRAMES + FUTURE_FRAMES;
    let mut out = Vec::new();
    for track in order {
        if track.len() < span {
            continue;
        }
        let mut start = 0;
        while start + span <= track.len() {
            let history = track.points[start..start + HISTORY_FRAMES].to_vec();
            let future = track.points[start + HISTORY_FRAMES..start + span].to_vec();
            let t_frame = history[HISTORY_FRAMES - 1].frame;
            let scene_ids = index
                .vehicles_in(history[0].frame, future[FUTURE_FRAMES - 1].frame)
                .into_iter()
                .filter(|&id| id != track.vehicle_id)
                .collect();
            out.push(Example { target_id: track.vehicle_id, t_frame, history, future, scene_ids });
            start += stride;
        }
    }
    Ok(out)
}

/// Disjoint train/evaluation index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

/// Seeded shuffle split; `|eval| = round(eval_fraction * n)`, both sides sorted.
pub fn split_dataset(n_examples: usize, eval_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if n_examples < 2 {
        return Err(Error::Argument(format!("need at least 2 examples to split, got {n_examples}")));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Argument(format!("eval_fraction must lie in (0, 1), got {eval_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n_examples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = (eval_fraction * n_examples as f64).round() as usize;
    let mut eval_indices = idx[..n_eval].to_vec();
    let mut train_indices = idx[n_eval..].to_vec();
    eval_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(DatasetSplit { train_indices, eval_indices })
}
