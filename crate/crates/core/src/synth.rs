//! Synthetic highway traffic with labelled rare maneuvers.
//!
//! Every scenario is one target vehicle plus 3 to 8 neighbors sampled at
//! 10 Hz. Longitudinal motion is piecewise constant acceleration (constant
//! within each frame interval); lateral motion follows a closed-form profile
//! per maneuver kind. Scenarios of a dataset are laid out in disjoint time
//! blocks so they never interact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{TrajectoryPoint, VehicleTrack};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::{FRAME_DT, FRAME_RATE_HZ};

pub const LANE_WIDTH: f64 = 3.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CarFollow,
    LaneChange,
    CancelledLaneChange,
    SuddenBrake,
    ExitAccelerate,
}

impl ScenarioKind {
    pub const COMMON: [ScenarioKind; 2] = [ScenarioKind::CarFollow, ScenarioKind::LaneChange];
    pub const RARE: [ScenarioKind; 3] = [
        ScenarioKind::CancelledLaneChange,
        ScenarioKind::SuddenBrake,
        ScenarioKind::ExitAccelerate,
    ];

    pub fn is_rare(self) -> bool {
        Self::RARE.contains(&self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub duration_s: f64,
    pub lane_count: u32,
    pub initial_speed: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Overrides the drawn maneuver magnitude: brake deceleration (m/s²),
    /// exit acceleration (m/s²) or cancelled-lane-change excursion (m).
    #[serde(default)]
    pub magnitude: Option<f64>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            duration_s: 8.0,
            lane_count: 3,
            initial_speed: 20.0,
            noise_std: 0.05,
            seed,
            magnitude: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 8.0) {
            return Err(Error::Argument(format!("scenario duration {} s is below 8 s", self.duration_s)));
        }
        if self.lane_count < 2 {
            return Err(Error::Argument(format!("lane_count {} is below 2", self.lane_count)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Argument(format!("noise_std {} is negative", self.noise_std)));
        }
        if !(self.initial_speed.is_finite() && self.initial_speed >= 0.0) {
            return Err(Error::Argument(format!("initial_speed {} is invalid", self.initial_speed)));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * FRAME_RATE_HZ).round() as usize
    }
}

/// Constant-acceleration phases over a base speed.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalProfile {
    pub initial_speed: f64,
    /// `(start_frame, end_frame, accel)`: `accel` applies on intervals
    /// `[k, k+1)` with `start_frame <= k < end_frame`.
    pub phases: Vec<(usize, usize, f64)>,
}

impl LongitudinalProfile {
    pub fn constant(speed: f64) -> Self {
        LongitudinalProfile { initial_speed: speed, phases: Vec::new() }
    }

    fn accel_on(&self, k: usize) -> f64 {
        self.phases
            .iter()
            .filter(|(s, e, _)| *s <= k && k < *e)
            .map(|(_, _, a)| a)
            .sum()
    }

    /// Speed at each of `frames` samples.
    pub fn speeds(&self, frames: usize) -> Vec<f64> {
        let mut v = self.initial_speed;
        let mut out = Vec::with_capacity(frames);
        for k in 0..frames {
            out.push(v);
            v = (v + self.accel_on(k) * FRAME_DT).max(0.0);
        }
        out
    }

    /// Positions relative to the start, integrated exactly per frame.
    pub fn positions(&self, frames: usize) -> Vec<f64> {
        let mut y = 0.0;
        let mut v = self.initial_speed;
        let mut out = Vec::with_capacity(frames);
        for k in 0..frames {
            out.push(y);
            let mut a = self.accel_on(k);
            if v + a * FRAME_DT < 0.0 {
                a = -v / FRAME_DT;
            }
            y += v * FRAME_DT + 0.5 * a * FRAME_DT * FRAME_DT;
            v += a * FRAME_DT;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum LateralProfile {
    Hold,
    /// Logistic transition of `offset` meters centered at `center_s`.
    Sigmoid { offset: f64, center_s: f64, scale_s: f64 },
    /// `amplitude * sin²` excursion over `[start_s, start_s + duration_s]`.
    Excursion { amplitude: f64, start_s: f64, duration_s: f64 },
}

impl LateralProfile {
    fn offset_at(self, t: f64) -> f64 {
        match self {
            LateralProfile::Hold => 0.0,
            LateralProfile::Sigmoid { offset, center_s, scale_s } => offset / (1.0 + (-(t - center_s) / scale_s).exp()),
            LateralProfile::Excursion { amplitude, start_s, duration_s } => {
                if t <= start_s || t >= start_s + duration_s {
                    0.0
                } else {
                    amplitude * (std::f64::consts::PI * (t - start_s) / duration_s).sin().powi(2)
                }
            }
        }
    }
}

// 10%-90% of the logistic spans ~3 s.
const LANE_CHANGE_SCALE_S: f64 = 3.0 / (2.0 * 2.197_224_577_336_219_6);

/// One generated scene. Vehicle ids are local (`target_id` is 1), frames
/// start at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScenario {
    pub tracks: Vec<VehicleTrack>,
    pub target_id: i64,
    pub kind: ScenarioKind,
    pub rare: bool,
}

struct VehiclePlan {
    lane: u32,
    lateral_bias: f64,
    start_y: f64,
    profile: LongitudinalProfile,
    lateral: LateralProfile,
}

fn lane_center(lane: u32) -> f64 {
    (lane as f64 - 0.5) * LANE_WIDTH
}

fn lane_of(x: f64, lane_count: u32) -> i32 {
    ((x / LANE_WIDTH).floor() as i32 + 1).clamp(1, lane_count as i32)
}

fn pick_direction(rng: &mut impl Rng, lane: u32, lane_count: u32, prefer_right: bool) -> f64 {
    let left_ok = lane > 1;
    let right_ok = lane < lane_count;
    match (left_ok, right_ok) {
        (true, true) if prefer_right => 1.0,
        (true, true) => {
            if rng.random_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        }
        (false, _) => 1.0,
        (true, false) => -1.0,
    }
}

pub fn gen_scenario(spec: &ScenarioSpec) -> Result<GeneratedScenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = spec.frames();
    let v0 = spec.initial_speed;
    let lanes = spec.lane_count;
    let lane = rng.random_range(1..=lanes);
    let snap = |t: f64| (t * FRAME_RATE_HZ).round() as usize;

    let mut target = VehiclePlan {
        lane,
        lateral_bias: 0.0,
        start_y: 0.0,
        profile: LongitudinalProfile::constant(v0),
        lateral: LateralProfile::Hold,
    };
    let mut leader_brake: Option<(usize, usize, f64)> = None;

    match spec.kind {
        ScenarioKind::CarFollow => {}
        ScenarioKind::LaneChange => {
            let dir = pick_direction(&mut rng, lane, lanes, false);
            target.lateral = LateralProfile::Sigmoid {
                offset: dir * LANE_WIDTH,
                center_s: rng.random_range(1.0..7.0),
                scale_s: LANE_CHANGE_SCALE_S,
            };
        }
        ScenarioKind::CancelledLaneChange => {
            let dir = pick_direction(&mut rng, lane, lanes, false);
            let amplitude = spec.magnitude.unwrap_or_else(|| rng.random_range(1.0..1.5));
            target.lateral = LateralProfile::Excursion {
                amplitude: dir * amplitude,
                start_s: rng.random_range(1.5..3.5),
                duration_s: 3.0,
            };
        }
        ScenarioKind::SuddenBrake => {
            let decel = spec.magnitude.unwrap_or_else(|| rng.random_range(4.0..6.0));
            let start = snap(rng.random_range(3.2..5.5));
            let phase = (start, start + snap(1.5), -decel);
            target.profile.phases.push(phase);
            leader_brake = Some((start.saturating_sub(5), start.saturating_sub(5) + snap(1.5), -decel));
        }
        ScenarioKind::ExitAccelerate => {
            let dir = pick_direction(&mut rng, lane, lanes, true);
            let accel = spec.magnitude.unwrap_or(2.0);
            target.lateral = LateralProfile::Sigmoid {
                offset: dir * LANE_WIDTH,
                center_s: rng.random_range(3.5..5.0),
                scale_s: LANE_CHANGE_SCALE_S,
            };
            target.profile.phases.push((snap(rng.random_range(2.8..3.8)), frames, accel));
        }
    }

    let mut plans = vec![target];
    let n_neighbors = rng.random_range(3..=8usize);

    // Center-front leader, always present.
    let mut leader = VehiclePlan {
        lane,
        lateral_bias: rng.random_range(-0.2..0.2),
        start_y: rng.random_range(20.0..45.0),
        profile: LongitudinalProfile::constant(if spec.kind == ScenarioKind::CarFollow {
            v0
        } else {
            v0 + rng.random_range(-0.5..0.5)
        }),
        lateral: LateralProfile::Hold,
    };
    if let Some(phase) = leader_brake {
        leader.profile.phases.push(phase);
    }
    plans.push(leader);

    for side in [-1i64, 1] {
        let l = lane as i64 + side;
        if l >= 1 && l <= lanes as i64 && plans.len() < 1 + n_neighbors {
            plans.push(VehiclePlan {
                lane: l as u32,
                lateral_bias: rng.random_range(-0.2..0.2),
                start_y: rng.random_range(10.0..40.0),
                profile: LongitudinalProfile::constant(v0 + rng.random_range(-1.0..1.0)),
                lateral: LateralProfile::Hold,
            });
        }
    }
    while plans.len() < 1 + n_neighbors {
        plans.push(VehiclePlan {
            lane: rng.random_range(1..=lanes),
            lateral_bias: rng.random_range(-0.2..0.2),
            start_y: rng.random_range(-50.0..-8.0),
            profile: LongitudinalProfile::constant(v0 + rng.random_range(-2.0..2.0)),
            lateral: LateralProfile::Hold,
        });
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let mut tracks = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let ys = plan.profile.positions(frames);
        let points = ys
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let t = k as f64 * FRAME_DT;
                let x_clean = lane_center(plan.lane) + plan.lateral_bias + plan.lateral.offset_at(t);
                let (nx, ny) = if spec.noise_std > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                TrajectoryPoint {
                    frame: k as i64,
                    lateral: x_clean + nx,
                    longitudinal: plan.start_y + y + ny,
                    lane_id: lane_of(x_clean, lanes),
                }
            })
            .collect();
        tracks.push(VehicleTrack { vehicle_id: i as i64 + 1, points });
    }

    Ok(GeneratedScenario { tracks, target_id: 1, kind: spec.kind, rare: spec.kind.is_rare() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub rare_rate: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub lane_count: u32,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_examples: 2000,
            rare_rate: 0.05,
            seed: 0,
            noise_std: 0.05,
            lane_count: 3,
            speed_min: 15.0,
            speed_max: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLabel {
    pub vehicle_id: i64,
    pub kind: ScenarioKind,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub tracks: Vec<VehicleTrack>,
    /// One label per generated target, in scenario order.
    pub labels: Vec<TargetLabel>,
}

impl LabeledDataset {
    pub fn rare_flags(&self) -> BTreeMap<i64, bool> {
        self.labels.iter().map(|l| (l.vehicle_id, l.rare)).collect()
    }

    pub fn rare_count(&self) -> usize {
        self.labels.iter().filter(|l| l.rare).count()
    }
}

/// Spacing of vehicle ids between scenarios (target + up to 8 neighbors).
const IDS_PER_SCENARIO: i64 = 10;
/// Idle frames between consecutive scenario blocks.
const BLOCK_GAP_FRAMES: i64 = 20;

pub fn gen_dataset(n_examples: usize, rare_rate: f64, seed: u64) -> Result<LabeledDataset> {
    gen_dataset_with(&SynthConfig { n_examples, rare_rate, seed, ..SynthConfig::default() })
}

/// `round(rare_rate * n)` targets get a rare kind (uniform over the three),
/// the rest a common kind.
pub fn gen_dataset_with(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&cfg.rare_rate) {
        return Err(Error::Argument(format!("rare_rate {} outside [0, 1]", cfg.rare_rate)));
    }
    if !(cfg.speed_min <= cfg.speed_max && cfg.speed_min >= 0.0) {
        return Err(Error::Argument("speed range is empty or negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rare = (cfg.rare_rate * cfg.n_examples as f64).round() as usize;
    let mut rare_slots = vec![false; cfg.n_examples];
    for i in rand::seq::index::sample(&mut rng, cfg.n_examples, n_rare) {
        rare_slots[i] = true;
    }

    let mut tracks = Vec::new();
    let mut labels = Vec::with_capacity(cfg.n_examples);
    let mut frame_offset = 0i64;
    for (i, &rare) in rare_slots.iter().enumerate() {
        let kind = if rare {
            ScenarioKind::RARE[rng.random_range(0..ScenarioKind::RARE.len())]
        } else {
            ScenarioKind::COMMON[rng.random_range(0..ScenarioKind::COMMON.len())]
        };
        let spec = ScenarioSpec {
            kind,
            duration_s: 8.0,
            lane_count: cfg.lane_count,
            initial_speed: if cfg.speed_max > cfg.speed_min {
                rng.random_range(cfg.speed_min..cfg.speed_max)
            } else {
                cfg.speed_min
            },
            noise_std: cfg.noise_std,
            seed: rng.next_u64(),
            magnitude: None,
        };
        let scenario = gen_scenario(&spec)?;
        let id_base = i as i64 * IDS_PER_SCENARIO;
        for mut t in scenario.tracks {
            t.vehicle_id += id_base;
            for p in &mut t.points {
                p.frame += frame_offset;
            }
            tracks.push(t);
        }
        labels.push(TargetLabel { vehicle_id: id_base + scenario.target_id, kind, rare: scenario.rare });
        frame_offset += spec.frames() as i64 + BLOCK_GAP_FRAMES;
    }
    Ok(LabeledDataset { tracks, labels })
}

/// Writes tracks in the ingest schema (meters).
pub fn write_tracks_csv<W: Write>(tracks: &[VehicleTrack], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID"])?;
    for t in tracks {
        for p in &t.points {
            w.write_record(&[
                t.vehicle_id.to_string(),
                p.frame.to_string(),
                p.lateral.to_string(),
                p.longitudinal.to_string(),
                p.lane_id.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes `<csv_path>` and the `vehicle_id -> rare` sidecar at `flags_path`.
pub fn write_dataset(ds: &LabeledDataset, csv_path: &Path, flags_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tracks_csv(&ds.tracks, &mut buf)?;
    write_atomic(csv_path, &buf)?;
    write_atomic(flags_path, &serde_json::to_vec_pretty(&ds.rare_flags())?)
}

pub fn read_rare_flags(path: &Path) -> Result<BTreeMap<i64, bool>> {
    let bytes = crate::io::read_bytes(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
