//! Synthetic walkers on the COCO-18 layout. Coordinates are generated in
//! normalized image units (`[-1, 1]`, y pointing down) and emitted in pixels.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::tracks::{PoseTrack, Provenance};

/// Standing pose in body-height units, feet at the origin.
const CANONICAL: [(f64, f64); 18] = [
    (0.0, -0.93),   // nose
    (0.0, -0.82),   // neck
    (-0.11, -0.80), // right shoulder
    (-0.14, -0.64), // right elbow
    (-0.15, -0.49), // right wrist
    (0.11, -0.80),  // left shoulder
    (0.14, -0.64),  // left elbow
    (0.15, -0.49),  // left wrist
    (-0.07, -0.50), // right hip
    (-0.08, -0.27), // right knee
    (-0.08, -0.03), // right ankle
    (0.07, -0.50),  // left hip
    (0.08, -0.27),  // left knee
    (0.08, -0.03),  // left ankle
    (-0.025, -0.955),
    (-0.05, -0.94),
    (0.025, -0.955),
    (0.05, -0.94),
];

const UPPER_BODY: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 14, 15, 16, 17];
const NOISE_STD: f64 = 0.002;
const NOISE_CLIP: f64 = 0.004;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Vertical collapse to the ground.
    Fall,
    /// Sudden velocity and cadence burst.
    Run,
    /// Motion stops dead, then the person jumps sideways.
    FreezeTeleport,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Fall => "fall",
            AnomalyKind::Run => "run",
            AnomalyKind::FreezeTeleport => "freeze_teleport",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub joints: usize,
    pub width: f64,
    pub height: f64,
    /// Bound on any joint's per-frame displacement in normal tracks.
    pub max_step: f64,
    /// Range of person heights in normalized units.
    pub person_height: (f64, f64),
    /// Fixed anomaly onset; by default drawn from `[frames/4, frames/2)`.
    pub onset: Option<usize>,
    /// Anomaly families, assigned round-robin.
    pub kinds: Vec<AnomalyKind>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 60,
            joints: 18,
            width: 640.0,
            height: 480.0,
            max_step: 0.08,
            person_height: (1.1, 1.3),
            onset: None,
            kinds: vec![
                AnomalyKind::Fall,
                AnomalyKind::Run,
                AnomalyKind::FreezeTeleport,
            ],
        }
    }
}

/// Per-track walking parameters.
struct Walker {
    height: f64,
    ground: f64,
    x0: f64,
    velocity: f64,
    omega: f64,
    phase: f64,
    arm: f64,
    leg: f64,
    lift: f64,
    bob: f64,
}

impl Walker {
    fn draw(rng: &mut Rng, (h_lo, h_hi): (f64, f64)) -> Self {
        let direction = if rng.uniform(0.0, 1.0) < 0.5 {
            -1.0
        } else {
            1.0
        };
        Self {
            height: rng.uniform(h_lo, h_hi),
            ground: rng.uniform(0.6, 0.8),
            x0: rng.uniform(-0.5, 0.5),
            velocity: direction * rng.uniform(0.002, 0.006),
            omega: 2.0 * PI / rng.uniform(20.0, 28.0),
            phase: rng.uniform(0.0, 2.0 * PI),
            arm: rng.uniform(0.06, 0.10),
            leg: rng.uniform(0.07, 0.10),
            lift: rng.uniform(0.02, 0.03),
            bob: rng.uniform(0.004, 0.008),
        }
    }

    /// Pose at gait phase `theta`, horizontal position `x`, with amplitude
    /// factor `amp` and forward lean `lean` of the upper body.
    fn pose(&self, joints: usize, theta: f64, x: f64, amp: f64, lean: f64) -> Vec<[f64; 2]> {
        let s = theta.sin();
        let (arm, leg, lift) = (amp * self.arm, amp * self.leg, amp * self.lift);
        (0..joints)
            .map(|j| {
                let (cx, cy) = CANONICAL[j];
                let (mut dx, mut dy) = match j {
                    3 => (0.5 * arm * s, 0.0),
                    4 => (arm * s, 0.0),
                    6 => (-0.5 * arm * s, 0.0),
                    7 => (-arm * s, 0.0),
                    9 => (-0.5 * leg * s, -0.5 * lift * s.max(0.0)),
                    10 => (-leg * s, -lift * s.max(0.0)),
                    12 => (0.5 * leg * s, -0.5 * lift * (-s).max(0.0)),
                    13 => (leg * s, -lift * (-s).max(0.0)),
                    _ => (0.0, 0.0),
                };
                if UPPER_BODY.contains(&j) {
                    dx += lean;
                }
                dy += self.bob * (2.0 * theta).cos();
                [
                    x + self.height * (cx + dx),
                    self.ground + self.height * (cy + dy),
                ]
            })
            .collect()
    }

    /// Lying on the ground, head pointing along `dir`, feet at `x`.
    fn lying(&self, joints: usize, x: f64, dir: f64) -> Vec<[f64; 2]> {
        (0..joints)
            .map(|j| {
                let (cx, cy) = CANONICAL[j];
                [
                    x + dir * self.height * (-cy) * 0.95,
                    self.ground + 0.1 * self.height * cx,
                ]
            })
            .collect()
    }
}

fn jitter(rng: &mut Rng) -> f64 {
    (NOISE_STD * rng.normal()).clamp(-NOISE_CLIP, NOISE_CLIP)
}

fn noisy(rng: &mut Rng, pose: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pose.into_iter()
        .map(|[x, y]| [x + jitter(rng), y + jitter(rng)])
        .collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.joints > CANONICAL.len() {
            return Err(Error::Invalid(format!(
                "synthetic joints must be in 1..=18, got {}",
                self.joints
            )));
        }
        if self.frames == 0 {
            return Err(Error::Invalid(
                "synthetic tracks need at least one frame".into(),
            ));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Invalid("image dims must be positive".into()));
        }
        let (lo, hi) = self.person_height;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Invalid(
                "person_height must be an increasing positive range".into(),
            ));
        }
        if self.kinds.is_empty() {
            return Err(Error::Invalid(
                "at least one anomaly kind is required".into(),
            ));
        }
        Ok(())
    }

    /// Normalized coordinates to a pixel-unit track.
    fn emit(
        &self,
        video: String,
        poses: Vec<Vec<[f64; 2]>>,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> PoseTrack {
        let (w, h) = (self.width, self.height);
        PoseTrack {
            video,
            person: 0,
            start_frame: 0,
            width: w,
            height: h,
            frames: poses
                .into_iter()
                .map(|p| {
                    p.into_iter()
                        .map(|[x, y]| [(x + 1.0) / 2.0 * w, (y + 1.0) / 2.0 * h, 1.0])
                        .collect()
                })
                .collect(),
            frame_ids: None,
            labels: Some(labels),
            provenance: Some(provenance),
        }
    }

    /// `n` walking tracks named `{prefix}-NNNN`.
    pub fn normal(&self, rng: &mut Rng, n: usize, prefix: &str) -> Result<Vec<PoseTrack>> {
        self.validate()?;
        Ok((0..n)
            .map(|i| {
                let seed = rng.next_u64();
                let mut r = Rng::new(seed);
                let w = Walker::draw(&mut r, self.person_height);
                let poses = (0..self.frames)
                    .map(|t| {
                        let t = t as f64;
                        let p = w.pose(
                            self.joints,
                            w.phase + w.omega * t,
                            w.x0 + w.velocity * t,
                            1.0,
                            0.0,
                        );
                        noisy(&mut r, p)
                    })
                    .collect();
                let prov = Provenance {
                    family: "normal".into(),
                    seed,
                    onset: None,
                };
                self.emit(
                    format!("{prefix}-{i:04}"),
                    poses,
                    vec![0; self.frames],
                    prov,
                )
            })
            .collect())
    }

    /// `n` tracks that walk normally until an onset, then turn anomalous.
    /// Families cycle through `kinds`.
    pub fn anomalous(&self, rng: &mut Rng, n: usize, prefix: &str) -> Result<Vec<PoseTrack>> {
        self.validate()?;
        Ok((0..n)
            .map(|i| {
                let seed = rng.next_u64();
                let kind = self.kinds[i % self.kinds.len()];
                let mut r = Rng::new(seed);
                let w = Walker::draw(&mut r, self.person_height);
                let onset = match self.onset {
                    Some(o) => o.min(self.frames - 1),
                    None => self.frames / 4 + r.below((self.frames / 4).max(1)),
                };
                let (poses, labels) = self.anomaly(kind, &w, onset, &mut r);
                let prov = Provenance {
                    family: kind.name().into(),
                    seed,
                    onset: Some(onset),
                };
                self.emit(format!("{prefix}-{i:04}"), poses, labels, prov)
            })
            .collect())
    }

    fn anomaly(
        &self,
        kind: AnomalyKind,
        w: &Walker,
        onset: usize,
        r: &mut Rng,
    ) -> (Vec<Vec<[f64; 2]>>, Vec<u8>) {
        let v = self.joints;
        let o = onset as f64;
        let mut poses = Vec::with_capacity(self.frames);
        let mut labels = vec![0u8; self.frames];
        let walk = |t: f64| w.pose(v, w.phase + w.omega * t, w.x0 + w.velocity * t, 1.0, 0.0);
        match kind {
            AnomalyKind::Fall => {
                let duration = 6.0 + r.below(4) as f64;
                let x_o = w.x0 + w.velocity * o;
                let standing = walk(o);
                let dir = if x_o > 0.0 { -1.0 } else { 1.0 };
                let lying = w.lying(v, x_o, dir);
                for t in 0..self.frames {
                    let tf = t as f64;
                    let pose = if t < onset {
                        walk(tf)
                    } else {
                        let u = ((tf - o + 1.0) / duration).min(1.0);
                        let p = u * u * (3.0 - 2.0 * u);
                        standing
                            .iter()
                            .zip(&lying)
                            .map(|(a, b)| [a[0] + p * (b[0] - a[0]), a[1] + p * (b[1] - a[1])])
                            .collect()
                    };
                    poses.push(noisy(r, pose));
                }
                labels[onset..].fill(1);
            }
            AnomalyKind::Run => {
                let speed = w.velocity.signum() * r.uniform(0.03, 0.045);
                let cadence = r.uniform(2.0, 2.5);
                let lean = 0.08 * w.velocity.signum();
                for t in 0..self.frames {
                    let tf = t as f64;
                    let pose = if t < onset {
                        walk(tf)
                    } else {
                        let dt = tf - o;
                        let theta = w.phase + w.omega * (o + cadence * dt);
                        let x = w.x0 + w.velocity * o + speed * dt;
                        w.pose(v, theta, x, 1.8, lean)
                    };
                    poses.push(noisy(r, pose));
                }
                labels[onset..].fill(1);
            }
            AnomalyKind::FreezeTeleport => {
                let freeze = 12 + r.below(9);
                let jump = if r.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 } * r.uniform(0.4, 0.6);
                let mut frozen: Option<Vec<[f64; 2]>> = None;
                for t in 0..self.frames {
                    let pose = if t < onset {
                        noisy(r, walk(t as f64))
                    } else if t < onset + freeze {
                        frozen.get_or_insert_with(|| noisy(r, walk(o))).clone()
                    } else {
                        let resumed = (t - freeze) as f64;
                        let mut p = walk(resumed);
                        p.iter_mut().for_each(|q| q[0] += jump);
                        noisy(r, p)
                    };
                    poses.push(pose);
                }
                let end = (onset + freeze + 2).min(self.frames);
                labels[onset..end].fill(1);
            }
        }
        (poses, labels)
    }
}

/// Walking tracks with default settings at the given length and joint count.
pub fn synth_normal(
    rng: &mut Rng,
    n_tracks: usize,
    frames: usize,
    joints: usize,
) -> Result<Vec<PoseTrack>> {
    SynthConfig {
        frames,
        joints,
        ..SynthConfig::default()
    }
    .normal(rng, n_tracks, "normal")
}

/// Anomalous tracks with default settings, families cycling fall, run, freeze.
pub fn synth_anomalous(
    rng: &mut Rng,
    n_tracks: usize,
    frames: usize,
    joints: usize,
) -> Result<Vec<PoseTrack>> {
    SynthConfig {
        frames,
        joints,
        ..SynthConfig::default()
    }
    .anomalous(rng, n_tracks, "anomalous")
}
