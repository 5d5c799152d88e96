use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SynthError;

/// The eight trajectory families a condition can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionClass {
    Line,
    ArcLeft,
    ArcRight,
    Zigzag,
    Spiral,
    StopGo,
    Sine,
    FigureEight,
}

impl MotionClass {
    pub const ALL: [MotionClass; 8] = [
        MotionClass::Line,
        MotionClass::ArcLeft,
        MotionClass::ArcRight,
        MotionClass::Zigzag,
        MotionClass::Spiral,
        MotionClass::StopGo,
        MotionClass::Sine,
        MotionClass::FigureEight,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self, SynthError> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(SynthError::UnknownClass(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Line => "line",
            MotionClass::ArcLeft => "arc-left",
            MotionClass::ArcRight => "arc-right",
            MotionClass::Zigzag => "zigzag",
            MotionClass::Spiral => "spiral",
            MotionClass::StopGo => "stop-go",
            MotionClass::Sine => "sine",
            MotionClass::FigureEight => "figure-eight",
        }
    }

    /// Sampling ranges for `[speed, curvature, amplitude]`.
    ///
    /// Parameters a family ignores have a degenerate range at zero.
    pub fn param_ranges(self) -> [(f64, f64); 3] {
        match self {
            MotionClass::Line => [(0.06, 0.14), (0.0, 0.0), (0.0, 0.0)],
            MotionClass::ArcLeft | MotionClass::ArcRight => [(0.06, 0.14), (0.6, 1.6), (0.0, 0.0)],
            MotionClass::Zigzag => [(0.06, 0.14), (0.3, 0.6), (0.2, 0.5)],
            MotionClass::Spiral => [(0.02, 0.06), (0.25, 0.45), (0.3, 0.6)],
            MotionClass::StopGo => [(0.06, 0.14), (0.5, 0.9), (0.0, 0.0)],
            MotionClass::Sine => [(0.06, 0.14), (0.3, 0.7), (0.2, 0.5)],
            MotionClass::FigureEight => [(0.0, 0.0), (0.25, 0.45), (0.6, 1.0)],
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SynthError::UnknownClassName(s.to_string()))
    }
}

/// Continuous parameters of a condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub speed: f64,
    pub curvature: f64,
    pub amplitude: f64,
}

impl MotionParams {
    pub fn as_array(&self) -> [f64; 3] {
        [self.speed, self.curvature, self.amplitude]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            speed: a[0],
            curvature: a[1],
            amplitude: a[2],
        }
    }
}

/// Number of quantization bins per continuous parameter.
pub const PARAM_BINS: u32 = 8;
/// Token vocabulary: eight class tokens then eight bins for each parameter.
pub const VOCAB_SIZE: usize = 8 + 3 * PARAM_BINS as usize;
/// Tokens per condition: class plus one per parameter.
pub const TOKENS_PER_CONDITION: usize = 4;

/// Symbolic description of a motion: what the generator and both networks
/// are conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub class: MotionClass,
    pub params: MotionParams,
}

impl Condition {
    pub fn new(class: MotionClass, params: MotionParams) -> Result<Self, SynthError> {
        if !params.as_array().iter().all(|v| v.is_finite()) {
            return Err(SynthError::InvalidParams(class));
        }
        Ok(Self { class, params })
    }

    pub fn from_class_id(class_id: u32, params: [f64; 3]) -> Result<Self, SynthError> {
        Self::new(
            MotionClass::from_id(class_id)?,
            MotionParams::from_array(params),
        )
    }

    pub fn class_id(&self) -> u32 {
        self.class.id()
    }

    /// Whether every parameter lies inside the family's sampling range.
    pub fn in_range(&self) -> bool {
        self.class
            .param_ranges()
            .iter()
            .zip(self.params.as_array())
            .all(|(&(lo, hi), v)| v >= lo && v <= hi)
    }

    /// Token rendering `[class, speed bin, curvature bin, amplitude bin]`;
    /// parameter tokens are offset so every slot has its own vocabulary.
    pub fn tokens(&self) -> [u32; TOKENS_PER_CONDITION] {
        let mut out = [self.class_id(), 0, 0, 0];
        for (slot, (&(lo, hi), v)) in self
            .class
            .param_ranges()
            .iter()
            .zip(self.params.as_array())
            .enumerate()
        {
            let bin = if hi > lo {
                let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                ((u * PARAM_BINS as f64) as u32).min(PARAM_BINS - 1)
            } else {
                0
            };
            out[slot + 1] = 8 + slot as u32 * PARAM_BINS + bin;
        }
        out
    }

    /// Parses `class:speed,curvature,amplitude`, e.g. `arc-left:0.1,1.0,0`.
    pub fn parse(spec: &str) -> Result<Self, SynthError> {
        let bad = || SynthError::BadConditionSpec(spec.to_string());
        let (class, rest) = spec.split_once(':').ok_or_else(bad)?;
        let class: MotionClass = class.trim().parse()?;
        let vals: Vec<f64> = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let arr: [f64; 3] = vals.try_into().map_err(|_| bad())?;
        Self::new(class, MotionParams::from_array(arr))
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.params;
        write!(
            f,
            "{}:{},{},{}",
            self.class, p.speed, p.curvature, p.amplitude
        )
    }
}

/// Closed-form position of a family at continuous time `t` (frame units),
/// starting at the origin heading along +x.
pub fn position(cond: &Condition, t: f64) -> [f64; 2] {
    let MotionParams {
        speed: v,
        curvature: k,
        amplitude: a,
    } = cond.params;
    match cond.class {
        MotionClass::Line => [v * t, 0.0],
        MotionClass::ArcLeft | MotionClass::ArcRight => {
            let side = if cond.class == MotionClass::ArcLeft {
                1.0
            } else {
                -1.0
            };
            if k.abs() < 1e-12 {
                return [v * t, 0.0];
            }
            let theta = k * v * t;
            [theta.sin() / k, side * (1.0 - theta.cos()) / k]
        }
        MotionClass::Zigzag => [v * t, a * triangle_wave(k * t)],
        MotionClass::Spiral => {
            let r = a * (1.0 + v * t);
            let phi = k * t;
            [r * phi.sin(), a - r * phi.cos()]
        }
        MotionClass::StopGo => {
            if k.abs() < 1e-12 {
                return [v * t, 0.0];
            }
            [v * (t - (k * t).sin() / k), 0.0]
        }
        MotionClass::Sine => [v * t, a * (k * t).sin()],
        MotionClass::FigureEight => {
            let phi = k * t;
            [a * phi.sin(), 0.5 * a * (2.0 * phi).sin()]
        }
    }
}

/// Closed-form velocity `d position / dt`.
pub fn velocity(cond: &Condition, t: f64) -> [f64; 2] {
    let MotionParams {
        speed: v,
        curvature: k,
        amplitude: a,
    } = cond.params;
    match cond.class {
        MotionClass::Line => [v, 0.0],
        MotionClass::ArcLeft | MotionClass::ArcRight => {
            let side = if cond.class == MotionClass::ArcLeft {
                1.0
            } else {
                -1.0
            };
            let theta = k * v * t;
            [v * theta.cos(), side * v * theta.sin()]
        }
        MotionClass::Zigzag => [v, a * k * triangle_slope(k * t)],
        MotionClass::Spiral => {
            let r = a * (1.0 + v * t);
            let dr = a * v;
            let phi = k * t;
            [
                dr * phi.sin() + r * k * phi.cos(),
                -dr * phi.cos() + r * k * phi.sin(),
            ]
        }
        MotionClass::StopGo => [v * (1.0 - (k * t).cos()), 0.0],
        MotionClass::Sine => [v, a * k * (k * t).cos()],
        MotionClass::FigureEight => {
            let phi = k * t;
            [a * k * phi.cos(), a * k * (2.0 * phi).cos()]
        }
    }
}

/// Period-2π triangle wave in `[-1, 1]` with `tri(0) = 0`, rising first.
fn triangle_wave(x: f64) -> f64 {
    let u = (x / TAU + 0.25).rem_euclid(1.0);
    1.0 - 4.0 * (u - 0.5).abs()
}

fn triangle_slope(x: f64) -> f64 {
    let u = (x / TAU + 0.25).rem_euclid(1.0);
    if u < 0.5 {
        2.0 / PI
    } else {
        -2.0 / PI
    }
}
