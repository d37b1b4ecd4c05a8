use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Stripes,
    Checker,
    Noise,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Flat,
        Background::Stripes,
        Background::Checker,
        Background::Noise,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Linear,
    Sinusoidal,
    Bounce,
}

/// Fidelity tiers of the coarse render.
///
/// `L0` is a gray silhouette on a flat neutral background, `L1` adds shape
/// outlines and `L2` additionally fills sprites with desaturated base colours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coarseness {
    L0,
    L1,
    L2,
}

impl Coarseness {
    pub const ALL: [Coarseness; 3] = [Coarseness::L0, Coarseness::L1, Coarseness::L2];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L0" => Some(Coarseness::L0),
            "L1" => Some(Coarseness::L1),
            "L2" => Some(Coarseness::L2),
            _ => None,
        }
    }
}

/// Which corpus family a scene belongs to. The two families draw from
/// disjoint palette sets and the real family adds per-sprite texture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleFamily {
    Synthetic,
    Real,
}

/// Sprite motion. Positions are in pixels, `(x, y)` with `y` pointing down;
/// pixel `(row, col)` has its centre at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Sinusoidal only: peak offset perpendicular to the velocity.
    #[serde(default)]
    pub amplitude: f64,
    /// Sinusoidal only: period in frames.
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_period() -> f64 {
    8.0
}

impl Trajectory {
    pub fn linear(start: [f64; 2], velocity: [f64; 2]) -> Self {
        Self {
            kind: TrajectoryKind::Linear,
            start,
            velocity,
            amplitude: 0.0,
            period: default_period(),
        }
    }

    /// Centre at `frame`. `radius` and the frame size only matter for
    /// bouncing sprites, which reflect off the walls.
    pub fn center_at(&self, frame: usize, radius: f64, width: usize, height: usize) -> [f64; 2] {
        let k = frame as f64;
        let [x0, y0] = self.start;
        let [vx, vy] = self.velocity;
        match self.kind {
            TrajectoryKind::Linear => [x0 + vx * k, y0 + vy * k],
            TrajectoryKind::Sinusoidal => {
                let speed = (vx * vx + vy * vy).sqrt();
                let (nx, ny) = if speed > 1e-9 {
                    (-vy / speed, vx / speed)
                } else {
                    (0.0, 1.0)
                };
                let phase = (2.0 * PI * k / self.period.max(1e-6)).sin() * self.amplitude;
                [x0 + vx * k + nx * phase, y0 + vy * k + ny * phase]
            }
            TrajectoryKind::Bounce => [
                fold(x0 + vx * k, radius, width as f64 - radius),
                fold(y0 + vy * k, radius, height as f64 - radius),
            ],
        }
    }
}

/// Reflect `p` into `[lo, hi]` (triangle wave).
fn fold(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return 0.5 * (lo + hi);
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    /// Hue in cycles, `[0, 1)`.
    pub hue: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    #[serde(default = "default_value")]
    pub value: f64,
    /// Diameter as a fraction of frame height, `(0, 0.5]`.
    pub size: f64,
    pub trajectory: Trajectory,
}

fn default_saturation() -> f64 {
    0.85
}

fn default_value() -> f64 {
    0.9
}

impl Sprite {
    pub fn radius_px(&self, height: usize) -> f64 {
        0.5 * self.size * height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub background: Background,
    pub palette: u32,
    pub style: StyleFamily,
    pub sprites: Vec<Sprite>,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub coarseness: Coarseness,
}

pub const MAX_SPRITES: usize = 3;

impl SceneSpec {
    /// Centre of sprite `i` at `frame`.
    pub fn center(&self, sprite: usize, frame: usize) -> [f64; 2] {
        let s = &self.sprites[sprite];
        s.trajectory
            .center_at(frame, s.radius_px(self.height), self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |reason: String| Err(SynthError::InvalidSpec(reason));
        if self.sprites.is_empty() || self.sprites.len() > MAX_SPRITES {
            return invalid(format!(
                "sprite count {} outside [1, {MAX_SPRITES}]",
                self.sprites.len()
            ));
        }
        if self.frame_count < 2 {
            return invalid(format!("frame_count {} < 2", self.frame_count));
        }
        if self.height == 0 || self.width == 0 {
            return invalid("zero resolution".into());
        }
        if self.palette as usize >= super::render::PALETTES.len() {
            return invalid(format!("unknown palette {}", self.palette));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size > 0.0 && s.size <= 0.5) {
                return invalid(format!("sprite {i}: size {} outside (0, 0.5]", s.size));
            }
            if !(0.0..1.0).contains(&s.hue) {
                return invalid(format!("sprite {i}: hue {} outside [0, 1)", s.hue));
            }
            if !(0.0..=1.0).contains(&s.saturation) || !(0.0..=1.0).contains(&s.value) {
                return invalid(format!("sprite {i}: saturation/value outside [0, 1]"));
            }
            let values = [
                s.trajectory.start[0],
                s.trajectory.start[1],
                s.trajectory.velocity[0],
                s.trajectory.velocity[1],
                s.trajectory.amplitude,
                s.trajectory.period,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return invalid(format!("sprite {i}: non-finite trajectory parameter"));
            }
            if !self.partially_inside(i, 0) {
                return invalid(format!("sprite {i}: fully outside the frame at t=0"));
            }
            let inside = (0..self.frame_count)
                .filter(|&k| self.partially_inside(i, k))
                .count();
            if (inside as f64) < 0.9 * self.frame_count as f64 {
                return invalid(format!(
                    "sprite {i}: inside the frame for only {inside}/{} frames",
                    self.frame_count
                ));
            }
        }
        Ok(())
    }

    fn partially_inside(&self, sprite: usize, frame: usize) -> bool {
        let r = self.sprites[sprite].radius_px(self.height);
        let [x, y] = self.center(sprite, frame);
        x + r > 0.0 && x - r < self.width as f64 && y + r > 0.0 && y - r < self.height as f64
    }
}

/// Hard-edged occupancy test shared by every fidelity so that fine and
/// coarse renders have identical sprite masks.
pub fn shape_contains(shape: Shape, center: [f64; 2], radius: f64, px: f64, py: f64) -> bool {
    let dx = px - center[0];
    let dy = py - center[1];
    match shape {
        Shape::Circle => dx * dx + dy * dy <= radius * radius,
        Shape::Square => {
            let half = 0.85 * radius;
            dx.abs() <= half && dy.abs() <= half
        }
        Shape::Triangle => {
            // Upward equilateral triangle whose centroid is `center`.
            let r = 1.2 * radius;
            let s3 = 3f64.sqrt() * 0.5;
            let a = (0.0, -r);
            let b = (-s3 * r, 0.5 * r);
            let c = (s3 * r, 0.5 * r);
            let p = (dx, dy);
            let edge = |u: (f64, f64), v: (f64, f64)| {
                (v.0 - u.0) * (p.1 - u.1) - (v.1 - u.1) * (p.0 - u.0)
            };
            let e1 = edge(a, b);
            let e2 = edge(b, c);
            let e3 = edge(c, a);
            (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0) || (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sprite(traj: Trajectory) -> SceneSpec {
        SceneSpec {
            seed: 1,
            background: Background::Flat,
            palette: 0,
            style: StyleFamily::Synthetic,
            sprites: vec![Sprite {
                shape: Shape::Circle,
                hue: 0.0,
                saturation: 0.85,
                value: 0.9,
                size: 0.25,
                trajectory: traj,
            }],
            frame_count: 8,
            height: 32,
            width: 32,
            coarseness: Coarseness::L0,
        }
    }

    #[test]
    fn bounce_stays_inside_walls() {
        let t = Trajectory {
            kind: TrajectoryKind::Bounce,
            start: [10.0, 16.0],
            velocity: [7.0, -5.0],
            amplitude: 0.0,
            period: 8.0,
        };
        for k in 0..64 {
            let [x, y] = t.center_at(k, 4.0, 32, 32);
            assert!((4.0..=28.0).contains(&x), "x={x} at {k}");
            assert!((4.0..=28.0).contains(&y), "y={y} at {k}");
        }
    }

    #[test]
    fn sinusoid_oscillates_perpendicular_to_velocity() {
        let t = Trajectory {
            kind: TrajectoryKind::Sinusoidal,
            start: [4.0, 16.0],
            velocity: [3.0, 0.0],
            amplitude: 2.0,
            period: 4.0,
        };
        let [x1, y1] = t.center_at(1, 4.0, 32, 32);
        assert!((x1 - 7.0).abs() < 1e-12);
        assert!((y1 - 18.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_sprite_outside_at_start() {
        let spec = one_sprite(Trajectory::linear([-20.0, 16.0], [0.0, 0.0]));
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("outside the frame at t=0"), "{err}");
    }

    #[test]
    fn rejects_oversized_sprite() {
        let mut spec = one_sprite(Trajectory::linear([16.0, 16.0], [0.0, 0.0]));
        spec.sprites[0].size = 0.6;
        assert!(spec.validate().unwrap_err().to_string().contains("size"));
    }

    #[test]
    fn rejects_sprite_leaving_too_early() {
        let spec = one_sprite(Trajectory::linear([16.0, 16.0], [9.0, 0.0]));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn triangle_centroid_is_center() {
        let c = [16.0, 16.0];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for i in 0..400 {
            for j in 0..400 {
                let px = 6.0 + j as f64 * 0.05;
                let py = 6.0 + i as f64 * 0.05;
                if shape_contains(Shape::Triangle, c, 4.0, px, py) {
                    sx += px;
                    sy += py;
                    n += 1.0;
                }
            }
        }
        assert!((sx / n - 16.0).abs() < 0.05);
        assert!((sy / n - 16.0).abs() < 0.05);
    }
}
