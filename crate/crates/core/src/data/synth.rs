//! Deterministic synthetic event scenes: textured shapes sliding over a static
//! background, seen by an idealised event sensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{voxelize, DataError, Event, EventStream, Polarity, PseudoFrame, DEFAULT_WINDOW_US};
use crate::labels::ClassMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    /// Class 0 is the background; shapes draw from `1..num_classes`.
    pub num_classes: usize,
    pub window_us: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Sensor samples per time bin; each brightness change between samples emits an event.
    pub substeps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            timesteps: 20,
            num_classes: 4,
            window_us: DEFAULT_WINDOW_US,
            min_shapes: 1,
            max_shapes: 4,
            substeps: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(DataError::Invalid(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if self.width == 0 || self.height == 0 || self.width > 1 << 15 || self.height > 1 << 15 {
            return Err(DataError::Invalid(format!("unsupported size {}x{}", self.width, self.height)));
        }
        if self.timesteps == 0 || self.substeps == 0 || self.window_us < (self.timesteps * self.substeps) as u64 {
            return Err(DataError::Invalid("window too short for the requested time resolution".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(DataError::Invalid("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Rect,
    Disc,
    Diamond,
}

#[derive(Clone, Debug)]
struct Shape {
    outline: Outline,
    class: u8,
    radius: f64,
    /// Centre at the end of the window.
    end: (f64, f64),
    /// Displacement over the whole window.
    motion: (f64, f64),
    /// Stripe texture: direction (unit vector), period in pixels and phase.
    stripe: (f64, f64, f64, f64),
}

impl Shape {
    fn centre(&self, tau: f64) -> (f64, f64) {
        (
            self.end.0 - (1.0 - tau) * self.motion.0,
            self.end.1 - (1.0 - tau) * self.motion.1,
        )
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        let r = self.radius;
        match self.outline {
            Outline::Rect => dx.abs() <= r && dy.abs() <= 0.7 * r,
            Outline::Disc => dx * dx + dy * dy <= r * r,
            Outline::Diamond => dx.abs() + dy.abs() <= 1.2 * r,
        }
    }

    fn brightness(&self, dx: f64, dy: f64) -> f64 {
        let (ux, uy, period, phase) = self.stripe;
        let u = (dx * ux + dy * uy) / period + phase;
        if u.rem_euclid(1.0) < 0.5 {
            0.1
        } else {
            0.9
        }
    }
}

const BACKGROUND: f64 = 0.5;

/// Raw events plus ground truth for one window starting at time 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub events: EventStream,
    pub label: ClassMap,
    pub duration: u64,
    /// `(width, height)` of the simulated sensor.
    pub size: (usize, usize),
}

fn shapes(seed: u64, cfg: &SynthConfig) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let side = w.min(h);
    (0..count)
        .map(|_| {
            let outline = match rng.gen_range(0..3) {
                0 => Outline::Rect,
                1 => Outline::Disc,
                _ => Outline::Diamond,
            };
            let class = rng.gen_range(1..cfg.num_classes) as u8;
            let radius = rng.gen_range(0.1..0.22) * side;
            let end = (rng.gen_range(radius..w - radius), rng.gen_range(radius..h - radius));
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed = rng.gen_range(0.15..0.4) * side;
            // texture orientation and period depend on the class so classes are distinguishable
            let theta = class as f64 * 0.9;
            let period = 3.0 + (class as f64 % 4.0);
            Shape {
                outline,
                class,
                radius,
                end,
                motion: (speed * angle.cos(), speed * angle.sin()),
                stripe: (theta.cos(), theta.sin(), period, rng.gen_range(0.0..1.0)),
            }
        })
        .collect()
}

/// Brightness and class of every pixel at window fraction `tau`; later shapes
/// are drawn on top.
fn render(shapes: &[Shape], cfg: &SynthConfig, tau: f64) -> (Vec<f64>, Vec<u8>) {
    let mut bright = vec![BACKGROUND; cfg.width * cfg.height];
    let mut class = vec![0u8; cfg.width * cfg.height];
    for s in shapes {
        let (cx, cy) = s.centre(tau);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if s.contains(dx, dy) {
                    bright[y * cfg.width + x] = s.brightness(dx, dy);
                    class[y * cfg.width + x] = s.class;
                }
            }
        }
    }
    (bright, class)
}

/// Simulate the sensor over one window. Pure function of `(seed, cfg)`.
pub fn generate_synthetic_events(seed: u64, cfg: &SynthConfig) -> Result<SyntheticScene, DataError> {
    cfg.validate()?;
    let shapes = shapes(seed, cfg);
    let samples = cfg.timesteps * cfg.substeps;
    let d = cfg.window_us;
    let (mut prev, _) = render(&shapes, cfg, 0.0);
    let mut events = Vec::new();
    for j in 0..samples {
        let tau = (j + 1) as f64 / samples as f64;
        let (cur, _) = render(&shapes, cfg, tau);
        // centre of the sampling interval, always inside [0, D)
        let t = ((2 * j + 1) as u128 * d as u128 / (2 * samples) as u128) as u64;
        for (i, (&a, &b)) in prev.iter().zip(&cur).enumerate() {
            if a != b {
                let p = if b > a { Polarity::Positive } else { Polarity::Negative };
                events.push(Event::new(t, (i % cfg.width) as u16, (i / cfg.width) as u16, p));
            }
        }
        prev = cur;
    }
    let (_, labels) = render(&shapes, cfg, 1.0);
    Ok(SyntheticScene {
        events: EventStream::new(events),
        label: ClassMap::new(cfg.height, cfg.width, labels).expect("label size"),
        duration: d,
        size: (cfg.width, cfg.height),
    })
}

pub fn generate_synthetic_scene(seed: u64, cfg: &SynthConfig) -> Result<PseudoFrame, DataError> {
    let scene = generate_synthetic_events(seed, cfg)?;
    let spikes = voxelize(&scene.events, 0, scene.duration, scene.size, scene.size, cfg.timesteps)?;
    Ok(PseudoFrame {
        spikes,
        label: scene.label,
    })
}
