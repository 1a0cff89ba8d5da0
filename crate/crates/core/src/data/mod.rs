//! Synthetic video corpora, the latent tokenizer and on-disk formats.

pub mod io;
pub mod tokenizer;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdtError};
use crate::VideoClip;

pub use io::{export_frames, read_vclip, write_vclip, ClipData};
pub use tokenizer::Tokenizer;

/// Per-clip generator: stream `index` of a ChaCha8 generator keyed by `seed`.
pub fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Position along one axis of a point moving at constant velocity inside
/// `[lo, hi]` with elastic reflections at both ends.
pub fn reflect(start: f64, velocity: f64, time: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (start - lo + velocity * time).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    /// Centre `(x, y)` in pixels at frame 0.
    pub pos: [f64; 2],
    /// Pixels per frame.
    pub vel: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

impl Ball {
    /// Centre at frame `f` inside a `width x height` box.
    pub fn center_at(&self, f: usize, width: usize, height: usize) -> [f64; 2] {
        let r = self.radius;
        [
            reflect(self.pos[0], self.vel[0], f as f64, r, width as f64 - r),
            reflect(self.pos[1], self.vel[1], f as f64, r, height as f64 - r),
        ]
    }
}

/// Anti-aliased disc coverage of the pixel whose centre is `(px, py)`.
fn disc_coverage(px: f64, py: f64, center: [f64; 2], radius: f64) -> f64 {
    let d = ((px - center[0]).powi(2) + (py - center[1]).powi(2)).sqrt();
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

/// Fraction of the unit pixel `[px - .5, px + .5]^2` covered by the
/// axis-aligned square of side `side` centred at `center`.
fn square_coverage(px: f64, py: f64, center: [f64; 2], side: f64) -> f64 {
    let overlap = |p: f64, c: f64| {
        let lo = (p - 0.5).max(c - side / 2.0);
        let hi = (p + 0.5).min(c + side / 2.0);
        (hi - lo).max(0.0)
    };
    overlap(px, center[0]) * overlap(py, center[1])
}

fn paint(
    frame: &mut ndarray::ArrayViewMut3<f64>,
    color: [f64; 3],
    coverage: impl Fn(f64, f64) -> f64,
) {
    let (h, w, _) = frame.dim();
    for i in 0..h {
        for j in 0..w {
            let a = coverage(j as f64 + 0.5, i as f64 + 0.5);
            if a > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut frame[[i, j, c]];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// 1 or 2.
    pub balls: usize,
    pub radius: f64,
    pub max_speed: f64,
    /// Share of two-ball clips set up on a head-on course.
    pub head_on_fraction: f64,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            frames: 6,
            height: 16,
            width: 16,
            balls: 2,
            radius: 2.5,
            max_speed: 1.5,
            head_on_fraction: 0.5,
        }
    }
}

impl BallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(VdtError::Geometry(format!(
                "frames must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(VdtError::Geometry("clips need at least one frame".into()));
        }
        if !(1..=2).contains(&self.balls) {
            return Err(VdtError::Geometry(format!(
                "{} balls; 1 or 2 supported",
                self.balls
            )));
        }
        let side = self.height.min(self.width) as f64;
        // two balls must fit side by side with a gap
        if !(self.radius > 0.0) || 2.0 * self.balls as f64 * self.radius + 1.0 > side {
            return Err(VdtError::Geometry(format!(
                "radius {} does not fit in {side} px",
                self.radius
            )));
        }
        if !(self.max_speed >= 0.0) || !(0.0..=1.0).contains(&self.head_on_fraction) {
            return Err(VdtError::Geometry(
                "speed must be >= 0 and head_on_fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

const BALL_COLORS: [[f64; 3]; 2] = [[1.0, 0.2, 0.2], [0.2, 0.4, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct BallClip {
    pub video: VideoClip,
    pub balls: Vec<Ball>,
    /// `centers[f][b]`.
    pub centers: Vec<Vec<[f64; 2]>>,
    /// Whether the two balls touch in any frame.
    pub collision: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BouncingBallDataset {
    pub config: BallConfig,
    pub seed: u64,
    pub clips: Vec<BallClip>,
}

impl BouncingBallDataset {
    pub fn videos(&self) -> Vec<VideoClip> {
        self.clips.iter().map(|c| c.video.clone()).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.clips.iter().map(|c| c.collision).collect()
    }
}

/// Whether any frame has the two centres within the sum of the radii.
pub fn touches(centers: &[Vec<[f64; 2]>], balls: &[Ball]) -> bool {
    if balls.len() < 2 {
        return false;
    }
    let reach = balls[0].radius + balls[1].radius;
    centers.iter().any(|c| {
        let d = ((c[0][0] - c[1][0]).powi(2) + (c[0][1] - c[1][1]).powi(2)).sqrt();
        d <= reach
    })
}

/// Draw `frames` frames of the given balls on a black background.
pub fn render_balls(
    balls: &[Ball],
    frames: usize,
    height: usize,
    width: usize,
) -> (VideoClip, Vec<Vec<[f64; 2]>>) {
    let mut video = Array4::zeros((frames, height, width, 3));
    let mut centers = Vec::with_capacity(frames);
    for (f, mut frame) in video.outer_iter_mut().enumerate() {
        let cs: Vec<[f64; 2]> = balls
            .iter()
            .map(|b| b.center_at(f, width, height))
            .collect();
        for (b, c) in balls.iter().zip(&cs) {
            paint(&mut frame, b.color, |x, y| {
                disc_coverage(x, y, *c, b.radius)
            });
        }
        centers.push(cs);
    }
    (video, centers)
}

fn random_velocity(rng: &mut ChaCha8Rng, max_speed: f64) -> [f64; 2] {
    if max_speed == 0.0 {
        return [0.0, 0.0];
    }
    [
        rng.random_range(-max_speed..=max_speed),
        rng.random_range(-max_speed..=max_speed),
    ]
}

fn ball_setup(cfg: &BallConfig, rng: &mut ChaCha8Rng) -> Vec<Ball> {
    let (w, h, r) = (cfg.width as f64, cfg.height as f64, cfg.radius);
    let place = |rng: &mut ChaCha8Rng| [rng.random_range(r..=w - r), rng.random_range(r..=h - r)];
    if cfg.balls == 1 {
        return vec![Ball {
            pos: place(rng),
            vel: random_velocity(rng, cfg.max_speed),
            radius: r,
            color: BALL_COLORS[0],
        }];
    }
    let head_on = cfg.max_speed > 0.0 && rng.random_bool(cfg.head_on_fraction);
    let (pos, vel) = if head_on {
        // approach along one axis, closing the gap within the clip
        let speed = rng.random_range(0.5 * cfg.max_speed..=cfg.max_speed);
        let horizontal = rng.random_bool(0.5);
        let (along, across) = if horizontal { (w, h) } else { (h, w) };
        let max_gap = (2.0 * speed * (cfg.frames.saturating_sub(1)) as f64).min(along - 4.0 * r);
        let gap = rng.random_range(0.5..=max_gap.max(0.5));
        let a0 = rng.random_range(r..=(along - 3.0 * r - gap).max(r));
        let a1 = a0 + 2.0 * r + gap;
        let c = rng.random_range(r..=across - r);
        let offset = rng.random_range(-r..=r);
        let c1 = (c + offset).clamp(r, across - r);
        if horizontal {
            ([[a0, c], [a1, c1]], [[speed, 0.0], [-speed, 0.0]])
        } else {
            ([[c, a0], [c1, a1]], [[0.0, speed], [0.0, -speed]])
        }
    } else {
        // start apart so frame 0 alone never decides the label; both are
        // redrawn because a central first ball may leave no room in small frames
        let (p0, p1) = loop {
            let (p0, p1) = (place(rng), place(rng));
            if ((p0[0] - p1[0]).powi(2) + (p0[1] - p1[1]).powi(2)).sqrt() > 2.0 * r + 1.0 {
                break (p0, p1);
            }
        };
        (
            [p0, p1],
            [
                random_velocity(rng, cfg.max_speed),
                random_velocity(rng, cfg.max_speed),
            ],
        )
    };
    (0..2)
        .map(|i| Ball {
            pos: pos[i],
            vel: vel[i],
            radius: r,
            color: BALL_COLORS[i],
        })
        .collect()
}

/// Clip `index` of the bouncing-ball corpus; depends only on `(seed, index)`.
pub fn bouncing_ball_clip(cfg: &BallConfig, seed: u64, index: usize) -> Result<BallClip> {
    cfg.validate()?;
    let mut rng = clip_rng(seed, index);
    let balls = ball_setup(cfg, &mut rng);
    let (video, centers) = render_balls(&balls, cfg.frames, cfg.height, cfg.width);
    let collision = touches(&centers, &balls);
    Ok(BallClip {
        video,
        balls,
        centers,
        collision,
    })
}

pub fn gen_bouncing_balls(cfg: &BallConfig, seed: u64) -> Result<BouncingBallDataset> {
    cfg.validate()?;
    let clips = (0..cfg.clips)
        .into_par_iter()
        .map(|i| bouncing_ball_clip(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(BouncingBallDataset {
        config: cfg.clone(),
        seed,
        clips,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of a square and diameter of a disc.
    pub size: f64,
    pub max_speed: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            frames: 4,
            height: 16,
            width: 16,
            size: 6.0,
            max_speed: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeClip {
    pub video: VideoClip,
    pub kind: ShapeKind,
}

/// Clip `index` of the moving-shapes corpus. Kinds alternate with the index,
/// so any even count is balanced.
pub fn moving_shape_clip(cfg: &ShapeConfig, seed: u64, index: usize) -> Result<ShapeClip> {
    if cfg.height < 8 || cfg.width < 8 || cfg.frames == 0 {
        return Err(VdtError::Geometry(format!(
            "need at least 8x8 frames and one frame, got {}x{}x{}",
            cfg.frames, cfg.height, cfg.width
        )));
    }
    if !(cfg.size > 0.0) || cfg.size >= cfg.height.min(cfg.width) as f64 || !(cfg.max_speed >= 0.0)
    {
        return Err(VdtError::Geometry(format!(
            "shape size {} does not fit",
            cfg.size
        )));
    }
    let kind = if index.is_multiple_of(2) {
        ShapeKind::Square
    } else {
        ShapeKind::Disc
    };
    let mut rng = clip_rng(seed, index);
    let half = cfg.size / 2.0;
    let body = Ball {
        pos: [
            rng.random_range(half..=cfg.width as f64 - half),
            rng.random_range(half..=cfg.height as f64 - half),
        ],
        vel: random_velocity(&mut rng, cfg.max_speed),
        radius: half,
        color: [
            rng.random_range(0.3..=1.0),
            rng.random_range(0.3..=1.0),
            rng.random_range(0.3..=1.0),
        ],
    };
    let mut video = Array4::zeros((cfg.frames, cfg.height, cfg.width, 3));
    for (f, mut frame) in video.outer_iter_mut().enumerate() {
        let c = body.center_at(f, cfg.width, cfg.height);
        match kind {
            ShapeKind::Square => paint(&mut frame, body.color, |x, y| {
                square_coverage(x, y, c, cfg.size)
            }),
            ShapeKind::Disc => paint(&mut frame, body.color, |x, y| disc_coverage(x, y, c, half)),
        }
    }
    Ok(ShapeClip { video, kind })
}

pub fn gen_moving_shapes(cfg: &ShapeConfig, seed: u64) -> Result<Vec<ShapeClip>> {
    (0..cfg.clips)
        .into_par_iter()
        .map(|i| moving_shape_clip(cfg, seed, i))
        .collect()
}

/// Dataset description as stored in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    BouncingBalls(BallConfig),
    MovingShapes(ShapeConfig),
}

impl DatasetConfig {
    pub fn frames(&self) -> usize {
        match self {
            DatasetConfig::BouncingBalls(c) => c.frames,
            DatasetConfig::MovingShapes(c) => c.frames,
        }
    }

    /// Generate the pixel clips.
    pub fn generate(&self, seed: u64) -> Result<Vec<VideoClip>> {
        Ok(match self {
            DatasetConfig::BouncingBalls(c) => gen_bouncing_balls(c, seed)?.videos(),
            DatasetConfig::MovingShapes(c) => gen_moving_shapes(c, seed)?
                .into_iter()
                .map(|c| c.video)
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn one_ball(pos: [f64; 2], vel: [f64; 2]) -> Vec<Ball> {
        vec![Ball {
            pos,
            vel,
            radius: 2.0,
            color: [1.0, 1.0, 1.0],
        }]
    }

    #[test]
    fn static_ball_frames_identical() {
        let (v, _) = render_balls(&one_ball([7.0, 9.0], [0.0, 0.0]), 5, 16, 16);
        for f in 1..5 {
            assert_eq!(v.index_axis(Axis(0), f), v.index_axis(Axis(0), 0));
        }
        assert!(v.iter().any(|&x| x > 0.0));
    }

    #[test]
    fn ball_moves_one_pixel_per_frame() {
        let (_, centers) = render_balls(&one_ball([8.0, 8.0], [1.0, 0.0]), 4, 16, 16);
        for (f, c) in centers.iter().enumerate() {
            assert_eq!(c[0], [8.0 + f as f64, 8.0]);
        }
    }

    #[test]
    fn reflection_matches_stepwise_simulation() {
        // oracle: explicit per-frame integration with mirror bounces
        let (lo, hi) = (2.0, 14.0);
        for &(x0, v) in &[(3.0, 1.7), (13.5, -2.3), (8.0, 5.0), (2.0, -0.4)] {
            let (mut x, mut vel) = (x0, v);
            for f in 0..40 {
                let got = reflect(x0, v, f as f64, lo, hi);
                assert!((got - x).abs() < 1e-9, "x0={x0} v={v} f={f}: {got} vs {x}");
                x += vel;
                loop {
                    if x > hi {
                        x = 2.0 * hi - x;
                        vel = -vel;
                    } else if x < lo {
                        x = 2.0 * lo - x;
                        vel = -vel;
                    } else {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn tight_frames_still_place_both_balls() {
        let cfg = BallConfig {
            clips: 200,
            frames: 4,
            height: 8,
            width: 8,
            radius: 1.5,
            head_on_fraction: 0.0,
            ..BallConfig::default()
        };
        let ds = gen_bouncing_balls(&cfg, 9).unwrap();
        for clip in &ds.clips {
            let [a, b] = [clip.centers[0][0], clip.centers[0][1]];
            assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() > 4.0);
        }
    }

    #[test]
    fn head_on_clip_collides() {
        let balls = vec![
            Ball {
                pos: [4.0, 8.0],
                vel: [1.5, 0.0],
                radius: 2.5,
                color: BALL_COLORS[0],
            },
            Ball {
                pos: [12.0, 8.0],
                vel: [-1.5, 0.0],
                radius: 2.5,
                color: BALL_COLORS[1],
            },
        ];
        let (_, centers) = render_balls(&balls, 4, 16, 16);
        assert!(touches(&centers, &balls));
        // distance oracle: frame 1 has separation 5 = r0 + r1
        let d1 = centers[1][1][0] - centers[1][0][0];
        assert_eq!(d1, 5.0);
        let apart = [
            balls[0],
            Ball {
                vel: [1.5, 0.0],
                ..balls[1]
            },
        ];
        let (_, c2) = render_balls(&apart, 2, 16, 16);
        assert!(!touches(&c2, &apart));
    }

    #[test]
    fn labels_match_distance_oracle_and_are_mixed() {
        let cfg = BallConfig {
            clips: 200,
            ..Default::default()
        };
        let ds = gen_bouncing_balls(&cfg, 5).unwrap();
        let mut positives = 0;
        for clip in &ds.clips {
            let mut hit = false;
            for f in 0..cfg.frames {
                let a = clip.balls[0].center_at(f, cfg.width, cfg.height);
                let b = clip.balls[1].center_at(f, cfg.width, cfg.height);
                hit |= ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= 2.0 * cfg.radius;
            }
            assert_eq!(hit, clip.collision);
            positives += hit as usize;
            assert!(clip.video.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(
            (40..=160).contains(&positives),
            "{positives} collisions of 200"
        );
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let cfg = BallConfig::default();
        let a = gen_bouncing_balls(&cfg, 9).unwrap();
        let b = gen_bouncing_balls(
            &BallConfig {
                clips: 10,
                ..cfg.clone()
            },
            9,
        )
        .unwrap();
        assert_eq!(a.clips[..10], b.clips[..]);
        assert_eq!(a.clips[3], bouncing_ball_clip(&cfg, 9, 3).unwrap());
        assert_ne!(a.clips[3], bouncing_ball_clip(&cfg, 10, 3).unwrap());
    }

    #[test]
    fn infeasible_geometry() {
        let bad = [
            BallConfig {
                height: 7,
                ..Default::default()
            },
            BallConfig {
                radius: 5.0,
                ..Default::default()
            },
            BallConfig {
                balls: 3,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(
                gen_bouncing_balls(&cfg, 0),
                Err(VdtError::Geometry(_))
            ));
        }
        let shapes = ShapeConfig {
            size: 20.0,
            ..Default::default()
        };
        assert!(gen_moving_shapes(&shapes, 0).is_err());
    }

    #[test]
    fn moving_shapes_contract() {
        let cfg = ShapeConfig {
            clips: 10,
            ..Default::default()
        };
        let a = gen_moving_shapes(&cfg, 4).unwrap();
        assert_eq!(a, gen_moving_shapes(&cfg, 4).unwrap());
        let squares = a.iter().filter(|c| c.kind == ShapeKind::Square).count();
        assert_eq!(squares, 5);
        for c in &a {
            assert!(c.video.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(c.video.dim(), (4, 16, 16, 3));
        }
    }

    #[test]
    fn square_coverage_integrates_to_area() {
        let total: f64 = (0..16)
            .flat_map(|i| (0..16).map(move |j| (i, j)))
            .map(|(i, j)| square_coverage(j as f64 + 0.5, i as f64 + 0.5, [7.3, 8.9], 5.0))
            .sum();
        assert!((total - 25.0).abs() < 1e-9);
    }

    #[test]
    fn dataset_config_json() {
        let cfg: DatasetConfig = serde_json::from_str(
            r#"{"kind":"bouncing_balls","clips":4,"frames":6,"height":16,"width":16,"balls":2,"radius":2.5,"max_speed":1.5,"head_on_fraction":0.5}"#,
        )
        .unwrap();
        assert_eq!(cfg.frames(), 6);
        assert_eq!(cfg.generate(1).unwrap().len(), 4);
    }
}
