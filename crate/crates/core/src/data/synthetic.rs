//! Procedural pedestrian-like tracklets.
//!
//! An identity is a small colored figure: head, torso (solid, striped or
//! checkered), legs and an optional bag. A view re-renders that figure with
//! a fixed shift, scale, horizontal squeeze and mirror. Cameras see
//! disjoint subsets of views (`v % num_cameras == camera`), so retrieving
//! an identity across cameras means matching different views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, FrameFlags, FrameKind, TrackletRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Total number of view transforms, shared out among cameras.
    pub num_views: usize,
    pub num_cameras: usize,
    /// Chance that a frame starts a run of near-copies of its predecessor.
    pub duplicate_run_prob: f64,
    pub duplicate_run_length: usize,
    /// Near-copies differ from their predecessor by less than this in every pixel.
    pub duplicate_sigma: f64,
    pub occlusion_prob: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 32,
            tracklets_per_identity: 4,
            frames_per_tracklet: 12,
            channels: 3,
            height: 32,
            width: 16,
            num_views: 8,
            num_cameras: 2,
            duplicate_run_prob: 0.3,
            duplicate_run_length: 3,
            duplicate_sigma: 0.02,
            occlusion_prob: 0.3,
            noise_sigma: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.num_views < 2 {
            return bad("num_views must be at least 2");
        }
        if self.num_cameras < 2 || self.num_cameras > self.num_views {
            return bad("need 2 ≤ num_cameras ≤ num_views");
        }
        if self.frames_per_tracklet == 0 || self.num_identities == 0 || self.tracklets_per_identity == 0 {
            return bad("identity, tracklet and frame counts must be positive");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if self.height < 4 || self.width < 4 {
            return bad("images must be at least 4×4");
        }
        for (name, p) in [
            ("duplicate_run_prob", self.duplicate_run_prob),
            ("occlusion_prob", self.occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthetic data: {name} must lie in [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 || self.duplicate_sigma < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Views visible from `camera`.
    pub fn camera_views(&self, camera: usize) -> Vec<usize> {
        (0..self.num_views).filter(|v| v % self.num_cameras == camera).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Solid,
    Stripes,
    Checker,
}

/// Appearance of one identity in canonical coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTemplate {
    head: [f64; 3],
    torso: [f64; 3],
    torso_alt: [f64; 3],
    legs: [f64; 3],
    pattern: Pattern,
    /// Bag on the left (-1), right (+1) or none (0), with its color.
    bag: (i8, [f64; 3]),
    torso_width: f64,
}

/// Geometry of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    shift_x: f64,
    shift_y: f64,
    scale: f64,
    squeeze: f64,
    mirror: bool,
    background: f64,
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

impl IdentityTemplate {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let pattern = match rng.random_range(0..3) {
            0 => Pattern::Solid,
            1 => Pattern::Stripes,
            _ => Pattern::Checker,
        };
        let bag_side = [-1, 0, 1][rng.random_range(0..3)];
        Self {
            head: [
                rng.random_range(0.5..0.9),
                rng.random_range(0.35..0.7),
                rng.random_range(0.25..0.55),
            ],
            torso: color(rng),
            torso_alt: color(rng),
            legs: color(rng),
            pattern,
            bag: (bag_side, color(rng)),
            torso_width: rng.random_range(0.4..0.6),
        }
    }

    /// Color at canonical point `(u, t)`, both in `[0, 1]`
    /// (`u` across, `t` down), or `None` for background.
    fn shade(&self, u: f64, t: f64) -> Option<[f64; 3]> {
        let du = u - 0.5;
        if du * du / 0.012 + (t - 0.12) * (t - 0.12) / 0.01 <= 1.0 {
            return Some(self.head);
        }
        let half = self.torso_width / 2.0;
        if (0.22..0.57).contains(&t) && du.abs() <= half {
            let alt = match self.pattern {
                Pattern::Solid => false,
                Pattern::Stripes => ((t - 0.22) / 0.07) as i64 % 2 == 1,
                Pattern::Checker => (((t - 0.22) / 0.09) as i64 + ((du + half) / 0.1) as i64) % 2 == 1,
            };
            return Some(if alt { self.torso_alt } else { self.torso });
        }
        let (side, bag_color) = self.bag;
        if side != 0 && (0.3..0.55).contains(&t) {
            let center = side as f64 * (half + 0.1);
            if (du - center).abs() <= 0.08 {
                return Some(bag_color);
            }
        }
        if (0.57..0.97).contains(&t) && (0.04..=half * 0.9).contains(&du.abs()) {
            return Some(self.legs);
        }
        None
    }

    /// Noise-free rendering `[C × H × W]` under `view`.
    pub fn render(&self, view: &ViewTransform, channels: usize, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; channels * height * width];
        for y in 0..height {
            for x in 0..width {
                let px = (x as f64 + 0.5) / width as f64;
                let py = (y as f64 + 0.5) / height as f64;
                let mut u = (px - 0.5 - view.shift_x) / (view.scale * view.squeeze) + 0.5;
                if view.mirror {
                    u = 1.0 - u;
                }
                let t = (py - 0.5 - view.shift_y) / view.scale + 0.5;
                let rgb = self.shade(u, t).unwrap_or([view.background; 3]);
                let pixel = y * width + x;
                if channels == 1 {
                    out[pixel] = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                } else {
                    for c in 0..3 {
                        out[c * height * width + pixel] = rgb[c];
                    }
                }
            }
        }
        out
    }
}

impl ViewTransform {
    /// View 0 is frontal and centered; others are random.
    pub fn random<R: Rng>(index: usize, rng: &mut R) -> Self {
        if index == 0 {
            return Self {
                shift_x: 0.0,
                shift_y: 0.0,
                scale: 1.0,
                squeeze: 1.0,
                mirror: false,
                background: 0.5,
            };
        }
        Self {
            shift_x: rng.random_range(-0.12..0.12),
            shift_y: rng.random_range(-0.06..0.06),
            scale: rng.random_range(0.8..1.1),
            squeeze: rng.random_range(0.55..1.0),
            mirror: rng.random_bool(0.5),
            background: rng.random_range(0.3..0.7),
        }
    }
}

/// Identity templates and view transforms behind a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub templates: Vec<IdentityTemplate>,
    pub views: Vec<ViewTransform>,
}

impl World {
    pub fn new(cfg: &SyntheticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates = (0..cfg.num_identities).map(|_| IdentityTemplate::random(&mut rng)).collect();
        let views = (0..cfg.num_views).map(|v| ViewTransform::random(v, &mut rng)).collect();
        Self { templates, views }
    }
}

fn add_noise<R: Rng>(frame: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("positive sigma");
        for p in frame.iter_mut() {
            *p += dist.sample(rng);
        }
    }
    clamp_unit(frame);
}

fn clamp_unit(frame: &mut [f64]) {
    for p in frame.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

/// Near-copy of `prev`: uniform jitter in `±sigma/2`, clamped to `[0, 1]`.
fn jitter_copy<R: Rng>(prev: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    prev.iter()
        .map(|&p| {
            let d = if sigma > 0.0 {
                rng.random_range(-sigma / 2.0..sigma / 2.0)
            } else {
                0.0
            };
            (p + d).clamp(0.0, 1.0)
        })
        .collect()
}

/// Blanks a random horizontal band covering 20–40% of the height.
fn occlude<R: Rng>(frame: &mut [f64], cfg: &SyntheticConfig, rng: &mut R) {
    let h = cfg.height;
    let band = ((h as f64 * rng.random_range(0.2..0.4)).round() as usize).clamp(1, h);
    let top = rng.random_range(0..=h - band);
    for c in 0..cfg.channels {
        for y in top..top + band {
            let row = (c * h + y) * cfg.width;
            frame[row..row + cfg.width].fill(0.0);
        }
    }
}

fn tracklet_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn render_tracklet(cfg: &SyntheticConfig, world: &World, identity: usize, camera: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<FrameFlags>) {
    let views = cfg.camera_views(camera);
    let n = cfg.frame_len();
    let mut data: Vec<f64> = Vec::with_capacity(cfg.frames_per_tracklet * n);
    let mut flags: Vec<FrameFlags> = Vec::with_capacity(cfg.frames_per_tracklet);
    let mut run_left = 0usize;
    for i in 0..cfg.frames_per_tracklet {
        if i > 0 && run_left == 0 && rng.random_bool(cfg.duplicate_run_prob) {
            run_left = cfg.duplicate_run_length;
        }
        if i > 0 && run_left > 0 {
            run_left -= 1;
            let prev = data[(i - 1) * n..i * n].to_vec();
            data.extend(jitter_copy(&prev, cfg.duplicate_sigma, rng));
            flags.push(FrameFlags {
                kind: FrameKind::Duplicate,
                occluded: flags[i - 1].occluded,
            });
            continue;
        }
        let view = &world.views[views[rng.random_range(0..views.len())]];
        let mut frame = world.templates[identity].render(view, cfg.channels, cfg.height, cfg.width);
        add_noise(&mut frame, cfg.noise_sigma, rng);
        let occluded = rng.random_bool(cfg.occlusion_prob);
        if occluded {
            occlude(&mut frame, cfg, rng);
        }
        data.extend(frame);
        flags.push(FrameFlags {
            kind: FrameKind::Distinct,
            occluded,
        });
    }
    let frames = Tensor::new([cfg.frames_per_tracklet, cfg.channels, cfg.height, cfg.width], data).expect("values clamped to [0, 1]");
    (frames, flags)
}

/// Deterministic synthetic dataset. Tracklet `t` of an identity is filmed
/// by camera `t % num_cameras`.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg, seed);
    let jobs: Vec<(usize, usize)> = (0..cfg.num_identities)
        .flat_map(|id| (0..cfg.tracklets_per_identity).map(move |t| (id, t)))
        .collect();
    let tracklets: Vec<TrackletRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(identity, t))| {
            let camera = t % cfg.num_cameras;
            let mut rng = tracklet_rng(seed, index);
            let (frames, flags) = render_tracklet(cfg, &world, identity, camera, &mut rng);
            TrackletRecord {
                id: format!("id{identity:04}_t{t:02}"),
                identity: identity as u32,
                camera: camera as u32,
                frames,
                flags,
            }
        })
        .collect();
    Ok(Dataset { tracklets })
}

/// `k` near-identical frames of one view plus one frame of a different
/// view of the same identity, placed at a random position. Returns the
/// frames and the index of the distinct frame.
pub fn redundancy_probe(cfg: &SyntheticConfig, world: &World, identity: usize, k: usize, seed: u64) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    if identity >= world.templates.len() || world.views.len() < 2 {
        return Err(Error::Config("probe identity or views out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let main_view = rng.random_range(0..world.views.len());
    let mut other = rng.random_range(0..world.views.len() - 1);
    if other >= main_view {
        other += 1;
    }
    let template = &world.templates[identity];
    let mut base = template.render(&world.views[main_view], cfg.channels, cfg.height, cfg.width);
    add_noise(&mut base, cfg.noise_sigma, &mut rng);
    let mut distinct = template.render(&world.views[other], cfg.channels, cfg.height, cfg.width);
    add_noise(&mut distinct, cfg.noise_sigma, &mut rng);
    let position = rng.random_range(0..=k);
    let mut data = Vec::with_capacity((k + 1) * base.len());
    for i in 0..=k {
        if i == position {
            data.extend_from_slice(&distinct);
        } else {
            data.extend(jitter_copy(&base, cfg.duplicate_sigma, &mut rng));
        }
    }
    let frames = Tensor::new([k + 1, cfg.channels, cfg.height, cfg.width], data)?;
    Ok((frames, position))
}
