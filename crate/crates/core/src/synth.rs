//! Procedural lake scenes and freeze seasons with exact ground truth.
//!
//! Scenes are generated label-first: the lake blob and every surface patch
//! are decided as pixel sets, then colored. Class counts are exact (largest
//! remainder rounding of the requested fractions), so the mask always
//! matches the parameters up to one pixel per class.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use chrono::{Duration, NaiveDate, NaiveTime};
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::legend::{BACKGROUND, CLUTTER, ICE, LAKE, SNOW, WATER};
use crate::dataset::{FrameMeta, FrameSource, LabeledFrame, SegmentationMask};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeedStream};

const LAYOUT_TAG: u64 = 0x6c61_796f_7574;
const NOISE_TAG: u64 = 0x006e_6f69_7365;

const WATER_COLOR: [f64; 3] = [22.0, 44.0, 112.0];
const ICE_COLOR: [f64; 3] = [150.0, 208.0, 224.0];
const SNOW_COLOR: [f64; 3] = [242.0, 244.0, 247.0];
const CLUTTER_COLORS: [[f64; 3]; 4] = [
    [224.0, 32.0, 36.0],
    [244.0, 164.0, 20.0],
    [204.0, 40.0, 200.0],
    [236.0, 228.0, 30.0],
];
const TERRAIN_NEAR: [f64; 3] = [112.0, 92.0, 66.0];
const TERRAIN_FAR: [f64; 3] = [64.0, 104.0, 54.0];

/// Fractions of the lake surface per state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceMix {
    #[serde(default)]
    pub water: f64,
    #[serde(default)]
    pub ice: f64,
    #[serde(default)]
    pub snow: f64,
    #[serde(default)]
    pub clutter: f64,
}

impl SurfaceMix {
    pub const WATER: Self = Self {
        water: 1.0,
        ice: 0.0,
        snow: 0.0,
        clutter: 0.0,
    };

    pub fn new(water: f64, ice: f64, snow: f64, clutter: f64) -> Self {
        Self {
            water,
            ice,
            snow,
            clutter,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.water, self.ice, self.snow, self.clutter]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(format!(
                "surface_mix entries must be finite and non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "surface_mix must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub size: usize,
    pub lake_coverage: f64,
    pub surface_mix: SurfaceMix,
    pub texture_noise: f64,
    pub seed: u64,
    /// Seed for the lake outline; defaults to `seed`. Fixing it keeps the
    /// lake in place across frames of one camera.
    #[serde(default)]
    pub layout_seed: Option<u64>,
}

impl SceneParams {
    pub fn new(size: usize, lake_coverage: f64, surface_mix: SurfaceMix, seed: u64) -> Self {
        Self {
            size,
            lake_coverage,
            surface_mix,
            texture_noise: 0.3,
            seed,
            layout_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Validation(format!(
                "scene size must be at least 32, got {}",
                self.size
            )));
        }
        if !(self.lake_coverage > 0.0 && self.lake_coverage < 1.0) {
            return Err(Error::Validation(format!(
                "lake_coverage must be in (0, 1), got {}",
                self.lake_coverage
            )));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(Error::Validation(format!(
                "texture_noise must be in [0, 1], got {}",
                self.texture_noise
            )));
        }
        self.surface_mix.validate()
    }
}

/// Splits `total` into integer parts proportional to `weights`
/// (largest remainder, ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Sum of a few random low-frequency plane waves, roughly in [-1, 1].
struct SmoothField {
    waves: Vec<(f64, f64, f64)>,
    scale: f64,
}

impl SmoothField {
    fn new(rng: &mut SeedStream, size: usize, n: usize) -> Self {
        let waves = (0..n)
            .map(|_| (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(0.0, TAU)))
            .collect();
        Self {
            waves,
            scale: TAU / size as f64,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph)| ((fx * px + fy * py) * self.scale + ph).cos())
            .sum();
        s / self.waves.len() as f64
    }
}

/// Pixel indices of the lake, `round(coverage * size^2)` of them: the pixels
/// with the smallest normalized radius under a smooth star-shaped outline.
fn lake_pixels(size: usize, coverage: f64, layout_seed: u64) -> Vec<usize> {
    let mut rng = SeedStream::with_stream(layout_seed, 1);
    let s = size as f64;
    let cx = s * (0.5 + rng.range(-0.1, 0.1));
    let cy = s * (0.5 + rng.range(-0.1, 0.1));
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.range(0.0, 0.08), rng.range(0.0, TAU)))
        .collect();
    let mut rho: Vec<(f64, usize)> = (0..size * size)
        .map(|i| {
            let dx = (i % size) as f64 + 0.5 - cx;
            let dy = (i / size) as f64 + 0.5 - cy;
            let theta = dy.atan2(dx);
            let outline: f64 = 1.0
                + harmonics
                    .iter()
                    .map(|&(k, a, ph)| a * (k * theta + ph).cos())
                    .sum::<f64>();
            (dx.hypot(dy) / outline, i)
        })
        .collect();
    rho.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ((coverage * (size * size) as f64).round() as usize).clamp(1, size * size - 1);
    rho.truncate(n);
    rho.into_iter().map(|(_, i)| i).collect()
}

fn sorted_by<F: Fn(usize) -> f64>(mut pixels: Vec<usize>, key: F) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = pixels.drain(..).map(|i| (key(i), i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

pub fn generate_scene(params: &SceneParams) -> Result<(RgbImage, SegmentationMask)> {
    params.validate()?;
    let size = params.size;
    let layout_seed = params.layout_seed.unwrap_or(params.seed);
    let lake = lake_pixels(size, params.lake_coverage, layout_seed);
    let mut labels = vec![BACKGROUND; size * size];

    let mut rng = SeedStream::with_stream(params.seed, 2);
    let counts = largest_remainder(&params.surface_mix.as_array(), lake.len());
    let n_clutter = counts[3];
    let mut blobs: Vec<(f64, f64, usize)> = Vec::new();
    let mut rest = lake.clone();
    if n_clutter > 0 {
        let n_blobs = n_clutter.div_ceil(40).max(1);
        for _ in 0..n_blobs {
            let p = lake[rng.below(lake.len())];
            let color = rng.below(CLUTTER_COLORS.len());
            blobs.push(((p % size) as f64 + 0.5, (p / size) as f64 + 0.5, color));
        }
        let nearest = |i: usize| -> (f64, usize) {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            blobs
                .iter()
                .enumerate()
                .map(|(b, &(bx, by, _))| ((x - bx).hypot(y - by), b))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
        };
        rest = sorted_by(rest, |i| nearest(i).0);
        for &i in &rest[..n_clutter] {
            labels[i] = CLUTTER;
        }
        rest.drain(..n_clutter);
    }
    let field = SmoothField::new(&mut rng, size, 4);
    let rest = sorted_by(rest, |i| field.at(i % size, i / size));
    let (n_water, n_ice) = (counts[0], counts[1]);
    for (rank, &i) in rest.iter().enumerate() {
        labels[i] = if rank < n_water {
            WATER
        } else if rank < n_water + n_ice {
            ICE
        } else {
            SNOW
        };
    }

    let mut tex = SeedStream::with_stream(params.seed, 3);
    let shade = SmoothField::new(&mut tex, size, 3);
    let amp = params.texture_noise;
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let base = match labels[i] {
                WATER => WATER_COLOR,
                ICE => ICE_COLOR,
                SNOW => SNOW_COLOR,
                CLUTTER => {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let b = blobs
                        .iter()
                        .min_by(|a, b| {
                            (px - a.0)
                                .hypot(py - a.1)
                                .total_cmp(&(px - b.0).hypot(py - b.1))
                        })
                        .unwrap();
                    CLUTTER_COLORS[b.2]
                }
                _ => {
                    let t = y as f64 / (size - 1) as f64;
                    std::array::from_fn(|c| TERRAIN_FAR[c] + t * (TERRAIN_NEAR[c] - TERRAIN_FAR[c]))
                }
            };
            let s = shade.at(x, y) * 18.0 * amp;
            let px: [u8; 3] = std::array::from_fn(|c| {
                (base[c] + s + 20.0 * amp * tex.normal()).round().clamp(0.0, 255.0) as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let mask = SegmentationMask::from_vec(size, size, labels)?;
    Ok((image, mask))
}

/// Draws varied scene parameters for training sets: lake coverage in
/// [0.3, 0.55], water/ice/snow shares from a flat Dirichlet, 2-6% clutter.
pub fn sample_scene_params(size: usize, seed: u64) -> SceneParams {
    let mut rng = SeedStream::with_stream(seed, 4);
    let coverage = rng.range(0.3, 0.55);
    let clutter = rng.range(0.02, 0.06);
    let w: Vec<f64> = (0..3).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = w.iter().sum();
    let scale = (1.0 - clutter) / total;
    let mix = SurfaceMix::new(w[0] * scale, w[1] * scale, 0.0, clutter);
    let mix = SurfaceMix {
        snow: 1.0 - mix.water - mix.ice - clutter,
        ..mix
    };
    SceneParams::new(size, coverage, mix, seed)
}

/// `n` independent labeled scenes for training and evaluation.
pub fn generate_scene_set(n: usize, size: usize, seed: u64) -> Result<Vec<LabeledFrame>> {
    let start = NaiveDate::from_ymd_opt(2017, 1, 1)
        .unwrap()
        .and_time(NaiveTime::MIN);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let params = sample_scene_params(size, derive_seed(seed, i as u64));
            let (image, mask) = generate_scene(&params)?;
            let meta = FrameMeta {
                path: format!("images/scene_{i:04}.png"),
                timestamp: start + Duration::hours(i as i64),
                camera_id: "synth".into(),
                lake_id: "synth".into(),
                winter_id: "synth".into(),
                source: FrameSource::Webcam,
            };
            Ok(LabeledFrame { meta, image, mask })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeasonParams {
    pub n_days: u32,
    /// `(ice_on_day, ice_off_day)`, 1-based day numbers.
    pub freeze_events: Vec<(u32, u32)>,
    pub frames_per_day: u32,
    pub gap_days: BTreeSet<u32>,
    /// Std-dev of the per-frame frozen fraction around the planted value.
    pub observation_noise: f64,
    pub ramp_days: u32,
    /// Calendar date of day 1.
    pub start_date: NaiveDate,
    pub size: usize,
    pub lake_coverage: f64,
    /// Relative shares of ice, snow and clutter within the frozen part.
    pub frozen_mix: [f64; 3],
    pub texture_noise: f64,
    pub seed: u64,
    pub camera_id: String,
    pub lake_id: String,
    pub winter_id: String,
}

impl Default for SeasonParams {
    fn default() -> Self {
        Self {
            n_days: 150,
            freeze_events: Vec::new(),
            frames_per_day: 4,
            gap_days: BTreeSet::new(),
            observation_noise: 0.0,
            ramp_days: 3,
            start_date: NaiveDate::from_ymd_opt(2016, 11, 1).unwrap(),
            size: 32,
            lake_coverage: 0.4,
            frozen_mix: [0.6, 0.35, 0.05],
            texture_noise: 0.3,
            seed: 0,
            camera_id: "synth_cam".into(),
            lake_id: "synth_lake".into(),
            winter_id: "synth_winter".into(),
        }
    }
}

impl SeasonParams {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_days == 0 || self.frames_per_day == 0 {
            return Err(Error::Validation(
                "ramp_days and frames_per_day must be positive".into(),
            ));
        }
        if !(self.observation_noise >= 0.0 && self.observation_noise.is_finite()) {
            return Err(Error::Validation(format!(
                "observation_noise must be non-negative, got {}",
                self.observation_noise
            )));
        }
        if self.frozen_mix.iter().any(|w| *w < 0.0) || self.frozen_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Validation(format!(
                "frozen_mix must be non-negative with a positive sum, got {:?}",
                self.frozen_mix
            )));
        }
        let mut prev_off = 0;
        for &(on, off) in &self.freeze_events {
            if on >= off {
                return Err(Error::Validation(format!(
                    "freeze event ({on}, {off}): ice-on must precede ice-off"
                )));
            }
            if on < 1 || off > self.n_days {
                return Err(Error::Validation(format!(
                    "freeze event ({on}, {off}) outside days 1..={}",
                    self.n_days
                )));
            }
            if on <= prev_off {
                return Err(Error::Validation(format!(
                    "freeze event ({on}, {off}) overlaps or precedes the previous event"
                )));
            }
            prev_off = off;
        }
        Ok(())
    }

    pub fn date_of(&self, day: u32) -> NaiveDate {
        self.start_date + Duration::days(day as i64 - 1)
    }

    /// Planted frozen fraction of day `day`: a linear ramp over `ramp_days`
    /// reaching 1 on the ice-on day, full cover until the day before ice-off,
    /// then a linear thaw starting on the ice-off day.
    pub fn planted_fraction(&self, day: u32) -> f64 {
        let ramp = self.ramp_days as f64;
        let d = day as f64;
        self.freeze_events
            .iter()
            .map(|&(on, off)| {
                let up = (1.0 - (on as f64 - d) / ramp).clamp(0.0, 1.0);
                let down = (1.0 - (d - off as f64 + 1.0) / ramp).clamp(0.0, 1.0);
                up.min(down)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub ice_on: NaiveDate,
    pub ice_off: NaiveDate,
}

#[derive(Debug, Clone)]
pub struct SeasonFrame {
    pub day: u32,
    pub frame: LabeledFrame,
}

#[derive(Debug, Clone)]
pub struct Season {
    pub frames: Vec<SeasonFrame>,
    /// Binary lake region (`LAKE` inside, `BACKGROUND` outside), shared by
    /// every frame.
    pub lake_region: SegmentationMask,
    pub truth: Vec<PlantedEvent>,
    /// Planted fraction per day, including gap days.
    pub daily_fraction: Vec<(NaiveDate, f64)>,
}

pub fn generate_season(params: &SeasonParams) -> Result<Season> {
    params.validate()?;
    let layout_seed = derive_seed(params.seed, LAYOUT_TAG);
    let [ice, snow, clutter] = params.frozen_mix;
    let frozen_total = ice + snow + clutter;
    let minutes_apart = 600 / params.frames_per_day as i64;

    let jobs: Vec<(u32, u32)> = (1..=params.n_days)
        .filter(|d| !params.gap_days.contains(d))
        .flat_map(|d| (0..params.frames_per_day).map(move |i| (d, i)))
        .collect();
    let frames = jobs
        .into_par_iter()
        .map(|(day, i)| {
            let frame_seed = derive_seed(derive_seed(params.seed, day as u64), i as u64);
            let mut noise = SeedStream::new(derive_seed(frame_seed, NOISE_TAG));
            let mut f = params.planted_fraction(day);
            if params.observation_noise > 0.0 {
                f = (f + params.observation_noise * noise.normal()).clamp(0.0, 1.0);
            }
            let mix = SurfaceMix::new(
                1.0 - f,
                f * ice / frozen_total,
                f * snow / frozen_total,
                f * clutter / frozen_total,
            );
            let mix = SurfaceMix {
                water: 1.0 - mix.ice - mix.snow - mix.clutter,
                ..mix
            };
            let scene = SceneParams {
                size: params.size,
                lake_coverage: params.lake_coverage,
                surface_mix: mix,
                texture_noise: params.texture_noise,
                seed: frame_seed,
                layout_seed: Some(layout_seed),
            };
            let (image, mask) = generate_scene(&scene)?;
            let timestamp = params
                .date_of(day)
                .and_time(NaiveTime::from_hms_opt(8, 0, 0).unwrap())
                + Duration::minutes(i as i64 * minutes_apart);
            let meta = FrameMeta {
                path: format!(
                    "images/{}_{}.png",
                    params.camera_id,
                    timestamp.format("%Y%m%d_%H%M")
                ),
                timestamp,
                camera_id: params.camera_id.clone(),
                lake_id: params.lake_id.clone(),
                winter_id: params.winter_id.clone(),
                source: FrameSource::Webcam,
            };
            Ok(SeasonFrame {
                day,
                frame: LabeledFrame { meta, image, mask },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lake = lake_pixels(params.size, params.lake_coverage, layout_seed);
    let mut region = SegmentationMask::filled(params.size, params.size, BACKGROUND);
    for i in lake {
        region.labels_mut()[i] = LAKE;
    }
    Ok(Season {
        frames,
        lake_region: region,
        truth: params
            .freeze_events
            .iter()
            .map(|&(on, off)| PlantedEvent {
                ice_on: params.date_of(on),
                ice_off: params.date_of(off),
            })
            .collect(),
        daily_fraction: (1..=params.n_days)
            .map(|d| (params.date_of(d), params.planted_fraction(d)))
            .collect(),
    })
}
