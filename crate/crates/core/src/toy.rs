//! Two-domain toy datasets: a "sim" style with flat backgrounds and the
//! default palette, and a "real" style with rotated hues, textured
//! backgrounds and separate pose seeds that exposes only 2D labels.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::{real_crops, sim_crops, CropParams, Domain, TrainingSample};
use crate::raster::{rasterize, write_2d_frame, write_frame, Background, Camera, CameraOrbit, LabelFrame, RenderItem};
use crate::rig::{
    make_humanoid, parameterize, pose_figure, Placement, reference_atlas, sample_scene, shift_hue, GroundBounds, HumanoidParams, PoseLimits,
    PoseSampler, SceneConfig, SkinnedFigure,
};

/// Appearance of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Hue rotation of every figure palette in radians.
    pub hue_shift: f64,
    /// Textured backgrounds instead of flat ones.
    pub textured_background: bool,
    /// Mixed into every scene and camera seed of the domain.
    pub seed: u64,
}

impl DomainStyle {
    pub fn sim() -> Self {
        DomainStyle {
            hue_shift: 0.0,
            textured_background: false,
            seed: 0x5157,
        }
    }

    pub fn real() -> Self {
        DomainStyle {
            hue_shift: PI,
            textured_background: true,
            seed: 0x4ea1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Figures shared by both domains.
    pub figures: usize,
    pub tessellation: u32,
    pub train_frames: usize,
    pub test_frames: usize,
    pub width: u32,
    pub height: u32,
    pub fov_y: f64,
    pub orbit: CameraOrbit,
    pub scene: SceneConfig,
    pub sim: DomainStyle,
    pub real: DomainStyle,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            figures: 8,
            tessellation: 2,
            train_frames: 200,
            test_frames: 40,
            width: 160,
            height: 160,
            fov_y: 45.0,
            orbit: CameraOrbit {
                elevation: [5.0, 25.0],
                distance: [5.5, 7.5],
                target_height: 0.9,
            },
            scene: SceneConfig {
                n_max: 3,
                bounds: GroundBounds {
                    min: [-2.2, -2.2],
                    max: [2.2, 2.2],
                },
                max_attempts: 500,
            },
            sim: DomainStyle::sim(),
            real: DomainStyle::real(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.figures == 0 || self.train_frames == 0 || self.test_frames == 0 {
            return Err(Error::InvalidParameter("dataset needs figures, train and test frames".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidParameter("frames must be at least 16 pixels wide and high".into()));
        }
        if self.scene.n_max == 0 {
            return Err(Error::InvalidParameter("scenes need at least one figure".into()));
        }
        let o = &self.orbit;
        if !(o.distance[0] > 0.0 && o.distance[0] <= o.distance[1] && o.elevation[0] <= o.elevation[1]) {
            return Err(Error::InvalidParameter("camera orbit ranges".into()));
        }
        self.base_camera().validate()
    }

    pub fn base_camera(&self) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            fov_y: self.fov_y,
            ..Camera::default()
        }
    }
}

/// Figures without uv, one per seed derived from the dataset seed.
pub fn make_raw_figures(cfg: &DatasetConfig) -> Result<Vec<SkinnedFigure>> {
    (0..cfg.figures)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_humanoid(&HumanoidParams::sample(&mut rng, cfg.tessellation), seed)
        })
        .collect()
}

/// Figures with uv transferred from the reference atlas, shared by both
/// domains.
pub fn make_figures(cfg: &DatasetConfig) -> Result<Vec<SkinnedFigure>> {
    let atlas = reference_atlas()?;
    make_raw_figures(cfg)?.par_iter().map(|f| parameterize(f, &atlas)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn frame_seed(cfg: &DatasetConfig, style: &DomainStyle, split: Split, index: usize) -> u64 {
    let split = match split {
        Split::Train => 0u64,
        Split::Test => 1,
    };
    cfg.seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(style.seed << 20)
        .wrapping_add(split << 40)
        .wrapping_add(index as u64)
}

/// Blocky random texture.
pub fn texture_background(rng: &mut impl Rng, cells: u32) -> Background {
    let n = (cells * cells) as usize;
    let palette: Vec<[u8; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let pixels = (0..n).map(|_| palette[rng.gen_range(0..palette.len())]).collect();
    Background::Image {
        width: cells,
        height: cells,
        pixels,
    }
}

const SCENE_RETRIES: u64 = 32;

/// Redraws a scene with derived seeds while it does not fit the bounds.
fn scene_with_retries(figures: &[SkinnedFigure], sampler: &PoseSampler, cfg: &SceneConfig, seed: u64) -> Result<Vec<Placement>> {
    let mut last = None;
    for attempt in 0..SCENE_RETRIES {
        match sample_scene(figures, sampler, cfg, seed.wrapping_add(attempt.wrapping_mul(0x51ed_2701))) {
            Err(e @ Error::SceneTooCrowded { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Renders one frame of a domain.
pub fn render_frame(
    cfg: &DatasetConfig,
    figures: &[SkinnedFigure],
    sampler: &PoseSampler,
    style: &DomainStyle,
    split: Split,
    index: usize,
) -> Result<LabelFrame> {
    let seed = frame_seed(cfg, style, split, index);
    let placements = scene_with_retries(figures, sampler, &cfg.scene, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let center = [
        (cfg.scene.bounds.min[0] + cfg.scene.bounds.max[0]) / 2.0,
        (cfg.scene.bounds.min[1] + cfg.scene.bounds.max[1]) / 2.0,
    ];
    let cam = cfg.orbit.sample(&cfg.base_camera(), center, &mut rng);
    let bg = if style.textured_background {
        texture_background(&mut rng, 24)
    } else {
        let g: u8 = rng.gen_range(60..200);
        Background::Flat([g, g, g])
    };
    let posed = placements
        .iter()
        .map(|p| pose_figure(&figures[p.figure], &p.pose))
        .collect::<Result<Vec<_>>>()?;
    let palettes: Vec<Vec<[f64; 3]>> = placements
        .iter()
        .map(|p| shift_hue(&figures[p.figure], style.hue_shift).part_colors)
        .collect();
    let items: Vec<RenderItem> = placements
        .iter()
        .zip(&posed)
        .zip(&palettes)
        .map(|((p, posed), colors)| RenderItem {
            posed,
            colors,
            figure: p.figure,
        })
        .collect();
    rasterize(&items, &cam, &bg)
}

/// Renders `count` frames of one domain and split in parallel; the result
/// does not depend on the thread count.
pub fn render_frames(cfg: &DatasetConfig, figures: &[SkinnedFigure], domain: Domain, split: Split, count: usize) -> Result<Vec<LabelFrame>> {
    let limits = PoseLimits::default_for(&figures.first().ok_or(Error::EmptyPool("figure"))?.skeleton)?;
    let sampler = PoseSampler::new(limits);
    let style = match domain {
        Domain::Sim => &cfg.sim,
        Domain::Real => &cfg.real,
    };
    (0..count)
        .into_par_iter()
        .map(|i| render_frame(cfg, figures, &sampler, style, split, i))
        .collect()
}

/// Crops of every person in a set of frames, labeled per domain.
pub fn crop_pool(frames: &[LabelFrame], domain: Domain, params: &CropParams, seed: u64) -> Result<Vec<TrainingSample>> {
    let per_frame: Vec<Vec<TrainingSample>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            match domain {
                Domain::Sim => sim_crops(f, params, &mut rng),
                Domain::Real => real_crops(f, params, &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Train and test crop pools of both domains.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub sim_train: Vec<TrainingSample>,
    pub real_train: Vec<TrainingSample>,
    pub sim_test: Vec<TrainingSample>,
    pub real_test: Vec<TrainingSample>,
}

/// Rendered frames of both domains and splits.
#[derive(Debug, Clone)]
pub struct ToyFrames {
    pub sim_train: Vec<LabelFrame>,
    pub real_train: Vec<LabelFrame>,
    pub sim_test: Vec<LabelFrame>,
    pub real_test: Vec<LabelFrame>,
}

pub fn render_toy_frames(cfg: &DatasetConfig) -> Result<ToyFrames> {
    cfg.validate()?;
    render_toy_frames_with(cfg, &make_figures(cfg)?)
}

/// Both domains and splits rendered from given figures, which need uv.
pub fn render_toy_frames_with(cfg: &DatasetConfig, figures: &[SkinnedFigure]) -> Result<ToyFrames> {
    cfg.validate()?;
    Ok(ToyFrames {
        sim_train: render_frames(cfg, figures, Domain::Sim, Split::Train, cfg.train_frames)?,
        real_train: render_frames(cfg, figures, Domain::Real, Split::Train, cfg.train_frames)?,
        sim_test: render_frames(cfg, figures, Domain::Sim, Split::Test, cfg.test_frames)?,
        real_test: render_frames(cfg, figures, Domain::Real, Split::Test, cfg.test_frames)?,
    })
}

impl ToyFrames {
    pub fn crops(&self, params: &CropParams, seed: u64) -> Result<ToyData> {
        Ok(ToyData {
            sim_train: crop_pool(&self.sim_train, Domain::Sim, params, seed)?,
            real_train: crop_pool(&self.real_train, Domain::Real, params, seed.wrapping_add(1 << 32))?,
            sim_test: crop_pool(&self.sim_test, Domain::Sim, params, seed.wrapping_add(2 << 32))?,
            real_test: crop_pool(&self.real_test, Domain::Real, params, seed.wrapping_add(3 << 32))?,
        })
    }

    /// Writes `<dir>/<domain>_<split>/<index>/` frame directories. Real
    /// training frames are written with only their 2D label files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let sets = [
            ("sim_train", &self.sim_train, false),
            ("real_train", &self.real_train, true),
            ("sim_test", &self.sim_test, false),
            ("real_test", &self.real_test, false),
        ];
        for (name, frames, two_d_only) in sets {
            frames.par_iter().enumerate().try_for_each(|(i, f)| {
                let d = dir.join(name).join(format!("{i:05}"));
                if two_d_only {
                    write_2d_frame(f, &d)
                } else {
                    write_frame(f, &d)
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            figures: 2,
            tessellation: 1,
            train_frames: 3,
            test_frames: 2,
            width: 96,
            height: 96,
            ..Default::default()
        }
    }

    #[test]
    fn domains_differ_in_style_and_are_deterministic() {
        let cfg = small();
        let figs = make_figures(&cfg).unwrap();
        let a = render_frames(&cfg, &figs, Domain::Sim, Split::Train, 2).unwrap();
        let b = render_frames(&cfg, &figs, Domain::Sim, Split::Train, 2).unwrap();
        assert_eq!(a, b);
        let r = render_frames(&cfg, &figs, Domain::Real, Split::Train, 2).unwrap();
        assert_ne!(a[0].color, r[0].color);
        let t = render_frames(&cfg, &figs, Domain::Sim, Split::Test, 2).unwrap();
        assert_ne!(a[0].instance, t[0].instance);
        for f in a.iter().chain(&r) {
            assert!(!f.instances.is_empty());
        }
    }

    #[test]
    fn crop_pools_follow_domain_label_rules() {
        let cfg = small();
        let frames = render_toy_frames(&cfg).unwrap();
        let data = frames.crops(&CropParams::from_spec(&crate::mixer::MixSpec::default()), 0).unwrap();
        assert!(!data.sim_train.is_empty() && !data.real_train.is_empty());
        for s in &data.sim_train {
            assert!(s.uv.is_some() && s.domain == Domain::Sim);
        }
        for s in &data.real_train {
            assert!(s.uv.is_none() && s.domain == Domain::Real);
            s.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.figures = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.orbit.distance = [5.0, 1.0];
        assert!(c.validate().is_err());
    }
}
