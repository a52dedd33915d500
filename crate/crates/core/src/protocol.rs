//! Multi-scene evaluation protocols: reconstruction probing per feature
//! family and reference-view count, the warped-image baseline, and
//! robustness to point removal.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{concat_global_local, extract_features, FeatureFamily, ViewContext};
use crate::geometry::{aggregate_pointmaps, anchor_tokens, rasterize, rasterize_tokens, subsample_points, FeatureGrid, Pointmap, WarpedPlane};
use crate::io::SceneBundle;
use crate::metrics::inf_as_string;
use crate::probe::{eval_probe, score_image, train_probe, EvalReport, EvalSample, ProbeDecoder, ProbeSample, TrainConfig};
use crate::scene::{ArcSpec, SceneSpec};
use crate::{CameraPose, Error, Result};

const TRAIN_REMOVAL_SEED: u64 = 0x7a11_0f5e_ed00;

/// How the suite is divided between probe training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// The last `test_scenes` scenes are held out entirely; every view of
    /// them is evaluated as a target.
    HeldOutScenes { test_scenes: usize },
    /// Every scene is used; `test_targets` views are only ever evaluated as
    /// targets and never appear in training samples, as target or reference.
    HeldOutViews { test_targets: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub num_scenes: usize,
    pub first_seed: u64,
    pub scene: SceneSpec,
    pub arc: ArcSpec,
    pub patch: usize,
    pub view_counts: Vec<usize>,
    pub split: Split,
    /// Point-removal fractions applied to copies of every training sample;
    /// `0` keeps the clean sample.
    pub train_removal: Vec<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            num_scenes: 20,
            first_seed: 1000,
            scene: SceneSpec::default(),
            arc: ArcSpec::default(),
            patch: 8,
            view_counts: vec![1, 2, 3],
            split: Split::HeldOutScenes { test_scenes: 5 },
            train_removal: vec![0.0],
        }
    }
}

impl SuiteConfig {
    /// The configuration used to compare feature families: 60 scenes with
    /// the last 20 held out, tight framing and training copies with half the
    /// points removed.
    pub fn benchmark() -> Self {
        Self {
            num_scenes: 60,
            arc: ArcSpec {
                radius: 8.0,
                fov_deg: 40.0,
                ..ArcSpec::default()
            },
            split: Split::HeldOutScenes { test_scenes: 20 },
            train_removal: vec![0.0, 0.5],
            ..Self::default()
        }
    }
}

/// Families compared on the benchmark suite, in increasing expected quality.
pub fn benchmark_families() -> [FeatureFamily; 3] {
    [
        FeatureFamily::random(7),
        FeatureFamily::Appearance,
        FeatureFamily::mixed(0.0, 7),
    ]
}

/// Reference views for `target`: nearest arc neighbours first, alternating
/// sides (`t−1, t+1, t−2, t+2, …`), restricted to `allowed`. Sets for
/// increasing `count` are nested.
pub fn reference_set(target: usize, num_views: usize, count: usize, allowed: &dyn Fn(usize) -> bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    for d in 1..num_views {
        for cand in [target.checked_sub(d), Some(target + d)].into_iter().flatten() {
            if out.len() < count && cand < num_views && allowed(cand) {
                out.push(cand);
            }
        }
    }
    out
}

/// A generated scene suite.
#[derive(Debug, Clone)]
pub struct Suite {
    pub config: SuiteConfig,
    pub bundles: Vec<SceneBundle>,
}

impl Suite {
    pub fn generate(config: SuiteConfig) -> Result<Self> {
        if config.num_scenes == 0 {
            return Err(Error::input("suite needs at least one scene"));
        }
        if config.train_removal.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::input("train_removal fractions must lie in [0, 1)"));
        }
        if config.view_counts.iter().any(|&v| v == 0 || v >= config.arc.count) {
            return Err(Error::input("view counts must lie in 1..arc.count"));
        }
        let bundles = (0..config.num_scenes as u64)
            .into_par_iter()
            .map(|k| SceneBundle::generate(config.first_seed + k, &config.scene, &config.arc))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, bundles })
    }

    fn is_test_scene(&self, scene: usize) -> bool {
        match &self.config.split {
            Split::HeldOutScenes { test_scenes } => scene + test_scenes >= self.bundles.len(),
            Split::HeldOutViews { .. } => true,
        }
    }

    fn is_train_scene(&self, scene: usize) -> bool {
        match &self.config.split {
            Split::HeldOutScenes { test_scenes } => scene + test_scenes < self.bundles.len(),
            Split::HeldOutViews { .. } => true,
        }
    }

    fn test_targets(&self) -> Vec<usize> {
        match &self.config.split {
            Split::HeldOutScenes { .. } => (0..self.config.arc.count).collect(),
            Split::HeldOutViews { test_targets } => test_targets.clone(),
        }
    }

    fn held_out_view(&self, v: usize) -> bool {
        match &self.config.split {
            Split::HeldOutScenes { .. } => false,
            Split::HeldOutViews { test_targets } => test_targets.contains(&v),
        }
    }

    /// Per-view `[t_g; t_l]` token grids of one scene.
    pub fn scene_features(&self, scene: usize, family: &FeatureFamily) -> Result<Vec<FeatureGrid>> {
        let bundle = &self.bundles[scene];
        bundle
            .views
            .iter()
            .enumerate()
            .map(|(k, view)| {
                let ctx = ViewContext {
                    norm: bundle.manifest.normalization,
                    scene_seed: bundle.manifest.seed,
                    view_index: k as u64,
                };
                concat_global_local(&extract_features(view, family, self.config.patch, &ctx)?)
            })
            .collect()
    }

    /// Training samples: every non-held-out target with every configured
    /// view count, references drawn from non-held-out views.
    pub fn train_samples(&self, family: &FeatureFamily) -> Result<Vec<ProbeSample>> {
        let n = self.config.arc.count;
        let jobs: Vec<(usize, usize, usize)> = (0..self.bundles.len())
            .filter(|&s| self.is_train_scene(s))
            .flat_map(|s| {
                (0..n)
                    .filter(|&t| !self.held_out_view(t))
                    .flat_map(move |t| self.config.view_counts.iter().map(move |&c| (s, t, c)))
            })
            .collect();
        let features = self.features_by_scene(family, |s| self.is_train_scene(s))?;
        jobs.into_iter()
            .filter_map(|(s, t, c)| {
                let refs = reference_set(t, n, c, &|v| !self.held_out_view(v));
                (refs.len() == c).then_some((s, t, refs))
            })
            .flat_map(|(s, t, refs)| {
                let features = &features;
                self.config.train_removal.iter().enumerate().map(move |(k, &fraction)| {
                    let removal = (fraction > 0.0).then_some(Removal {
                        fraction,
                        seed: TRAIN_REMOVAL_SEED ^ ((t as u64) << 8) ^ k as u64,
                    });
                    Ok(ProbeSample {
                        input: self.warp_tokens(s, &features[&s], &refs, t, removal)?,
                        target: self.bundles[s].views[t].rgb.clone(),
                    })
                })
            })
            .collect()
    }

    /// Evaluation samples, optionally with a fraction of the anchored token
    /// points removed before warping.
    pub fn test_samples(&self, family: &FeatureFamily, removal: Option<Removal>) -> Result<Vec<EvalSample>> {
        let n = self.config.arc.count;
        let features = self.features_by_scene(family, |s| self.is_test_scene(s))?;
        let mut out = Vec::new();
        for s in (0..self.bundles.len()).filter(|&s| self.is_test_scene(s)) {
            for t in self.test_targets() {
                for &c in &self.config.view_counts {
                    let refs = reference_set(t, n, c, &|v| !self.held_out_view(v));
                    if refs.len() != c {
                        continue;
                    }
                    out.push(EvalSample {
                        input: self.warp_tokens(s, &features[&s], &refs, t, removal)?,
                        target: self.bundles[s].views[t].rgb.clone(),
                        view_count: c,
                    });
                }
            }
        }
        Ok(out)
    }

    fn features_by_scene(
        &self,
        family: &FeatureFamily,
        keep: impl Fn(usize) -> bool + Sync,
    ) -> Result<BTreeMap<usize, Vec<FeatureGrid>>> {
        (0..self.bundles.len())
            .into_par_iter()
            .filter(|&s| keep(s))
            .map(|s| Ok((s, self.scene_features(s, family)?)))
            .collect()
    }

    fn warp_tokens(
        &self,
        scene: usize,
        grids: &[FeatureGrid],
        refs: &[usize],
        target: usize,
        removal: Option<Removal>,
    ) -> Result<WarpedPlane> {
        let b = &self.bundles[scene];
        let g: Vec<FeatureGrid> = refs.iter().map(|&r| grids[r].clone()).collect();
        let pm: Vec<Pointmap> = refs.iter().map(|&r| b.views[r].pointmap.clone()).collect();
        let cams: Vec<CameraPose> = refs.iter().map(|&r| b.views[r].camera.clone()).collect();
        let mut cloud = anchor_tokens(&g, &pm, &cams, false)?;
        if let Some(rm) = removal {
            cloud = subsample_points(&cloud, 1.0 - rm.fraction, rm.seed ^ b.manifest.seed)?;
        }
        rasterize_tokens(&cloud, &b.views[target].camera, self.config.patch, false)
    }

    /// Full-resolution RGB of the references splatted into the target camera,
    /// with holes left at zero. Returns the image and its hole mask.
    pub fn warped_image(&self, scene: usize, refs: &[usize], target: usize) -> Result<WarpedPlane> {
        let b = &self.bundles[scene];
        let pms: Vec<Pointmap> = refs.iter().map(|&r| b.views[r].pointmap.clone()).collect();
        let rgbs: Vec<_> = refs.iter().map(|&r| b.views[r].rgb.clone()).collect();
        let cloud = aggregate_pointmaps(&pms, &rgbs)?;
        let cam = &b.views[target].camera;
        rasterize(&cloud, cam, (cam.width, cam.height))
    }
}

/// Point-removal setting for robustness evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    /// Fraction of anchored points dropped, in `[0, 1]`.
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub scene_seed: u64,
    pub view_count: usize,
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub hole_fraction: f64,
}

/// Warped-image baseline rows for every scene, test target and view count.
pub fn warped_image_baseline(suite: &Suite) -> Result<Vec<BaselineRow>> {
    let n = suite.config.arc.count;
    let jobs: Vec<(usize, usize, usize)> = (0..suite.bundles.len())
        .flat_map(|s| {
            suite
                .test_targets()
                .into_iter()
                .flat_map(move |t| suite.config.view_counts.iter().map(move |&c| (s, t, c)))
        })
        .collect();
    jobs.into_par_iter()
        .filter_map(|(s, t, c)| {
            let refs = reference_set(t, n, c, &|v| !suite.held_out_view(v));
            (refs.len() == c).then_some((s, t, refs))
        })
        .map(|(s, t, refs)| {
            let warped = suite.warped_image(s, &refs, t)?;
            let target = &suite.bundles[s].views[t].rgb;
            let m = score_image(&warped.payload, target, &warped.mask, refs.len())?;
            Ok(BaselineRow {
                scene_seed: suite.bundles[s].manifest.seed,
                view_count: refs.len(),
                psnr_db: m.psnr_db,
                ssim: m.ssim,
                hole_fraction: warped.hole_fraction(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ProbeExperiment {
    pub family: String,
    pub decoder: ProbeDecoder,
    pub loss_curve: Vec<f64>,
    pub report: EvalReport,
}

/// Trains a probe on the suite's training samples for `family` and
/// evaluates it on the test samples.
pub fn probe_experiment(suite: &Suite, family: &FeatureFamily, cfg: &TrainConfig) -> Result<ProbeExperiment> {
    let train = suite.train_samples(family)?;
    let outcome = train_probe(&train, cfg)?;
    let test = suite.test_samples(family, None)?;
    let report = eval_probe(&outcome.decoder, &test)?;
    Ok(ProbeExperiment {
        family: family.name().to_string(),
        decoder: outcome.decoder,
        loss_curve: outcome.loss_curve,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub removal: f64,
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR change relative to the no-removal evaluation.
    pub delta_psnr_db: f64,
}

/// Evaluates a trained decoder with increasing point removal.
pub fn robustness(
    suite: &Suite,
    family: &FeatureFamily,
    decoder: &ProbeDecoder,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let base = eval_probe(decoder, &suite.test_samples(family, None)?)?.overall;
    let mut rows = vec![RobustnessRow {
        removal: 0.0,
        psnr_db: base.mean_psnr_db,
        ssim: base.mean_ssim,
        delta_psnr_db: 0.0,
    }];
    for &fraction in fractions {
        let removal = Removal { fraction, seed };
        let r = eval_probe(decoder, &suite.test_samples(family, Some(removal))?)?.overall;
        rows.push(RobustnessRow {
            removal: fraction,
            psnr_db: r.mean_psnr_db,
            ssim: r.mean_ssim,
            delta_psnr_db: r.mean_psnr_db - base.mean_psnr_db,
        });
    }
    Ok(rows)
}
