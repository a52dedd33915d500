//! `viewcond`: command-line driver for scene generation, feature warping,
//! condition assembly, representation analysis and reconstruction probing.
//!
//! Every command prints one JSON summary line on stdout. Exit status is 0 on
//! success, 2 for malformed input and 3 for numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use viewcond::analysis::{
    cosine_similarity_map, geometric_correspondence_score, lds_score, semantic_correspondence_score, LabelMap,
};
use viewcond::encoding::{build_reference_condition, build_target_condition, FourierConfig};
use viewcond::features::{concat_global_local, extract_features, FeatureFamily, ViewContext};
use viewcond::geometry::{
    aggregate_pointmaps, anchor_tokens, pointmap_tokens, rasterize, rasterize_tokens, subsample_points,
    warp_features_with_coords, FeatureGrid, WarpedPlane,
};
use viewcond::io::{
    load_bundle, read_rnvt, save_bundle, write_atomic, write_pgm, write_ppm, write_rnvt, RnvtTensor, SceneBundle,
    TensorData,
};
use viewcond::probe::{eval_probe, train_probe, ProbeArch, ProbeDecoder, TrainConfig};
use viewcond::protocol::{robustness, Removal, Split, Suite, SuiteConfig};
use viewcond::scene::{ArcSpec, SceneSpec};
use viewcond::{CameraPose, Grid};

#[derive(Parser)]
#[command(name = "viewcond", version, about = "Projected representation conditioning toolkit")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene and render it from a camera arc.
    SceneGen(SceneGenArgs),
    /// Extract per-view token features of a scene bundle.
    Features(FeaturesArgs),
    /// Warp reference RGB or token features into a target camera.
    Warp(WarpArgs),
    /// Assemble the Fourier-encoded reference and target condition planes.
    Condition(ConditionArgs),
    /// Correspondence and spatial-similarity analysis of a feature family.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train or evaluate the reconstruction probe.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Probe PSNR under increasing point removal.
    Robustness(RobustnessArgs),
}

#[derive(Args)]
struct SceneGenArgs {
    #[arg(long, env = "RENOV_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of cameras on the arc.
    #[arg(long, default_value_t = 7)]
    views: usize,
    /// Image resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64")]
    res: String,
    #[arg(long, default_value_t = 6)]
    quads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FamilyArgs {
    /// oracle_geom, appearance, random or mixed.
    #[arg(long, default_value = "oracle_geom")]
    family: String,
    /// Fourier frequencies of the geometric families.
    #[arg(long)]
    num_freqs: Option<usize>,
    /// Noise added to the geometric families.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, env = "RENOV_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    family: FamilyArgs,
    /// Prepend the per-view global token to every local token.
    #[arg(long)]
    global_local: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Payload {
    Rgb,
    Features,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Comma-separated reference view indices.
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<usize>,
    #[arg(long)]
    target: usize,
    #[arg(long, value_enum, default_value = "rgb")]
    payload: Payload,
    /// Fraction of points dropped before rasterization.
    #[arg(long, default_value_t = 0.0)]
    remove: f64,
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConditionArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<usize>,
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Geometric correspondence PCK between two views.
    Corr(CorrArgs),
    /// Instance-label correspondence between two views.
    Semcorr(CorrArgs),
    /// Local-vs-distant similarity of one view's tokens.
    Lds(LdsArgs),
}

#[derive(Args)]
struct CorrArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    view_a: usize,
    #[arg(long, default_value_t = 1)]
    view_b: usize,
    #[command(flatten)]
    family: FamilyArgs,
    /// Hit radius in token cells (geometric correspondence only).
    #[arg(long, default_value_t = 1)]
    tau: usize,
    #[arg(long, default_value_t = 200)]
    queries: usize,
    /// Also write the similarity map of the first query as a PGM.
    #[arg(long)]
    sim_map: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LdsArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value_t = 1)]
    r_local: usize,
    #[arg(long, default_value_t = 4)]
    r_far: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Generate a suite, train a probe and evaluate it on held-out scenes.
    Train(TrainArgs),
    /// Re-evaluate a saved probe checkpoint.
    Eval(EvalArgs),
}

/// Suite and probe settings. Defaults match the benchmark configuration.
#[derive(Args, Clone)]
struct ProbeArgs {
    #[arg(long, default_value = "mixed")]
    family: String,
    #[arg(long, default_value_t = viewcond::features::DEFAULT_GEOM_FREQS)]
    num_freqs: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, env = "RENOV_SEED", default_value_t = 0)]
    seed: u64,
    /// Reference-view counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    views: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    scenes: usize,
    #[arg(long, default_value_t = 20)]
    test_scenes: usize,
    #[arg(long, default_value_t = 1000)]
    first_seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    reduced: usize,
    #[arg(long)]
    no_attn: bool,
    #[arg(long)]
    no_pos_embed: bool,
    /// Point-removal fractions applied to copies of each training sample.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
    train_removal: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    /// Checkpoint directory; also receives loss.csv and metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fraction of anchored points removed at evaluation time.
    #[arg(long, default_value_t = 0.0)]
    remove: f64,
    #[arg(long, default_value_t = 0)]
    removal_seed: u64,
    /// Where to write metrics.json; defaults to the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    /// Reuse a trained probe instead of training one from the probe flags.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.3, 0.5])]
    remove: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    removal_seed: u64,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")
        .and_then(|_| run(cli.command));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<viewcond::Error>())
                .map_or(2, |c| c.exit_code());
            println!("{}", json!({ "status": "error", "exit_code": code, "message": format!("{e:#}") }));
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<Value> {
    match command {
        Command::SceneGen(a) => scene_gen(a),
        Command::Features(a) => features(a),
        Command::Warp(a) => warp(a),
        Command::Condition(a) => condition(a),
        Command::Analyze(AnalyzeCommand::Corr(a)) => corr(a, false),
        Command::Analyze(AnalyzeCommand::Semcorr(a)) => corr(a, true),
        Command::Analyze(AnalyzeCommand::Lds(a)) => lds(a),
        Command::Probe(ProbeCommand::Train(a)) => probe_train(a),
        Command::Probe(ProbeCommand::Eval(a)) => probe_eval(a),
        Command::Robustness(a) => robustness_cmd(a),
    }
}

fn parse_res(res: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = res
        .split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)));
    match parsed {
        Some((w, h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => bail!(viewcond::Error::Input(format!("--res: expected WIDTHxHEIGHT, got {res:?}"))),
    }
}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    viewcond::Error::Input(msg.into()).into()
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mask_tensor(mask: &[bool], rows: usize, cols: usize) -> anyhow::Result<RnvtTensor> {
    let data = mask.iter().map(|&m| m as u8).collect();
    Ok(RnvtTensor::new(vec![rows as u64, cols as u64], TensorData::U8(data))?)
}

fn vec_tensor(v: &[f64]) -> anyhow::Result<RnvtTensor> {
    Ok(RnvtTensor::new(vec![v.len() as u64], TensorData::F64(v.to_vec()))?)
}

fn load(dir: &Path) -> anyhow::Result<SceneBundle> {
    load_bundle(dir).with_context(|| format!("--scene: cannot load bundle {}", dir.display()))
}

fn check_view(bundle: &SceneBundle, k: usize, flag: &str) -> anyhow::Result<()> {
    if k >= bundle.views.len() {
        return Err(input_error(format!(
            "{flag}: view {k} out of range (bundle has {} views)",
            bundle.views.len()
        )));
    }
    Ok(())
}

impl FamilyArgs {
    fn family(&self) -> anyhow::Result<FeatureFamily> {
        let base = FeatureFamily::from_name(&self.family, self.seed).context("--family")?;
        Ok(match base {
            FeatureFamily::OracleGeom { num_freqs, seed, .. } => FeatureFamily::OracleGeom {
                num_freqs: self.num_freqs.unwrap_or(num_freqs),
                sigma: self.sigma,
                seed,
            },
            FeatureFamily::Mixed { num_freqs, seed, .. } => FeatureFamily::Mixed {
                num_freqs: self.num_freqs.unwrap_or(num_freqs),
                sigma: self.sigma,
                seed,
            },
            other => other,
        })
    }

    fn local_features(&self, bundle: &SceneBundle, k: usize) -> anyhow::Result<FeatureGrid> {
        let ctx = ViewContext {
            norm: bundle.manifest.normalization,
            scene_seed: bundle.manifest.seed,
            view_index: k as u64,
        };
        Ok(extract_features(bundle.view(k)?, &self.family()?, self.patch, &ctx)?)
    }
}

fn scene_gen(a: SceneGenArgs) -> anyhow::Result<Value> {
    let (width, height) = parse_res(&a.res)?;
    let spec = SceneSpec {
        num_quads: a.quads,
        ..SceneSpec::default()
    };
    let arc = ArcSpec {
        count: a.views,
        width,
        height,
        ..ArcSpec::default()
    };
    let bundle = SceneBundle::generate(a.seed, &spec, &arc)?;
    save_bundle(&a.out, &bundle)?;
    Ok(json!({
        "command": "scene-gen",
        "status": "ok",
        "out": a.out,
        "seed": a.seed,
        "views": a.views,
        "width": width,
        "height": height,
        "quads": bundle.scene().quads.len(),
    }))
}

fn features(a: FeaturesArgs) -> anyhow::Result<Value> {
    let bundle = load(&a.scene)?;
    std::fs::create_dir_all(&a.out)?;
    let mut channels = 0;
    for k in 0..bundle.views.len() {
        let mut grid = a.family.local_features(&bundle, k)?;
        if a.global_local {
            grid = concat_global_local(&grid)?;
        }
        channels = grid.channels();
        write_rnvt(&a.out.join(format!("view_{k:03}.rnvt")), &RnvtTensor::from_grid(&grid.tokens))?;
        write_rnvt(
            &a.out.join(format!("view_{k:03}_valid.rnvt")),
            &mask_tensor(&grid.valid, grid.rows(), grid.cols())?,
        )?;
    }
    let manifest = json!({
        "family": a.family.family()?,
        "patch": a.family.patch,
        "channels": channels,
        "global_local": a.global_local,
        "views": bundle.views.len(),
    });
    write_json(&a.out.join("features.json"), &manifest)?;
    Ok(json!({
        "command": "features",
        "status": "ok",
        "out": a.out,
        "family": a.family.family,
        "channels": channels,
        "views": bundle.views.len(),
    }))
}

fn warp(a: WarpArgs) -> anyhow::Result<Value> {
    if !(0.0..=1.0).contains(&a.remove) {
        return Err(input_error(format!("--remove: {} is not in [0, 1]", a.remove)));
    }
    let bundle = load(&a.scene)?;
    check_view(&bundle, a.target, "--target")?;
    for &r in &a.refs {
        check_view(&bundle, r, "--refs")?;
    }
    let tgt = bundle.view(a.target)?;
    let pms: Vec<_> = a.refs.iter().map(|&r| bundle.views[r].pointmap.clone()).collect();
    let keep = 1.0 - a.remove;
    let (plane, target_valid): (WarpedPlane, Vec<bool>) = match a.payload {
        Payload::Rgb => {
            let rgbs: Vec<Grid> = a.refs.iter().map(|&r| bundle.views[r].rgb.clone()).collect();
            let cloud = subsample_points(&aggregate_pointmaps(&pms, &rgbs)?, keep, a.family.seed)?;
            let cam = &tgt.camera;
            let plane = rasterize(&cloud, cam, (cam.width, cam.height))?;
            write_ppm(&a.out_path("warped.ppm")?, &plane.payload)?;
            (plane, tgt.pointmap.valid_mask().to_vec())
        }
        Payload::Features => {
            let grids = a
                .refs
                .iter()
                .map(|&r| a.family.local_features(&bundle, r))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let cams: Vec<CameraPose> = a.refs.iter().map(|&r| bundle.views[r].camera.clone()).collect();
            let cloud = subsample_points(&anchor_tokens(&grids, &pms, &cams, false)?, keep, a.family.seed)?;
            let plane = rasterize_tokens(&cloud, &tgt.camera, a.family.patch, false)?;
            let (_, valid) = pointmap_tokens(&tgt.pointmap, a.family.patch)?;
            (plane, valid)
        }
    };
    let (h, w) = (plane.height(), plane.width());
    write_rnvt(&a.out_path("payload.rnvt")?, &RnvtTensor::from_grid(&plane.payload))?;
    let depth = RnvtTensor::new(vec![h as u64, w as u64], TensorData::F64(plane.depth.clone()))?;
    write_rnvt(&a.out_path("depth.rnvt")?, &depth)?;
    write_rnvt(&a.out_path("mask.rnvt")?, &mask_tensor(&plane.mask, h, w)?)?;

    let valid_total = target_valid.iter().filter(|&&v| v).count();
    let valid_covered = target_valid.iter().zip(&plane.mask).filter(|(&v, &m)| v && !m).count();
    Ok(json!({
        "command": "warp",
        "status": "ok",
        "out": a.out,
        "width": w,
        "height": h,
        "coverage": plane.covered() as f64 / (h * w) as f64,
        "hole_fraction": plane.hole_fraction(),
        "valid_coverage": if valid_total == 0 { 0.0 } else { valid_covered as f64 / valid_total as f64 },
    }))
}

impl WarpArgs {
    fn out_path(&self, name: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

fn condition(a: ConditionArgs) -> anyhow::Result<Value> {
    let bundle = load(&a.scene)?;
    check_view(&bundle, a.target, "--target")?;
    for &r in &a.refs {
        check_view(&bundle, r, "--refs")?;
    }
    std::fs::create_dir_all(&a.out)?;
    let norm = bundle.manifest.normalization;
    let (geo_cfg, feat_cfg) = (FourierConfig::geometry(), FourierConfig::features());
    let mut grids = Vec::new();
    let mut ref_layout = String::new();
    let mut ref_channels = 0;
    for &r in &a.refs {
        let feats = concat_global_local(&a.family.local_features(&bundle, r)?)?;
        let (coords, valid) = pointmap_tokens(&bundle.views[r].pointmap, a.family.patch)?;
        let plane = build_reference_condition(&coords, &valid, &feats, &norm, &geo_cfg, &feat_cfg)?;
        write_rnvt(&a.out.join(format!("ref_{r:03}.rnvt")), &RnvtTensor::from_grid(&plane.channels))?;
        ref_layout = plane.layout_json()?;
        ref_channels = plane.channels.channels();
        grids.push(feats);
    }
    write_atomic(&a.out.join("ref_layout.json"), ref_layout.as_bytes())?;

    let pms: Vec<_> = a.refs.iter().map(|&r| bundle.views[r].pointmap.clone()).collect();
    let cams: Vec<CameraPose> = a.refs.iter().map(|&r| bundle.views[r].camera.clone()).collect();
    let warped = warp_features_with_coords(&grids, &pms, &cams, &bundle.view(a.target)?.camera)?;
    let target = build_target_condition(&warped, &norm, &geo_cfg, &feat_cfg)?;
    write_rnvt(&a.out.join("target.rnvt"), &RnvtTensor::from_grid(&target.channels))?;
    write_atomic(&a.out.join("target_layout.json"), target.layout_json()?.as_bytes())?;
    Ok(json!({
        "command": "condition",
        "status": "ok",
        "out": a.out,
        "reference_channels": ref_channels,
        "target_channels": target.channels.channels(),
        "hole_fraction": warped.hole_fraction(),
    }))
}

fn corr(a: CorrArgs, semantic: bool) -> anyhow::Result<Value> {
    let bundle = load(&a.scene)?;
    check_view(&bundle, a.view_a, "--view-a")?;
    check_view(&bundle, a.view_b, "--view-b")?;
    let ga = a.family.local_features(&bundle, a.view_a)?;
    let gb = a.family.local_features(&bundle, a.view_b)?;
    let (va, vb) = (bundle.view(a.view_a)?, bundle.view(a.view_b)?);
    let report = if semantic {
        semantic_correspondence_score(&ga, &gb, LabelMap::from(va), LabelMap::from(vb), a.queries, a.family.seed)?
    } else {
        geometric_correspondence_score(&ga, &gb, va, vb, a.tau, a.queries, a.family.seed)?
    };
    std::fs::create_dir_all(&a.out)?;
    let name = if semantic { "semcorr" } else { "corr" };
    write_json(&a.out.join(format!("{name}.json")), &serde_json::to_value(&report)?)?;
    write_atomic(&a.out.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
    if a.sim_map {
        if let Some(q) = report.per_query.first() {
            let map = cosine_similarity_map(ga.tokens.at(q.query.0, q.query.1), &gb)?;
            write_pgm(&a.out.join(format!("{name}_sim.pgm")), &upsample(&map.map(|c| 0.5 * (c + 1.0)), gb.patch_size))?;
        }
    }
    Ok(json!({
        "command": format!("analyze {name}"),
        "status": "ok",
        "out": a.out,
        "family": a.family.family,
        "pck": report.pck_at_tau,
        "tau": report.tau_tokens,
        "num_queries": report.num_queries,
    }))
}

/// Nearest-neighbour upsampling of a single-channel grid.
fn upsample(g: &Grid, factor: usize) -> Grid {
    let (h, w) = (g.height() * factor, g.width() * factor);
    let data = (0..h * w).map(|p| g.at(p / w / factor, p % w / factor)[0]).collect();
    Grid::from_vec(h, w, 1, data).expect("shape is consistent by construction")
}

fn lds(a: LdsArgs) -> anyhow::Result<Value> {
    let bundle = load(&a.scene)?;
    check_view(&bundle, a.view, "--view")?;
    let grid = a.family.local_features(&bundle, a.view)?;
    let score = lds_score(&grid, a.r_local, a.r_far)?;
    let summary = json!({
        "command": "analyze lds",
        "status": "ok",
        "family": a.family.family,
        "view": a.view,
        "r_local": a.r_local,
        "r_far": a.r_far,
        "lds": score,
    });
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("lds.json"), &summary)?;
    }
    Ok(summary)
}

impl ProbeArgs {
    fn family(&self) -> anyhow::Result<FeatureFamily> {
        FamilyArgs {
            family: self.family.clone(),
            num_freqs: Some(self.num_freqs),
            sigma: self.sigma,
            patch: 8,
            seed: self.seed,
        }
        .family()
    }

    fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            num_scenes: self.scenes,
            first_seed: self.first_seed,
            view_counts: self.views.clone(),
            split: Split::HeldOutScenes {
                test_scenes: self.test_scenes,
            },
            train_removal: self.train_removal.clone(),
            ..SuiteConfig::benchmark()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            learning_rate: self.lr,
            hidden: self.hidden,
            reduced_channels: self.reduced,
            attn_enabled: !self.no_attn,
            pos_embed: !self.no_pos_embed,
            seed: self.seed,
            ..TrainConfig::benchmark()
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.test_scenes == 0 || self.test_scenes >= self.scenes {
            return Err(input_error(format!(
                "--test-scenes: {} must lie in 1..{} (--scenes)",
                self.test_scenes, self.scenes
            )));
        }
        Ok(())
    }
}

/// A trained probe plus everything needed to rebuild its evaluation suite.
struct Checkpoint {
    family: FeatureFamily,
    suite: SuiteConfig,
    train: TrainConfig,
    decoder: ProbeDecoder,
}

impl Checkpoint {
    fn save(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let (shift, scale) = self.decoder.input_normalization();
        write_rnvt(&dir.join("params.rnvt"), &vec_tensor(self.decoder.params())?)?;
        write_rnvt(&dir.join("input_shift.rnvt"), &vec_tensor(shift)?)?;
        write_rnvt(&dir.join("input_scale.rnvt"), &vec_tensor(scale)?)?;
        // written last so a complete manifest implies complete tensors
        write_json(
            &dir.join("checkpoint.json"),
            &json!({
                "format_version": 1,
                "family": self.family,
                "suite": self.suite,
                "train": self.train,
                "arch": self.decoder.arch(),
            }),
        )
    }

    fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join("checkpoint.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("--checkpoint: cannot read {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| input_error(format!("checkpoint.json: {e}")))?;
        let field = |name: &str| {
            v.get(name)
                .cloned()
                .ok_or_else(|| input_error(format!("checkpoint.json: missing field `{name}`")))
        };
        let parse_err = |name: &str, e: serde_json::Error| input_error(format!("checkpoint.json field `{name}`: {e}"));
        let family: FeatureFamily = serde_json::from_value(field("family")?).map_err(|e| parse_err("family", e))?;
        let suite: SuiteConfig = serde_json::from_value(field("suite")?).map_err(|e| parse_err("suite", e))?;
        let train: TrainConfig = serde_json::from_value(field("train")?).map_err(|e| parse_err("train", e))?;
        let arch: ProbeArch = serde_json::from_value(field("arch")?).map_err(|e| parse_err("arch", e))?;
        let mut decoder = ProbeDecoder::from_params(arch, read_rnvt(&dir.join("params.rnvt"))?.data().to_f64())?;
        decoder.set_raw_input_normalization(
            read_rnvt(&dir.join("input_shift.rnvt"))?.data().to_f64(),
            read_rnvt(&dir.join("input_scale.rnvt"))?.data().to_f64(),
        )?;
        Ok(Self {
            family,
            suite,
            train,
            decoder,
        })
    }
}

fn train_checkpoint(a: &ProbeArgs) -> anyhow::Result<(Checkpoint, Suite, Vec<f64>)> {
    a.validate()?;
    let family = a.family()?;
    let train = a.train_config();
    let suite = Suite::generate(a.suite_config())?;
    log::info!("generated {} scenes", suite.bundles.len());
    let outcome = train_probe(&suite.train_samples(&family)?, &train)?;
    let ckpt = Checkpoint {
        family,
        suite: suite.config.clone(),
        train,
        decoder: outcome.decoder,
    };
    Ok((ckpt, suite, outcome.loss_curve))
}

fn view_count_table(report: &viewcond::probe::EvalReport) -> Value {
    report
        .by_view_count
        .iter()
        .map(|(k, g)| (k.to_string(), json!({ "psnr_db": g.mean_psnr_db, "ssim": g.mean_ssim })))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn probe_train(a: TrainArgs) -> anyhow::Result<Value> {
    let out = a.out;
    let (ckpt, suite, loss_curve) = train_checkpoint(&a.probe)?;
    let report = eval_probe(&ckpt.decoder, &suite.test_samples(&ckpt.family, None)?)?;
    ckpt.save(&out)?;
    let mut csv = String::from("step,loss\n");
    for (k, l) in loss_curve.iter().enumerate() {
        csv.push_str(&format!("{k},{l}\n"));
    }
    write_atomic(&out.join("loss.csv"), csv.as_bytes())?;
    write_json(&out.join("metrics.json"), &serde_json::to_value(&report)?)?;
    Ok(json!({
        "command": "probe train",
        "status": "ok",
        "out": out,
        "family": ckpt.family.name(),
        "final_loss": loss_curve.last(),
        "psnr_db": report.overall.mean_psnr_db,
        "ssim": report.overall.mean_ssim,
        "by_view_count": view_count_table(&report),
    }))
}

fn probe_eval(a: EvalArgs) -> anyhow::Result<Value> {
    if !(0.0..1.0).contains(&a.remove) {
        return Err(input_error(format!("--remove: {} is not in [0, 1)", a.remove)));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let suite = Suite::generate(ckpt.suite.clone())?;
    let removal = (a.remove > 0.0).then_some(Removal {
        fraction: a.remove,
        seed: a.removal_seed,
    });
    let report = eval_probe(&ckpt.decoder, &suite.test_samples(&ckpt.family, removal)?)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.clone());
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &serde_json::to_value(&report)?)?;
    Ok(json!({
        "command": "probe eval",
        "status": "ok",
        "out": out,
        "family": ckpt.family.name(),
        "removal": a.remove,
        "psnr_db": report.overall.mean_psnr_db,
        "ssim": report.overall.mean_ssim,
        "by_view_count": view_count_table(&report),
    }))
}

fn robustness_cmd(a: RobustnessArgs) -> anyhow::Result<Value> {
    if let Some(f) = a.remove.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(input_error(format!("--remove: {f} is not in [0, 1)")));
    }
    let (ckpt, suite) = match &a.checkpoint {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            let suite = Suite::generate(ckpt.suite.clone())?;
            (ckpt, suite)
        }
        None => {
            let (ckpt, suite, _) = train_checkpoint(&a.probe)?;
            ckpt.save(&a.out.join("checkpoint"))?;
            (ckpt, suite)
        }
    };
    let rows = robustness(&suite, &ckpt.family, &ckpt.decoder, &a.remove, a.removal_seed)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("robustness.json"), &serde_json::to_value(&rows)?)?;
    Ok(json!({
        "command": "robustness",
        "status": "ok",
        "out": a.out,
        "family": ckpt.family.name(),
        "rows": rows,
    }))
}
