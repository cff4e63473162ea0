use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::Args;
use lgsplat_core::align::{self, Correspondence, Feature};
use lgsplat_core::densify::{self, DensifyConfig};
use lgsplat_core::eval::{self, MetricsReport, RmseDirection, ViewMetrics};
use lgsplat_core::lidar_maps;
use lgsplat_core::losses::{DepthLossMode, DepthScale, LossOptions, LossWeights, Reduction};
use lgsplat_core::rasterizer::{self, RenderSettings};
use lgsplat_core::testbed::{self, SceneSpec};
use lgsplat_core::trainer::{self, CheckpointPolicy, LearningRates, TrainConfig, View};
use lgsplat_core::{io, DepthNormalMaps, DistortedCamera, LidarCloud};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{merge, ConfigFile, Merged};
use crate::dataset::{save_cameras, view_name, write_json, Dataset, Split, CAMERAS, CAMERAS_INIT};

pub struct Context {
    pub file: ConfigFile,
    pub threads: Option<usize>,
}

fn required<T>(v: Option<T>, key: &str, section: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("missing --{} (or `{key}` in [{section}])", key.replace('_', "-")))
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config_file: Option<&'a str>,
    file_options: &'a Map<String, Value>,
    flag_options: &'a Map<String, Value>,
    resolved: &'a T,
    threads_requested: Option<usize>,
    threads: usize,
}

fn write_manifest<A, T: Serialize>(ctx: &Context, command: &str, merged: &Merged<A>, resolved: &T, dir: &Path) -> Result<()> {
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_file: ctx.file.path.as_deref(),
            file_options: &merged.from_file,
            flag_options: &merged.from_flags,
            resolved,
            threads_requested: ctx.threads,
            threads: rayon::current_num_threads(),
        },
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Parses `all` or a comma-separated list of view indices.
fn parse_views(spec: &str, count: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..count).collect());
    }
    spec.split(',')
        .map(|s| {
            let i: usize = s.trim().parse().with_context(|| format!("bad view index '{s}'"))?;
            if i >= count {
                bail!("view {i} out of range (dataset has {count})");
            }
            Ok(i)
        })
        .collect()
}

// ---------------------------------------------------------------- synth

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Built-in scene: `standard` or `single_plane`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Scene description JSON used instead of a preset.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// LiDAR points per m².
    #[arg(long)]
    pub lidar_density: Option<f64>,
    /// Standard deviation of LiDAR range noise, meters.
    #[arg(long)]
    pub range_noise: Option<f64>,
    /// Image width in pixels (height follows the preset aspect unless set).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Rotation of the perturbed initial poses, degrees.
    #[arg(long)]
    pub perturb_deg: Option<f64>,
    /// Translation of the perturbed initial poses, meters.
    #[arg(long)]
    pub perturb_m: Option<f64>,
    /// Feature observations per view.
    #[arg(long)]
    pub features: Option<usize>,
    /// Pixel noise of the feature observations.
    #[arg(long)]
    pub feature_noise: Option<f64>,
}

#[derive(Serialize)]
struct SynthSettings {
    preset: String,
    scene: Option<PathBuf>,
    seed: u64,
    lidar_density: f64,
    range_noise: f64,
    width: usize,
    height: usize,
    perturb_deg: f64,
    perturb_m: f64,
    features: usize,
    feature_noise: f64,
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let mut merged = merge(&ctx.file, "synth", args)?;
    let o = &merged.options;
    let out = required(o.out.clone(), "out", "synth")?;
    let seed = o.seed.unwrap_or(42);
    let preset = o.preset.clone().unwrap_or_else(|| "standard".into());
    let mut spec = match &o.scene {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SceneSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match preset.as_str() {
            "standard" => SceneSpec::standard(seed),
            "single_plane" => SceneSpec::single_plane(seed),
            p => bail!("unknown preset '{p}' (expected standard or single_plane)"),
        },
    };
    spec.seed = seed;
    if let Some(d) = o.lidar_density {
        spec.lidar_density = d;
    }
    if let Some(n) = o.range_noise {
        spec.range_noise = n;
    }
    if let Some(w) = o.width {
        let aspect = spec.rig.height as f64 / spec.rig.width as f64;
        spec.rig.width = w;
        spec.rig.height = o.height.unwrap_or((w as f64 * aspect).round() as usize);
    } else if let Some(h) = o.height {
        spec.rig.height = h;
    }
    let settings = SynthSettings {
        preset,
        scene: o.scene.clone(),
        seed,
        lidar_density: spec.lidar_density,
        range_noise: spec.range_noise,
        width: spec.rig.width,
        height: spec.rig.height,
        perturb_deg: o.perturb_deg.unwrap_or(2.0),
        perturb_m: o.perturb_m.unwrap_or(1.0),
        features: o.features.unwrap_or(60),
        feature_noise: o.feature_noise.unwrap_or(0.5),
    };

    let start = Instant::now();
    let scene = testbed::make_scene(&spec)?;
    log::info!(
        "generated {} LiDAR points and {} views in {:.1?}",
        scene.cloud.len(),
        scene.cameras.len(),
        start.elapsed()
    );
    for sub in ["images", "truth"] {
        create_dir(&out.join(sub))?;
    }
    write_json(&out.join("scene.json"), &spec)?;
    io::save_lidar_cloud(&scene.cloud, &out.join("lidar.ply"))?;
    save_cameras(&out.join(CAMERAS), &scene.cameras)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let init: Vec<DistortedCamera> = scene
        .cameras
        .iter()
        .map(|c| testbed::perturb_camera(c, settings.perturb_deg, settings.perturb_m, &mut rng))
        .collect();
    save_cameras(&out.join(CAMERAS_INIT), &init)?;
    let mut features = Vec::new();
    for i in 0..scene.cameras.len() {
        let name = view_name(i);
        io::save_png(&scene.images[i], &out.join("images").join(format!("{name}.png")))?;
        io::save_depth_normal(
            &scene.truth[i],
            &out.join("truth").join(format!("{name}_depth.pfm")),
            &out.join("truth").join(format!("{name}_normal.pfm")),
        )?;
        features.extend(testbed::visible_features(
            &scene,
            i,
            settings.features,
            settings.feature_noise,
            &mut rng,
        )?);
    }
    align::write_features(&out.join("features.csv"), &features)?;
    let (train, val, test) = trainer::split_views(scene.cameras.len(), seed);
    write_json(&out.join("split.json"), &Split { train, val, test })?;
    // the manifest describes the dataset, not where it was written
    merged.from_file.remove("out");
    merged.from_flags.remove("out");
    write_manifest(ctx, "synth", &merged, &settings, &out)?;
    log::info!("dataset written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- align

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct AlignArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Camera directory to refine, relative to the dataset.
    #[arg(long)]
    pub cameras: Option<String>,
    /// Output camera directory, relative to the dataset.
    #[arg(long)]
    pub out: Option<String>,
    /// Search radius in pixels for features without a 3D location.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Alternations of matching and refinement for such features.
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Serialize)]
struct AlignSettings {
    data: PathBuf,
    cameras: String,
    out: String,
    radius: f64,
    rounds: usize,
}

#[derive(Serialize)]
struct AlignReportRow {
    view: usize,
    correspondences: usize,
    ok: bool,
    initial_rms: Option<f64>,
    rms: Option<f64>,
    iterations: Option<usize>,
    error: Option<String>,
    /// Pose difference to the reference cameras, when present.
    rotation_error_rad: Option<f64>,
    translation_error_m: Option<f64>,
}

pub fn align(ctx: &Context, args: &AlignArgs) -> Result<()> {
    let merged = merge(&ctx.file, "align", args)?;
    let o = &merged.options;
    let settings = AlignSettings {
        data: required(o.data.clone(), "data", "align")?,
        cameras: o.cameras.clone().unwrap_or_else(|| CAMERAS_INIT.into()),
        out: o.out.clone().unwrap_or_else(|| "cameras_aligned".into()),
        radius: o.radius.unwrap_or(3.0),
        rounds: o.rounds.unwrap_or(3),
    };
    let ds = Dataset::open(&settings.data)?;
    let cloud = io::load_ply_points(&ds.lidar_path())?;
    let cams = ds.cameras(&settings.cameras)?;
    let reference = if settings.cameras != CAMERAS && ds.camera_dir(CAMERAS).is_dir() {
        Some(ds.cameras(CAMERAS)?)
    } else {
        None
    };
    let features = align::read_features(&ds.features_path())?;
    let mut per_view: BTreeMap<usize, Vec<Feature>> = BTreeMap::new();
    for f in features {
        if f.image_id >= cams.len() {
            bail!("features.csv refers to image {} but there are {} cameras", f.image_id, cams.len());
        }
        per_view.entry(f.image_id).or_default().push(f);
    }

    let mut refined = cams.clone();
    let mut rows = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let feats = per_view.remove(&i).unwrap_or_default();
        let with_points = !feats.is_empty() && feats.iter().all(|f| f.point().is_some());
        let (n, outcome) = if with_points {
            let corr: Vec<Correspondence> = align::correspondences_from_points(&cloud, &feats);
            (corr.len(), align::refine_pose(cam, &corr))
        } else {
            let uv: Vec<[f64; 2]> = feats.iter().map(|f| [f.u, f.v]).collect();
            (uv.len(), align::align_camera(&cloud, cam, &uv, settings.radius, settings.rounds))
        };
        let mut row = AlignReportRow {
            view: i,
            correspondences: n,
            ok: outcome.is_ok(),
            initial_rms: None,
            rms: None,
            iterations: None,
            error: None,
            rotation_error_rad: None,
            translation_error_m: None,
        };
        match outcome {
            Ok(r) => {
                row.initial_rms = Some(r.initial_rms);
                row.rms = Some(r.rms);
                row.iterations = Some(r.iterations);
                refined[i] = r.camera;
            }
            Err(e) => {
                log::warn!("view {i}: {e}; keeping the initial pose");
                row.error = Some(e.to_string());
            }
        }
        if let Some(reference) = &reference {
            let (rot, trans) = align::pose_error(&refined[i], &reference[i]);
            row.rotation_error_rad = Some(rot);
            row.translation_error_m = Some(trans);
        }
        rows.push(row);
    }
    let out_dir = ds.camera_dir(&settings.out);
    save_cameras(&out_dir, &refined)?;
    write_json(&out_dir.join("alignment.json"), &rows)?;
    write_manifest(ctx, "align", &merged, &settings, &out_dir)?;
    let ok: Vec<f64> = rows.iter().filter_map(|r| r.rms).collect();
    log::info!(
        "aligned {}/{} views, mean RMS {:.3} px",
        ok.len(),
        rows.len(),
        ok.iter().sum::<f64>() / ok.len().max(1) as f64
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Camera directory relative to the dataset (default `cameras`).
    #[arg(long)]
    pub cameras: Option<String>,
    /// Run output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial Gaussians (PLY); by default one per LiDAR point.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Spherical-harmonic degree for LiDAR initialization.
    #[arg(long)]
    pub sh_degree: Option<usize>,
    /// Fraction of the LiDAR cloud to keep (seeded subsample).
    #[arg(long)]
    pub lidar_fraction: Option<f64>,
    /// Maximum distance from a Gaussian to the LiDAR cloud, meters.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Minimum opacity kept by pruning.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Positional-gradient threshold for splitting.
    #[arg(long)]
    pub tau_pos: Option<f64>,
    #[arg(long)]
    pub densify_interval: Option<usize>,
    #[arg(long)]
    pub densify_start: Option<usize>,
    /// Last densification iteration (default: half the iterations).
    #[arg(long)]
    pub densify_stop: Option<usize>,
    /// Hole-filling window of the LiDAR depth/normal maps, pixels.
    #[arg(long)]
    pub maps_window: Option<usize>,
    /// Depth loss weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Normal loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Scale loss weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// D-SSIM share of the photometric loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `l1` or `literal`.
    #[arg(long, value_parser = parse_depth_mode)]
    pub depth_mode: Option<DepthLossMode>,
    /// `relative` (divide by the view's mean LiDAR depth) or `meters`.
    #[arg(long, value_parser = parse_depth_scale)]
    pub depth_scale: Option<DepthScale>,
    /// `mean` (over valid pixels), `image_mean` or `sum` for the geometric losses.
    #[arg(long, value_parser = parse_reduction)]
    pub reduction: Option<Reduction>,
    #[arg(long)]
    pub val_interval: Option<usize>,
    /// Write a checkpoint every N iterations (0: only the final one).
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Also write a checkpoint after every densification pass.
    #[arg(long)]
    pub checkpoint_after_densify: Option<bool>,
    /// Learning-rate overrides.
    #[arg(skip)]
    pub lr: Option<LearningRates>,
}

fn parse_depth_mode(s: &str) -> std::result::Result<DepthLossMode, String> {
    match s {
        "l1" => Ok(DepthLossMode::L1),
        "literal" => Ok(DepthLossMode::Literal),
        _ => Err(format!("unknown depth mode '{s}' (expected l1 or literal)")),
    }
}

fn parse_depth_scale(s: &str) -> std::result::Result<DepthScale, String> {
    match s {
        "relative" => Ok(DepthScale::Relative),
        "meters" => Ok(DepthScale::Meters),
        _ => Err(format!("unknown depth scale '{s}' (expected relative or meters)")),
    }
}

fn parse_reduction(s: &str) -> std::result::Result<Reduction, String> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "image_mean" => Ok(Reduction::ImageMean),
        "sum" => Ok(Reduction::Sum),
        _ => Err(format!("unknown reduction '{s}' (expected mean, image_mean or sum)")),
    }
}

#[derive(Serialize)]
struct TrainSettings {
    data: PathBuf,
    cameras: String,
    out: PathBuf,
    init: Option<PathBuf>,
    sh_degree: usize,
    lidar_fraction: f64,
    maps_window: usize,
    checkpoint_interval: usize,
    checkpoint_after_densify: bool,
    train: TrainConfig,
}

fn train_settings(o: &TrainArgs) -> Result<TrainSettings> {
    let mut cfg = TrainConfig {
        iterations: o.iterations.unwrap_or(30_000),
        seed: o.seed.unwrap_or(0),
        densify_stop: o.densify_stop,
        ..Default::default()
    };
    let d = DensifyConfig::default();
    cfg.densify = DensifyConfig {
        sigma: o.sigma.unwrap_or(d.sigma),
        epsilon: o.epsilon.unwrap_or(d.epsilon),
        tau_pos: o.tau_pos.unwrap_or(d.tau_pos),
        interval: o.densify_interval.unwrap_or(d.interval),
        ..d
    };
    cfg.densify_start = o.densify_start.unwrap_or(cfg.densify_start);
    let w = LossWeights::default();
    cfg.weights = LossWeights {
        alpha: o.alpha.unwrap_or(w.alpha),
        beta: o.beta.unwrap_or(w.beta),
        gamma: o.gamma.unwrap_or(w.gamma),
        lambda: o.lambda.unwrap_or(w.lambda),
    };
    cfg.loss = LossOptions {
        depth_mode: o.depth_mode.unwrap_or_default(),
        depth_scale: o.depth_scale.unwrap_or_default(),
        reduction: o.reduction.unwrap_or_default(),
    };
    cfg.val_interval = o.val_interval.unwrap_or(cfg.val_interval);
    if let Some(lr) = &o.lr {
        cfg.lr = lr.clone();
    }
    cfg.validate()?;
    let lidar_fraction = o.lidar_fraction.unwrap_or(1.0);
    if !(lidar_fraction > 0.0 && lidar_fraction <= 1.0) {
        bail!("lidar_fraction must lie in (0, 1]");
    }
    let maps_window = o.maps_window.unwrap_or(lidar_maps::DEFAULT_WINDOW);
    if maps_window == 0 {
        bail!("maps_window must be positive");
    }
    Ok(TrainSettings {
        data: required(o.data.clone(), "data", "train")?,
        cameras: o.cameras.clone().unwrap_or_else(|| CAMERAS.into()),
        out: required(o.out.clone(), "out", "train")?,
        init: o.init.clone(),
        sh_degree: o.sh_degree.unwrap_or(0),
        lidar_fraction,
        maps_window,
        checkpoint_interval: o.checkpoint_interval.unwrap_or(0),
        checkpoint_after_densify: o.checkpoint_after_densify.unwrap_or(false),
        train: cfg,
    })
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let merged = merge(&ctx.file, "train", args)?;
    let s = train_settings(&merged.options)?;
    let ds = Dataset::open(&s.data)?;
    let mut cloud = io::load_ply_points(&ds.lidar_path())?;
    if s.lidar_fraction < 1.0 {
        cloud = testbed::downsample_cloud(&cloud, s.lidar_fraction, s.train.seed)?;
    }
    let cams = ds.cameras(&s.cameras)?;
    let split = ds.split()?;
    let view = |i: usize, maps: bool| -> Result<View> {
        let camera = cams
            .get(i)
            .ok_or_else(|| anyhow!("split.json refers to view {i} but there are {} cameras", cams.len()))?
            .clone();
        let maps = maps.then(|| {
            lidar_maps::densify_maps(
                &lidar_maps::splat_sparse(&cloud, &camera),
                &camera,
                s.maps_window,
            )
        });
        Ok(View {
            image: ds.image(i)?,
            camera,
            maps,
        })
    };
    let train_views = split.train.iter().map(|&i| view(i, true)).collect::<Result<Vec<_>>>()?;
    let val_views = split.val.iter().map(|&i| view(i, false)).collect::<Result<Vec<_>>>()?;
    let initial = match &s.init {
        Some(p) => io::load_ply_gaussians(p)?,
        None => densify::initialize_from_lidar(&cloud, s.sh_degree)?,
    };
    create_dir(&s.out)?;
    write_manifest(ctx, "train", &merged, &s, &s.out)?;
    log::info!(
        "training {} Gaussians on {} views for {} iterations",
        initial.len(),
        train_views.len(),
        s.train.iterations
    );
    let policy = CheckpointPolicy {
        dir: Some(s.out.join("checkpoints")),
        after_densify: s.checkpoint_after_densify,
        interval: s.checkpoint_interval,
    };
    let start = Instant::now();
    let out = trainer::train(&initial, &cloud, &train_views, &val_views, &s.train, &policy)
        .context("training failed")?;
    log::info!("trained in {:.1?}: {} Gaussians", start.elapsed(), out.set.len());

    trainer::write_log_csv(&out.log, &s.out.join("log.csv"))?;
    io::save_ply_gaussians(&out.set, &s.out.join("point_cloud.ply"))?;
    let mut text = String::from("iteration,splits,pruned,count,max_distance,min_opacity\n");
    for e in &out.densify_events {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.iteration,
            e.splits.len(),
            e.pruned,
            e.count,
            e.max_distance,
            e.min_opacity
        ));
    }
    fs::write(s.out.join("densify.csv"), text)?;
    let mut text = String::from("iteration,parent,dx,dy,dz,nx,ny,nz,degenerate\n");
    for e in &out.densify_events {
        for r in &e.splits {
            let n = r.normal.unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.iteration, r.parent, r.direction.x, r.direction.y, r.direction.z, n.x, n.y, n.z, r.degenerate
            ));
        }
    }
    fs::write(s.out.join("splits.csv"), text)?;
    let mut text = String::from("iteration,file,lidar_rmse\n");
    for c in &out.checkpoints {
        let name = c.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", c.iteration, name, c.lidar_rmse));
    }
    fs::write(s.out.join("checkpoints.csv"), text)?;
    Ok(())
}

// ---------------------------------------------------------------- render

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct RenderArgs {
    /// Dataset directory (for the cameras).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<String>,
    /// Gaussian PLY to render.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `all` or comma-separated view indices.
    #[arg(long)]
    pub views: Option<String>,
    /// Background color as r,g,b in [0,1].
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub background: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct RenderSettingsOut {
    data: PathBuf,
    cameras: String,
    model: PathBuf,
    out: PathBuf,
    views: Vec<usize>,
    background: [f64; 3],
}

fn background(v: &Option<Vec<f64>>) -> Result<[f64; 3]> {
    match v {
        None => Ok([0.0; 3]),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(_) => bail!("background needs three components"),
    }
}

pub fn render(ctx: &Context, args: &RenderArgs) -> Result<()> {
    let merged = merge(&ctx.file, "render", args)?;
    let o = &merged.options;
    let ds = Dataset::open(&required(o.data.clone(), "data", "render")?)?;
    let cameras = o.cameras.clone().unwrap_or_else(|| CAMERAS.into());
    let cams = ds.cameras(&cameras)?;
    let settings = RenderSettingsOut {
        data: ds.root.clone(),
        cameras,
        model: required(o.model.clone(), "model", "render")?,
        out: required(o.out.clone(), "out", "render")?,
        views: parse_views(o.views.as_deref().unwrap_or("all"), cams.len())?,
        background: background(&o.background)?,
    };
    let set = io::load_ply_gaussians(&settings.model)?;
    create_dir(&settings.out)?;
    let rs = RenderSettings {
        background: settings.background,
    };
    for &i in &settings.views {
        let r = rasterizer::render(&set, &cams[i], &rs)?;
        let name = view_name(i);
        io::save_png(&r.color, &settings.out.join(format!("{name}.png")))?;
        let maps = DepthNormalMaps {
            width: r.width(),
            height: r.height(),
            depth: r.depth.clone(),
            normal: r.normal.clone(),
            valid: r.valid.clone(),
            sample_uv: (0..r.depth.len())
                .map(|p| [(p % r.width()) as f64 + 0.5, (p / r.width()) as f64 + 0.5])
                .collect(),
        };
        io::save_depth_normal(
            &maps,
            &settings.out.join(format!("{name}_depth.pfm")),
            &settings.out.join(format!("{name}_normal.pfm")),
        )?;
    }
    write_manifest(ctx, "render", &merged, &settings, &settings.out)?;
    log::info!("rendered {} views to {}", settings.views.len(), settings.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<String>,
    /// Gaussian PLY to evaluate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Metrics JSON path (default: print to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train`, `val`, `test` or `all`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub background: Option<Vec<f64>>,
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let merged = merge(&ctx.file, "eval", args)?;
    let o = &merged.options;
    let ds = Dataset::open(&required(o.data.clone(), "data", "eval")?)?;
    let cams = ds.cameras(o.cameras.as_deref().unwrap_or(CAMERAS))?;
    let model = required(o.model.clone(), "model", "eval")?;
    let set = io::load_ply_gaussians(&model)?;
    let cloud: LidarCloud = io::load_ply_points(&ds.lidar_path())?;
    let which = o.split.clone().unwrap_or_else(|| "val".into());
    let views = match which.as_str() {
        "all" => (0..cams.len()).collect(),
        "train" => ds.split()?.train,
        "val" => ds.split()?.val,
        "test" => ds.split()?.test,
        s => bail!("unknown split '{s}' (expected train, val, test or all)"),
    };
    let rs = RenderSettings {
        background: background(&o.background)?,
    };
    let mut rows = Vec::new();
    for &i in &views {
        let cam = cams
            .get(i)
            .ok_or_else(|| anyhow!("view {i} has no camera"))?;
        let r = rasterizer::render(&set, cam, &rs)?;
        let gt = ds.image(i)?;
        let depth_mae = match ds.truth_depth(i)? {
            Some((depth, valid)) => eval::depth_mae(&r.depth, &r.valid, &depth, &valid)?,
            None => None,
        };
        rows.push(ViewMetrics {
            view: i,
            psnr: eval::psnr(&r.color, &gt)?,
            ssim: eval::ssim(&r.color, &gt)?,
            depth_mae,
        });
    }
    if rows.is_empty() {
        bail!("split '{which}' has no views");
    }
    let n = rows.len() as f64;
    let maes: Vec<f64> = rows.iter().filter_map(|r| r.depth_mae).collect();
    let report = MetricsReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_depth_mae: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
        lidar_rmse: eval::lidar_rmse(&set, &cloud, RmseDirection::GaussianToLidar)?,
        lidar_rmse_reverse: eval::lidar_rmse(&set, &cloud, RmseDirection::LidarToGaussian)?,
        gaussian_count: set.len(),
        views: rows,
    };
    log::info!(
        "{which}: PSNR {:.3} dB, SSIM {:.4}, LiDAR RMSE {:.4} m",
        report.mean_psnr,
        report.mean_ssim,
        report.lidar_rmse
    );
    match &o.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_json(path, &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
