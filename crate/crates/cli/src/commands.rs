//! Subcommand implementations. Each returns a JSON report that `main` prints.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use texmesh::isosurface::{marching_tetrahedra, mesh_topology_stats, SurfaceMesh};
use texmesh::metrics::{chamfer, coverage, embedding_stats, frechet_distance, mmd, pairwise_chamfer, sample_surface_points, PointCloud};
use texmesh::pipeline::{
    fit_shape, interpolate_latents, orbit_cameras, position_albedo, render_targets, sphere_family_dataset, toy_gan_train, voxel_iou,
    voxelize_mesh, voxelize_shape, FitState, GanState, ToyGanConfig, View, ORBIT_RADIUS,
};
use texmesh::render::{antialias_silhouette, rasterize, Camera, GBuffer, Image, DEFAULT_FOV_DEG};
use texmesh::sdf::AnalyticShape;
use texmesh::shading::{fit_sg_environment, gbuffer_normals, mesh_normals, shade_sg, sg_mixture, EnvironmentMap, Reflectance};
use texmesh::tetgrid::{unique_edges, GeometryField, TetGrid};
use texmesh::Vec3;

use crate::config::RunConfig;
use crate::error::{at_path, CliError, Result};
use crate::io::{self, obj, TraceRow};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print vertex, tet and edge counts of a regular grid.
    GridInfo(GridInfoArgs),
    /// Extract a mesh from an analytic SDF or a checkpoint and write OBJ.
    Extract(ExtractArgs),
    /// Rasterize and shade a mesh to PNG, or write an orbit of fitting targets.
    Render(RenderArgs),
    /// Fit geometry and texture to multi-view targets.
    Fit(FitArgs),
    /// Train the toy dual-discriminator GAN on a sphere family.
    GanToy(GanToyArgs),
    /// Chamfer COV/MMD between mesh sets and Fréchet distance between embeddings.
    Metrics(MetricsArgs),
    /// Fit spherical-Gaussian lobes to an equirectangular PFM environment.
    FitEnv(FitEnvArgs),
    /// Write meshes along a latent segment of a toy GAN checkpoint.
    Interpolate(InterpolateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Shape {
    Sphere,
    Torus,
}

impl Shape {
    pub fn analytic(self) -> AnalyticShape {
        match self {
            Shape::Sphere => AnalyticShape::sphere(),
            Shape::Torus => AnalyticShape::torus(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GridInfoArgs {
    /// Overrides grid.res.
    #[arg(long)]
    pub res: Option<u32>,
}

/// Where a mesh comes from. Exactly one must be given.
#[derive(Debug, Args)]
pub struct Source {
    /// Analytic SDF extracted at grid.res.
    #[arg(long)]
    pub sdf: Option<Shape>,
    /// `fit_state` or `toy_gan` checkpoint; toy GAN latents are drawn from --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// OBJ file (render only).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub source: Source,
    /// Overrides grid.res.
    #[arg(long)]
    pub res: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write a per-triangle texture atlas (PNG + MTL) instead of vertex colors.
    #[arg(long)]
    pub atlas: bool,
    /// Texels per atlas chart side.
    #[arg(long, default_value_t = 8)]
    pub atlas_cell: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub source: Source,
    /// Output PNG (single view) or directory (with --orbit).
    #[arg(long)]
    pub out: PathBuf,
    /// Write this many orbit views as fitting targets instead of one shaded image.
    #[arg(long)]
    pub orbit: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 30.0)]
    pub azimuth_deg: f64,
    #[arg(long, default_value_t = 20.0)]
    pub elevation_deg: f64,
    /// Camera distance for the single view; orbits always use the fitting radius.
    #[arg(long, default_value_t = 1.8)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory with cameras.json, rgb_NNN.png and mask_NNN.png.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Ground-truth shape: renders fit.views targets when --targets is absent
    /// and adds the voxel IoU to the report.
    #[arg(long)]
    pub shape: Option<Shape>,
    #[arg(long, default_value_t = 64)]
    pub voxel_res: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GanToyArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Directory of generated OBJ meshes.
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Directory of reference OBJ meshes.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub gen_emb: Option<PathBuf>,
    #[arg(long)]
    pub ref_emb: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitEnvArgs {
    #[arg(long)]
    pub env: PathBuf,
    /// Lobes as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PFM of the fitted mixture at the input resolution.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cmd: &Command, cfg: &RunConfig, seed: u64) -> Result<Value> {
    match cmd {
        Command::GridInfo(a) => grid_info(a, cfg),
        Command::Extract(a) => extract(a, cfg, seed),
        Command::Render(a) => render(a, cfg, seed),
        Command::Fit(a) => fit(a, cfg),
        Command::GanToy(a) => gan_toy(a, cfg),
        Command::Metrics(a) => metrics(a, cfg, seed),
        Command::FitEnv(a) => fit_env(a, cfg),
        Command::Interpolate(a) => interpolate(a, seed),
    }
}

/// Argument checks that must fail with the config exit code before any work.
pub fn check_args(cmd: &Command) -> Result<()> {
    let bad = |m: &str| Err(CliError::config(m));
    let count = |s: &Source| [s.sdf.is_some(), s.checkpoint.is_some(), s.mesh.is_some()].iter().filter(|&&b| b).count();
    match cmd {
        Command::GridInfo(a) if a.res == Some(0) => bad("--res must be positive"),
        Command::Extract(a) => {
            if a.source.mesh.is_some() || count(&a.source) != 1 {
                return bad("extract needs exactly one of --sdf or --checkpoint");
            }
            if a.res == Some(0) {
                return bad("--res must be positive");
            }
            if a.atlas && a.source.sdf.is_some() {
                return bad("--atlas needs a textured checkpoint, analytic SDFs carry no texture");
            }
            if a.atlas_cell < 4 {
                return bad("--atlas-cell must be at least 4");
            }
            Ok(())
        }
        Command::Render(a) => {
            if count(&a.source) != 1 {
                return bad("render needs exactly one of --sdf, --checkpoint or --mesh");
            }
            if a.size == 0 || a.orbit == Some(0) {
                return bad("--size and --orbit must be positive");
            }
            if a.orbit.is_some_and(|n| n < 4) {
                return bad("--orbit needs at least 4 views");
            }
            if !(a.radius > 0.0 && a.radius.is_finite()) || a.elevation_deg.abs() >= 90.0 {
                return bad("--radius must be positive and --elevation-deg inside (-90, 90)");
            }
            Ok(())
        }
        Command::Fit(a) => {
            if a.targets.is_none() && a.shape.is_none() {
                return bad("fit needs --targets or --shape");
            }
            if a.voxel_res == 0 {
                return bad("--voxel-res must be positive");
            }
            Ok(())
        }
        Command::Metrics(a) => {
            let meshes = a.gen.is_some() as u8 + a.reference.is_some() as u8;
            let embs = a.gen_emb.is_some() as u8 + a.ref_emb.is_some() as u8;
            if meshes == 1 || embs == 1 {
                return bad("--gen/--ref and --gen-emb/--ref-emb come in pairs");
            }
            if meshes + embs == 0 {
                return bad("metrics needs --gen/--ref or --gen-emb/--ref-emb");
            }
            Ok(())
        }
        Command::Interpolate(a) if a.steps == 0 => bad("--steps must be positive"),
        _ => Ok(()),
    }
}

fn write_report(dir: &Path, report: &Value) -> Result<()> {
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

fn mesh_stats(mesh: &SurfaceMesh) -> Value {
    let t = mesh_topology_stats(mesh);
    json!({
        "vertices": mesh.vertices.len(),
        "faces": mesh.faces.len(),
        "euler_characteristic": t.euler_characteristic,
        "boundary_edges": t.boundary_edges,
        "components": t.components,
    })
}

fn grid_info(a: &GridInfoArgs, cfg: &RunConfig) -> Result<Value> {
    let res = a.res.unwrap_or(cfg.grid.res);
    let grid = TetGrid::regular(res)?;
    Ok(json!({
        "res": res,
        "vertices": grid.num_vertices(),
        "tets": grid.num_tets(),
        "edges": unique_edges(&grid.tets).len(),
        "cell_size": grid.cell_size(),
        "deform_bound": grid.deform_bound(),
    }))
}

/// A loaded checkpoint.
pub enum Model {
    Fit(Box<FitState>),
    Gan(Box<GanState>, ToyGanConfig),
}

pub fn load_model(path: &Path) -> Result<Model> {
    let blob = at_path(path, io::read_blob(path))?;
    match blob.header.kind.as_str() {
        "fit_state" => Ok(Model::Fit(Box::new(at_path(path, FitState::from_blob(&blob))?))),
        "toy_gan" => {
            let (st, cfg) = at_path(path, GanState::from_blob(&blob))?;
            Ok(Model::Gan(Box::new(st), cfg))
        }
        k => Err(CliError::File {
            path: path.display().to_string(),
            source: texmesh::Error::invalid(format!("checkpoint kind {k} is neither fit_state nor toy_gan")),
        }),
    }
}

fn standard_normal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mesh plus a per-vertex color function for the model.
struct Colored {
    mesh: SurfaceMesh,
    color: Box<dyn Fn(&Vec3) -> [f64; 3] + Sync>,
}

fn model_mesh(model: Model, seed: u64) -> Result<Colored> {
    match model {
        Model::Fit(st) => {
            let mesh = st.mesh()?;
            let m = st.texture.condition(&[], &st.latent)?;
            let tex = st.texture.clone();
            Ok(Colored {
                mesh,
                color: Box::new(move |p| tex.color(&m, p)),
            })
        }
        Model::Gan(st, cfg) => {
            let grid = TetGrid::regular(cfg.tet_res)?;
            let z = standard_normal(cfg.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed));
            let w = st.generator.mapping.forward(&z)?;
            let (field, _) = st.generator.geometry.eval(&grid, &w)?;
            let mesh = marching_tetrahedra(&grid, &field)?;
            let m = st.generator.texture.condition(&w, &w)?;
            let tex = st.generator.texture.clone();
            Ok(Colored {
                mesh,
                color: Box::new(move |p| tex.color(&m, p)),
            })
        }
    }
}

fn analytic_mesh(shape: Shape, res: u32) -> Result<SurfaceMesh> {
    let grid = TetGrid::regular(res)?;
    let s = shape.analytic();
    Ok(marching_tetrahedra(&grid, &GeometryField::from_sdf(&grid, |p| s.eval(p)))?)
}

fn vertex_colors(mesh: &SurfaceMesh, color: &(dyn Fn(&Vec3) -> [f64; 3] + Sync)) -> Vec<[f64; 3]> {
    mesh.vertices.iter().map(|p| color(p).map(|c| c.clamp(0.0, 1.0))).collect()
}

fn extract(a: &ExtractArgs, cfg: &RunConfig, seed: u64) -> Result<Value> {
    let (mesh, colors, atlas) = if let Some(shape) = a.source.sdf {
        (analytic_mesh(shape, a.res.unwrap_or(cfg.grid.res))?, None, None)
    } else {
        let path = a.source.checkpoint.as_ref().expect("checked");
        let c = model_mesh(load_model(path)?, seed)?;
        if a.atlas {
            let clamp = |p: &Vec3| (c.color)(p).map(|v| v.clamp(0.0, 1.0));
            let atlas = obj::build_atlas(&c.mesh, a.atlas_cell, clamp)?;
            (c.mesh, None, Some(atlas))
        } else {
            let colors = vertex_colors(&c.mesh, &*c.color);
            (c.mesh, Some(colors), None)
        }
    };
    match &atlas {
        Some(at) => at_path(&a.out, obj::write_obj_atlas(&a.out, &mesh, at))?,
        None => at_path(&a.out, obj::write_obj(&a.out, &mesh, colors.as_deref()))?,
    }
    let mut report = mesh_stats(&mesh);
    report["out"] = json!(a.out.display().to_string());
    Ok(report)
}

/// Per-pixel base color from barycentric interpolation of vertex colors.
fn interpolate_colors(gb: &GBuffer, mesh: &SurfaceMesh, colors: &[[f64; 3]]) -> Vec<[f64; 3]> {
    (0..gb.num_pixels())
        .map(|i| match gb.triangle[i] {
            None => [0.0; 3],
            Some(t) => {
                let f = mesh.faces[t as usize];
                let b = gb.bary[i];
                let mut c = [0.0; 3];
                for k in 0..3 {
                    for (ch, v) in c.iter_mut().enumerate() {
                        *v += b[k] * colors[f[k] as usize][ch];
                    }
                }
                c.map(|v| v.clamp(0.0, 1.0))
            }
        })
        .collect()
}

fn render(a: &RenderArgs, cfg: &RunConfig, seed: u64) -> Result<Value> {
    // mesh and per-vertex base colors
    let (mesh, colors): (SurfaceMesh, Vec<[f64; 3]>) = if let Some(shape) = a.source.sdf {
        if let Some(n) = a.orbit {
            return write_orbit_targets(&a.out, shape, n, cfg);
        }
        let m = analytic_mesh(shape, cfg.grid.res)?;
        let c = m.vertices.iter().map(position_albedo).collect();
        (m, c)
    } else if let Some(p) = &a.source.mesh {
        let d = at_path(p, io::read_obj(p))?;
        let c = d.colors.clone().unwrap_or_else(|| vec![[0.7; 3]; d.mesh.vertices.len()]);
        (d.mesh, c)
    } else {
        let c = model_mesh(load_model(a.source.checkpoint.as_ref().expect("checked"))?, seed)?;
        let colors = vertex_colors(&c.mesh, &*c.color);
        (c.mesh, colors)
    };
    if let Some(n) = a.orbit {
        let cams = orbit_cameras(n, ORBIT_RADIUS, cfg.fit.image_size)?;
        let views = cams
            .iter()
            .map(|cam| {
                let gb = rasterize(&mesh, cam)?;
                let mut rgb = Image::new(cam.width, cam.height, 3);
                for (i, c) in interpolate_colors(&gb, &mesh, &colors).into_iter().enumerate() {
                    rgb.pixel_mut(i).copy_from_slice(&c);
                }
                let (mask, _) = antialias_silhouette(&gb, &mesh, cam)?;
                Ok(View { camera: *cam, rgb, mask })
            })
            .collect::<texmesh::Result<Vec<_>>>()?;
        return save_views(&a.out, &views);
    }
    let cam = Camera::new(DEFAULT_FOV_DEG, a.radius, a.azimuth_deg.to_radians(), a.elevation_deg.to_radians(), a.size, a.size)?;
    let gb = rasterize(&mesh, &cam)?;
    let normals = gbuffer_normals(&gb, &mesh, &mesh_normals(&mesh));
    let refl: Vec<Reflectance> = interpolate_colors(&gb, &mesh, &colors)
        .into_iter()
        .map(|base_color| Reflectance {
            base_color,
            roughness: cfg.shading.roughness,
            metallic: cfg.shading.metallic,
        })
        .collect();
    let img = shade_sg(&gb, &refl, &normals, &cfg.shading.lights, &cam)?;
    at_path(&a.out, io::write_png(&a.out, &img))?;
    Ok(json!({
        "out": a.out.display().to_string(),
        "coverage": gb.coverage_fraction(),
        "mesh": mesh_stats(&mesh),
    }))
}

fn write_orbit_targets(dir: &Path, shape: Shape, n: usize, cfg: &RunConfig) -> Result<Value> {
    let cams = orbit_cameras(n, ORBIT_RADIUS, cfg.fit.image_size)?;
    let views = render_targets(&shape.analytic(), position_albedo, &cams, 64)?;
    save_views(dir, &views)
}

fn save_views(dir: &Path, views: &[View]) -> Result<Value> {
    std::fs::create_dir_all(dir)?;
    let cams: Vec<Camera> = views.iter().map(|v| v.camera).collect();
    std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cams)? + "\n")?;
    for (k, v) in views.iter().enumerate() {
        let p = dir.join(format!("rgb_{k:03}.png"));
        at_path(&p, io::write_png(&p, &v.rgb))?;
        let p = dir.join(format!("mask_{k:03}.png"));
        at_path(&p, io::write_png(&p, &v.mask))?;
    }
    Ok(json!({ "out": dir.display().to_string(), "views": views.len() }))
}

/// Read a directory written by `render --orbit`.
pub fn load_views(dir: &Path) -> Result<Vec<View>> {
    let cam_path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&cam_path).map_err(|e| CliError::File {
        path: cam_path.display().to_string(),
        source: e.into(),
    })?;
    let cams: Vec<Camera> = serde_json::from_str(&text).map_err(|e| CliError::File {
        path: cam_path.display().to_string(),
        source: e.into(),
    })?;
    cams.into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let rp = dir.join(format!("rgb_{k:03}.png"));
            let mp = dir.join(format!("mask_{k:03}.png"));
            let rgb = at_path(&rp, io::read_png(&rp))?;
            let mask = at_path(&mp, io::read_png(&mp))?;
            let v = View { camera, rgb, mask };
            at_path(&rp, v.validate())?;
            Ok(v)
        })
        .collect()
}

fn fit(a: &FitArgs, cfg: &RunConfig) -> Result<Value> {
    let targets = match (&a.targets, a.shape) {
        (Some(dir), _) => load_views(dir)?,
        (None, Some(shape)) => {
            let cams = orbit_cameras(cfg.fit.views, ORBIT_RADIUS, cfg.fit.image_size)?;
            render_targets(&shape.analytic(), position_albedo, &cams, 64)?
        }
        (None, None) => unreachable!("checked"),
    };
    let res = fit_shape(&targets, &cfg.fit)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_blob(&a.out.join("state.blob"), &res.state.to_blob()?)?;
    let mesh = res.state.mesh()?;
    let colors: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|p| res.state.color(p).map(|c| c.map(|v| v.clamp(0.0, 1.0))))
        .collect::<texmesh::Result<_>>()?;
    io::write_obj(&a.out.join("mesh.obj"), &mesh, Some(&colors))?;
    let rows: Vec<TraceRow> = res
        .trace
        .iter()
        .enumerate()
        .flat_map(|(step, l)| {
            [("mask", l.mask), ("rgb", l.rgb), ("reg", l.reg), ("total", l.total)]
                .map(|(term, value)| TraceRow { step, term: term.into(), value })
        })
        .collect();
    io::write_trace(&a.out.join("trace.csv"), &rows)?;
    let (first, last) = (res.trace[0], *res.trace.last().expect("trace is never empty"));
    let mut report = json!({
        "views": targets.len(),
        "steps": cfg.fit.steps,
        "initial": first,
        "final": last,
        "mesh": mesh_stats(&mesh),
    });
    if let Some(shape) = a.shape {
        let iou = voxel_iou(&voxelize_mesh(&mesh, a.voxel_res), &voxelize_shape(&shape.analytic(), a.voxel_res))?;
        report["voxel_iou"] = json!(iou);
    }
    write_report(&a.out, &report)?;
    Ok(report)
}

fn gan_toy(a: &GanToyArgs, cfg: &RunConfig) -> Result<Value> {
    let g = &cfg.gan;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let data = sphere_family_dataset(g.dataset_size, g.radius_range, &g.camera_distribution(), &mut rng)?;
    let res = toy_gan_train(&data, g)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_blob(&a.out.join("gan.blob"), &res.state.to_blob(g)?)?;
    let rows: Vec<TraceRow> = res
        .history
        .iter()
        .flat_map(|h| {
            h.terms().into_iter().map(|(term, value)| TraceRow {
                step: h.step,
                term: term.into(),
                value,
            })
        })
        .collect();
    io::write_trace(&a.out.join("history.csv"), &rows)?;
    let report = json!({
        "steps": res.history.len(),
        "warmup_loss": res.warmup_loss,
        "all_finite": res.history.iter().all(|h| h.all_finite()),
        "initial_l_reg": res.history.first().map(|h| h.l_reg),
        "final_l_reg": res.history.last().map(|h| h.l_reg),
    });
    write_report(&a.out, &report)?;
    Ok(report)
}

fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::File {
            path: dir.display().to_string(),
            source: e.into(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(CliError::File {
            path: dir.display().to_string(),
            source: texmesh::Error::invalid("no .obj files"),
        });
    }
    Ok(v)
}

/// Point clouds for every OBJ in `dir`; mesh `k` is sampled with seed `seed + k`.
fn clouds(dir: &Path, n: usize, seed: u64) -> Result<Vec<PointCloud>> {
    obj_files(dir)?
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = at_path(p, io::read_obj(p))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            at_path(p, sample_surface_points(&d.mesh, n, &mut rng))
        })
        .collect()
}

fn metrics(a: &MetricsArgs, cfg: &RunConfig, seed: u64) -> Result<Value> {
    let mut report = json!({});
    if let (Some(g), Some(r)) = (&a.gen, &a.reference) {
        let gen = clouds(g, cfg.metrics.samples, seed)?;
        let refs = clouds(r, cfg.metrics.samples, seed)?;
        let d = pairwise_chamfer(&gen, &refs, cfg.metrics.reduction)?;
        report["num_gen"] = json!(gen.len());
        report["num_ref"] = json!(refs.len());
        report["samples"] = json!(cfg.metrics.samples);
        report["reduction"] = json!(cfg.metrics.reduction);
        report["cov"] = json!(coverage(&d)?);
        report["mmd"] = json!(mmd(&d)?);
    }
    if let (Some(g), Some(r)) = (&a.gen_emb, &a.ref_emb) {
        let load = |p: &PathBuf| -> Result<DMatrix<f64>> { at_path(p, io::read_embeddings(p)) };
        let (eg, er) = (load(g)?, load(r)?);
        report["frechet"] = json!(frechet_distance(&embedding_stats(&eg)?, &embedding_stats(&er)?)?);
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

fn fit_env(a: &FitEnvArgs, cfg: &RunConfig) -> Result<Value> {
    let img = at_path(&a.env, io::read_pfm(&a.env))?;
    let env = at_path(&a.env, EnvironmentMap::from_image(&img))?;
    let s = &cfg.shading;
    let fit = fit_sg_environment(&env, s.env_lobes, s.env_steps, s.env_step_size)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&fit.lobes)? + "\n")?;
    if let Some(p) = &a.preview {
        let preview = EnvironmentMap::from_fn(env.width, env.height, |d| sg_mixture(&fit.lobes, d));
        at_path(p, io::write_pfm(p, &preview.to_image()))?;
    }
    Ok(json!({
        "lobes": fit.lobes.len(),
        "initial_loss": fit.trace.first(),
        "loss": fit.loss,
        "out": a.out.display().to_string(),
    }))
}

fn interpolate(a: &InterpolateArgs, seed: u64) -> Result<Value> {
    let Model::Gan(st, cfg) = load_model(&a.checkpoint)? else {
        return Err(CliError::File {
            path: a.checkpoint.display().to_string(),
            source: texmesh::Error::invalid("interpolation needs a toy_gan checkpoint"),
        });
    };
    let grid = TetGrid::regular(cfg.tet_res)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let za = standard_normal(cfg.latent_dim, &mut rng);
    let zb = standard_normal(cfg.latent_dim, &mut rng);
    let gen = &st.generator;
    let (wa, wb) = (gen.mapping.forward(&za)?, gen.mapping.forward(&zb)?);
    std::fs::create_dir_all(&a.out)?;
    let mut stats = Vec::new();
    let mut prev: Option<PointCloud> = None;
    let mut gaps = Vec::new();
    for k in 0..=a.steps {
        let w = interpolate_latents(&wa, &wb, k as f64 / a.steps as f64)?;
        let (field, _) = gen.geometry.eval(&grid, &w)?;
        let mesh = marching_tetrahedra(&grid, &field)?;
        let m = gen.texture.condition(&w, &w)?;
        let colors = vertex_colors(&mesh, &|p: &Vec3| gen.texture.color(&m, p));
        io::write_obj(&a.out.join(format!("mesh_{k:03}.obj")), &mesh, Some(&colors))?;
        stats.push(mesh_stats(&mesh));
        let cloud = if mesh.is_empty() {
            None
        } else {
            Some(sample_surface_points(&mesh, 1024, &mut ChaCha8Rng::seed_from_u64(seed))?)
        };
        if let (Some(p), Some(c)) = (&prev, &cloud) {
            gaps.push(chamfer(p, c)?);
        }
        prev = cloud;
    }
    Ok(json!({ "meshes": stats, "consecutive_chamfer": gaps, "out": a.out.display().to_string() }))
}
