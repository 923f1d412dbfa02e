use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use facefit::code::DETAIL_DIM;
use facefit::detail::{detail_normal_map, displace_vertices, render_detail, DetailDecoder};
use facefit::eval::{
    default_thresholds, landmark_consistency_filter, rigid_align, scan_to_mesh_distance,
    AlignOptions, DistanceReport, RigidTransform,
};
use facefit::io::{self, RunConfig};
use facefit::losses::ToyExtractor;
use facefit::model::{
    decode_geometry, synthesize_toy_albedo, synthesize_toy_model, vertex_normals, Mesh,
    ParametricHeadModel,
};
use facefit::pipeline::synth::{
    random_code, render_synthetic, separable_detail_fixture, SynthSpec,
};
use facefit::pipeline::{
    animate_sequence, fit_detail, retarget, train_detail_decoder, CoarseFitter, DetailScene,
    FitTarget, SubjectImage, SubjectSet,
};
use facefit::render::{AlbedoModel, Image, MapKind, Renderer};
use facefit::LatentCode;

use crate::args::{Cli, Command, Global};

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    model_path: Option<PathBuf>,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        // one seed drives every random choice of the run
        cfg.fit.seed = cfg.seed;
        cfg.toy_model.seed = cfg.seed;
        cfg.fixture.seed = cfg.seed;
        cfg.toy_model.uv_size = cfg.uv_size;
        let out = g.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let model_path = g
            .model
            .clone()
            .or_else(|| g.assets.as_ref().map(|d| d.join("model.ffa")));
        Ok(Self {
            cfg,
            out,
            model_path,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn model(&self) -> Result<(ParametricHeadModel, AlbedoModel)> {
        let Some(p) = &self.model_path else {
            bail!("no model given: pass --model or set FACEFIT_ASSET_DIR");
        };
        io::load_model(p).with_context(|| format!("loading model {}", p.display()))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::MakeToyModel { dir_form } => make_toy_model(&ctx, dir_form),
        Command::Decode { code, decoder } => decode(&ctx, code.as_deref(), decoder.as_deref()),
        Command::Render { code, decoder } => render_cmd(&ctx, code.as_deref(), decoder.as_deref()),
        Command::Fit {
            image,
            landmarks,
            mask,
            init,
        } => fit(&ctx, &image, &landmarks, &mask, &init),
        Command::FitDetail {
            image,
            mask,
            code,
            decoder,
        } => fit_detail_cmd(&ctx, &image, mask.as_deref(), &code, &decoder),
        Command::TrainDecoder { subjects, init } => {
            train(&ctx, subjects.as_deref(), init.as_deref())
        }
        Command::Retarget {
            identity,
            expression,
            decoder,
        } => retarget_cmd(&ctx, &identity, &expression, &decoder),
        Command::Animate {
            identity,
            expressions,
            decoder,
            obj,
        } => animate(&ctx, &identity, &expressions, &decoder, obj),
        Command::Eval {
            scan,
            mesh,
            scan_landmarks,
            mesh_landmarks,
            icp,
            with_scale,
            max_threshold,
            thresholds,
        } => eval(
            &ctx,
            &scan,
            &mesh,
            scan_landmarks.as_deref().zip(mesh_landmarks.as_deref()),
            AlignOptions {
                with_scale,
                icp,
                ..Default::default()
            },
            max_threshold,
            thresholds,
        ),
        Command::FilterLandmarks {
            first,
            second,
            bbox,
            shift,
            threshold,
        } => filter(&ctx, &first, &second, &bbox, shift.as_deref(), threshold),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_image(path: &Path, kind: MapKind) -> Result<Image> {
    let is_pfm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let img = if is_pfm {
        io::read_pfm(path, kind)
    } else {
        io::read_png(path, kind)
    };
    img.with_context(|| format!("reading {}", path.display()))
}

fn read_mask(path: Option<&Path>, like: &Image) -> Result<Image> {
    let Some(p) = path else {
        return Ok(Image::filled(
            like.width,
            like.height,
            1,
            MapKind::Mask,
            1.0,
        ));
    };
    let m = read_image(p, MapKind::Mask)?;
    if m.channels == 1 {
        return Ok(m);
    }
    let data = m.data.chunks_exact(m.channels).map(|c| c[0]).collect();
    Ok(Image::from_data(m.width, m.height, 1, MapKind::Mask, data)?)
}

fn read_code(path: &Path) -> Result<LatentCode> {
    io::read_json(path).with_context(|| format!("reading code {}", path.display()))
}

fn write_image_pair(ctx: &Ctx, stem: &str, img: &Image) -> Result<()> {
    io::write_pfm(&ctx.path(&format!("{stem}.pfm")), img)?;
    io::write_png8(&ctx.path(&format!("{stem}.png")), img)?;
    Ok(())
}

fn write_displacement(ctx: &Ctx, stem: &str, disp: &Image, scale: f64) -> Result<()> {
    io::write_pfm(&ctx.path(&format!("{stem}.pfm")), disp)?;
    io::write_displacement_png16(&ctx.path(&format!("{stem}.png")), disp, scale)?;
    Ok(())
}

fn make_toy_model(ctx: &Ctx, dir_form: bool) -> Result<()> {
    let spec = ctx.cfg.toy_model;
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    model.validate()?;
    let path = ctx.path("model.ffa");
    io::save_model(&path, &model, &albedo)?;
    if dir_form {
        io::save_model_dir(&ctx.path("model"), &model, &albedo)?;
    }
    info!("wrote {}", path.display());
    print_json(&serde_json::json!({
        "path": path,
        "vertices": model.vertex_count(),
        "triangles": model.triangles.len(),
        "joints": model.joint_count(),
        "uv_size": albedo.size(),
    }))
}

/// Coarse vertices displaced along their normals by the code's detail.
fn detailed_mesh(
    model: &ParametricHeadModel,
    code: &LatentCode,
    decoder: &DetailDecoder,
) -> Result<(Mesh, Image)> {
    let coarse = decode_geometry(model, &code.shape, &code.pose_params(), &code.expression)?;
    let disp = decoder.decode(
        &code.detail,
        &code.expression,
        &code.joint_rotation(model.jaw_joint),
    )?;
    let normals = vertex_normals(&coarse.vertices, &coarse.triangles)?;
    let v = displace_vertices(&coarse.vertices, &normals, &model.uv, &disp);
    Ok((Mesh::new(v, coarse.triangles, coarse.uv), disp))
}

fn decode(ctx: &Ctx, code: Option<&Path>, decoder: Option<&Path>) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let code = match code {
        Some(p) => read_code(p)?,
        None => LatentCode::for_model(&model, &albedo),
    };
    code.validate(&model, &albedo)?;
    let mesh = match decoder {
        Some(d) => {
            let dec = io::load_decoder(d)?;
            let (mesh, disp) = detailed_mesh(&model, &code, &dec)?;
            write_displacement(ctx, "displacement", &disp, dec.output_scale)?;
            mesh
        }
        None => decode_geometry(&model, &code.shape, &code.pose_params(), &code.expression)?,
    };
    io::write_obj(&ctx.path("mesh.obj"), &mesh)?;
    Ok(())
}

fn detail_image(renderer: &Renderer, code: &LatentCode, disp: &Image) -> Result<Image> {
    let scene = DetailScene::new(renderer, code)?;
    let nm = detail_normal_map(
        &scene.positions_uv,
        &scene.state.normals_uv,
        disp,
        &renderer.mask_uv,
    );
    Ok(render_detail(renderer, &scene.state, &nm.normals)?.image)
}

fn render_cmd(ctx: &Ctx, code: Option<&Path>, decoder: Option<&Path>) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let code = match code {
        Some(p) => read_code(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            random_code(&renderer, &SynthSpec::default(), &mut rng)
        }
    };
    let obs = render_synthetic(&renderer, &code)?;
    let image = match decoder {
        Some(d) => {
            let dec = io::load_decoder(d)?;
            let disp = dec.decode(
                &code.detail,
                &code.expression,
                &code.joint_rotation(model.jaw_joint),
            )?;
            write_displacement(ctx, "displacement", &disp, dec.output_scale)?;
            detail_image(&renderer, &code, &disp)?
        }
        None => obs.image,
    };
    write_image_pair(ctx, "image", &image)?;
    write_image_pair(ctx, "mask", &obs.mask)?;
    io::write_landmarks(&ctx.path("landmarks.txt"), &obs.landmarks)?;
    io::write_json(&ctx.path("code.json"), &code)?;
    Ok(())
}

fn fit(
    ctx: &Ctx,
    images: &[PathBuf],
    landmarks: &[PathBuf],
    masks: &[PathBuf],
    inits: &[PathBuf],
) -> Result<()> {
    let n = images.len();
    if landmarks.len() != n
        || !(masks.is_empty() || masks.len() == n)
        || !(inits.is_empty() || inits.len() == n)
    {
        bail!("give one --landmarks (and optionally one --mask and --init) per --image");
    }
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let extractor = ToyExtractor::default();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let img = read_image(&images[i], MapKind::Color)?;
        let mask = read_mask(masks.get(i).map(PathBuf::as_path), &img)?;
        let lm = io::read_landmarks(&landmarks[i])?;
        data.push((img, lm, mask));
    }
    let targets: Vec<FitTarget> = data
        .iter()
        .map(|(image, landmarks, mask)| FitTarget {
            image,
            landmarks,
            mask,
        })
        .collect();
    let fitter = CoarseFitter::new(&renderer, &extractor, &ctx.cfg.fit);
    let init_codes = inits
        .iter()
        .map(|p| read_code(p))
        .collect::<Result<Vec<_>>>()?;
    let (fits, trace, report, status) = if n == 1 {
        let f = match init_codes.first() {
            Some(c) => fitter.fit_from(&targets[0], c)?,
            None => fitter.fit(&targets[0])?,
        };
        (vec![f.code], f.trace, f.report, f.status)
    } else {
        let m = if init_codes.is_empty() {
            fitter.fit_multi(&targets)?
        } else {
            fitter.fit_multi_from(&targets, &init_codes)?
        };
        (
            m.fits.into_iter().map(|f| f.code).collect(),
            m.trace,
            m.report,
            m.status,
        )
    };
    for (i, code) in fits.iter().enumerate() {
        let suffix = if n == 1 {
            String::new()
        } else {
            format!("_{i}")
        };
        io::write_json(&ctx.path(&format!("code{suffix}.json")), code)?;
        let state = renderer.forward(code)?;
        write_image_pair(ctx, &format!("render{suffix}"), &state.image)?;
        let mesh = Mesh::new(
            state.vertices().to_vec(),
            model.triangles.clone(),
            model.uv.clone(),
        );
        io::write_obj(&ctx.path(&format!("mesh{suffix}.obj")), &mesh)?;
    }
    io::write_trace_csv(&ctx.path("trace.csv"), &trace)?;
    io::write_json(
        &ctx.path("report.json"),
        &serde_json::json!({ "status": status, "report": report }),
    )?;
    Ok(())
}

fn fit_detail_cmd(
    ctx: &Ctx,
    image: &Path,
    mask: Option<&Path>,
    code: &Path,
    decoder: &Path,
) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let extractor = ToyExtractor::default();
    let img = read_image(image, MapKind::Color)?;
    let mask = read_mask(mask, &img)?;
    let mut code = read_code(code)?;
    let dec = io::load_decoder(decoder)?;
    let fit = fit_detail(
        &renderer,
        &extractor,
        &code,
        &dec,
        &img,
        &mask,
        &ctx.cfg.fit,
    )?;
    code.detail = fit.delta.clone();
    io::write_json(&ctx.path("code.json"), &code)?;
    write_displacement(ctx, "displacement", &fit.displacement, dec.output_scale)?;
    write_image_pair(
        ctx,
        "render",
        &detail_image(&renderer, &code, &fit.displacement)?,
    )?;
    let (mesh, _) = detailed_mesh(&model, &code, &dec)?;
    io::write_obj(&ctx.path("detail.obj"), &mesh)?;
    io::write_trace_csv(&ctx.path("trace.csv"), &fit.trace)?;
    io::write_json(
        &ctx.path("report.json"),
        &serde_json::json!({ "status": fit.status, "report": fit.report }),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SubjectEntry {
    subject: String,
    images: Vec<ImageEntry>,
}

#[derive(Debug, Deserialize)]
struct ImageEntry {
    image: PathBuf,
    mask: Option<PathBuf>,
    landmarks: Option<PathBuf>,
    code: PathBuf,
}

fn load_subjects(list: &Path) -> Result<Vec<SubjectSet>> {
    let base = list.parent().unwrap_or(Path::new("."));
    let entries: Vec<SubjectEntry> = io::read_json(list)?;
    entries
        .into_iter()
        .map(|s| {
            let images = s
                .images
                .into_iter()
                .map(|e| {
                    let image = read_image(&base.join(&e.image), MapKind::Color)?;
                    let mask = read_mask(e.mask.map(|m| base.join(m)).as_deref(), &image)?;
                    let landmarks = match e.landmarks {
                        Some(l) => io::read_landmarks(&base.join(l))?,
                        None => Vec::new(),
                    };
                    Ok(SubjectImage {
                        image,
                        landmarks,
                        mask,
                        code: Some(read_code(&base.join(&e.code))?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SubjectSet {
                subject: s.subject,
                images,
            })
        })
        .collect()
}

fn train(ctx: &Ctx, subjects: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let extractor = ToyExtractor::default();
    let sets = match subjects {
        Some(p) => load_subjects(p)?,
        None => separable_detail_fixture(&renderer, &ctx.cfg.fixture)?.train,
    };
    let decoder = match init {
        Some(p) => io::load_decoder(p)?,
        None => DetailDecoder::seeded(
            ctx.cfg.decoder.clone(),
            DETAIL_DIM + model.expression_dim() + 3,
            renderer.uv_size(),
            ctx.cfg.seed,
        )?,
    };
    let out = train_detail_decoder(&renderer, &extractor, &sets, &decoder, &ctx.cfg.fit)?;
    io::save_decoder(&ctx.path("decoder.ffa"), &out.decoder)?;
    io::write_train_csv(&ctx.path("train.csv"), &out.trace)?;
    let codes: Vec<_> = sets
        .iter()
        .zip(&out.codes)
        .map(|(s, c)| serde_json::json!({ "subject": s.subject, "detail_codes": c }))
        .collect();
    io::write_json(&ctx.path("codes.json"), &codes)?;
    Ok(())
}

fn retarget_cmd(ctx: &Ctx, identity: &Path, expression: &Path, decoder: &Path) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let dec = io::load_decoder(decoder)?;
    let (code, disp) = retarget(&model, &read_code(identity)?, &read_code(expression)?, &dec)?;
    io::write_json(&ctx.path("code.json"), &code)?;
    write_displacement(ctx, "displacement", &disp, dec.output_scale)?;
    write_image_pair(ctx, "render", &detail_image(&renderer, &code, &disp)?)?;
    let (mesh, _) = detailed_mesh(&model, &code, &dec)?;
    io::write_obj(&ctx.path("mesh.obj"), &mesh)?;
    Ok(())
}

fn animate(
    ctx: &Ctx,
    identity: &Path,
    expressions: &[PathBuf],
    decoder: &Path,
    obj: bool,
) -> Result<()> {
    let (model, albedo) = ctx.model()?;
    let renderer = Renderer::new(&model, &albedo, ctx.cfg.image_size);
    let dec = io::load_decoder(decoder)?;
    let exprs = expressions
        .iter()
        .map(|p| read_code(p))
        .collect::<Result<Vec<_>>>()?;
    let frames = animate_sequence(&renderer, &read_code(identity)?, &exprs, &dec)?;
    for (i, f) in frames.iter().enumerate() {
        io::write_png8(&ctx.path(&format!("frame_{i:04}.png")), &f.image)?;
        if obj {
            io::write_obj(&ctx.path(&format!("frame_{i:04}.obj")), &f.mesh)?;
        }
    }
    let codes: Vec<&LatentCode> = frames.iter().map(|f| &f.code).collect();
    io::write_json(&ctx.path("codes.json"), &codes)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    count: usize,
    median: f64,
    mean: f64,
    std: f64,
    transform: &'a RigidTransform,
}

fn eval(
    ctx: &Ctx,
    scan: &Path,
    mesh: &Path,
    landmarks: Option<(&Path, &Path)>,
    options: AlignOptions,
    max_threshold: f64,
    thresholds: usize,
) -> Result<()> {
    let scan = io::read_obj(scan)?;
    let mesh = io::read_obj(mesh)?;
    let transform = match landmarks {
        Some((s, m)) => rigid_align(
            &io::read_landmarks3(s)?,
            &io::read_landmarks3(m)?,
            &options,
            Some(&scan.vertices),
            Some(&mesh),
        )?,
        None => RigidTransform::identity(),
    };
    let aligned = transform.apply_mesh(&mesh);
    let distances = scan_to_mesh_distance(&scan.vertices, &aligned)?;
    let report = DistanceReport::new(distances, default_thresholds(max_threshold, thresholds))?;
    io::write_csv(
        &ctx.path("distances.csv"),
        &["vertex", "distance"],
        report
            .distances
            .iter()
            .enumerate()
            .map(|(i, d)| vec![i as f64, *d]),
    )?;
    io::write_csv(
        &ctx.path("curve.csv"),
        &["threshold", "fraction"],
        report
            .thresholds
            .iter()
            .zip(&report.curve)
            .map(|(t, c)| vec![*t, *c]),
    )?;
    let summary = EvalSummary {
        count: report.distances.len(),
        median: report.stats.median,
        mean: report.stats.mean,
        std: report.stats.std,
        transform: &transform,
    };
    io::write_json(&ctx.path("stats.json"), &summary)?;
    print_json(&summary)
}

fn filter(
    ctx: &Ctx,
    first: &Path,
    second: &Path,
    bbox: &[f64],
    shift: Option<&[f64]>,
    threshold: f64,
) -> Result<()> {
    let k1 = io::read_landmarks(first)?;
    let k2 = io::read_landmarks(second)?;
    let shift = shift.map_or([0.0, 0.0], |s| [s[0], s[1]]);
    let d = landmark_consistency_filter(&k1, &k2, bbox[0], bbox[1], shift, threshold)?;
    io::write_json(&ctx.path("filter.json"), &d)?;
    print_json(&d)
}
