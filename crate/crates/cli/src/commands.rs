use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use slimdet::data::{self, Sample};
use slimdet::detect::{self, DetectionRecord};
use slimdet::eval::{self, ApInterp, EvalConfig};
use slimdet::graph;
use slimdet::model::Model;
use slimdet::netcfg::{self, NetworkDef, WeightStore};
use slimdet::nnops::Tensor;
use slimdet::prune::{self, Floor, SweepRow};
use slimdet::rng::SplitMix64;
use slimdet::train::{self, FreezeMode, TrainConfig, TrainHistory};
use slimdet::zoo;

use crate::errors::usage;
use crate::{Cli, Command, DataArgs, ModelArgs, NetArgs, TrainArgs};

/// Held-out synthetic ids start here so evaluation never sees training images.
const HELD_OUT_FIRST: u64 = 1 << 20;
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

struct Ctx {
    seed: u64,
    train: TrainConfig,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut train = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        train.seed = s;
    }
    let ctx = Ctx {
        seed: train.seed,
        train,
    };
    match &cli.command {
        Command::Inspect { net } => inspect(net),
        Command::Validate { net, weights } => validate(net, weights.as_deref()),
        Command::Infer {
            model,
            input,
            conf,
            iou,
            out,
            annotate,
        } => infer(&ctx, model, input, *conf, *iou, out.as_deref(), annotate.as_deref()),
        Command::Prune {
            model,
            ratio,
            floor,
            floor_fraction,
            out_cfg,
            out_weights,
            report,
            sweep,
        } => {
            let floor = Floor {
                min_channels: *floor,
                fraction: *floor_fraction,
            };
            match sweep {
                Some(range) => prune_sweep(&ctx, model, range, floor),
                None => prune_once(
                    &ctx,
                    model,
                    *ratio,
                    floor,
                    out_cfg.as_deref(),
                    out_weights.as_deref(),
                    report.as_deref(),
                ),
            }
        }
        Command::TrainToy {
            data,
            train,
            out_weights,
            out_cfg,
        } => train_toy(&ctx, data, train, out_weights, out_cfg.as_deref()),
        Command::FineTune {
            model,
            data,
            train,
            out_weights,
        } => fine_tune(&ctx, model, data, train, out_weights),
        Command::Eval {
            model,
            data,
            iou,
            conf,
            nms,
            ap_interp,
            report,
        } => {
            let interp = ApInterp::parse(ap_interp).ok_or_else(|| usage(format!("unknown --ap-interp {ap_interp}")))?;
            let cfg = EvalConfig {
                iou_thresh: *iou,
                conf_thresh: *conf,
                nms_iou: *nms,
                interp,
            };
            evaluate(&ctx, model, data, &cfg, report.as_deref())
        }
        Command::Bench {
            model,
            input,
            n,
            warmup,
        } => bench(&ctx, model, input.as_deref(), *n, *warmup),
        Command::AugmentPreview {
            data,
            size,
            basic,
            out,
            out_labels,
        } => augment_preview(&ctx, data, *size, *basic, out, out_labels.as_deref()),
        Command::Sweep {
            model,
            ratios,
            data,
            fine_tune_epochs,
            n,
        } => sweep(&ctx, model, ratios, data, *fine_tune_epochs, *n),
        Command::MakeSynthetic {
            out,
            train,
            test,
            val,
            image_size,
        } => {
            let m = data::write_synthetic_split(out, [*train, *test, *val], *image_size, ctx.seed)?;
            println!("{}\n{}\n{}", m.train.display(), m.test.display(), m.val.display());
            Ok(())
        }
    }
}

fn load_net(args: &NetArgs) -> Result<NetworkDef> {
    let path = Path::new(&args.cfg);
    let mut net = if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let (mut net, warnings) =
            netcfg::parse_cfg_with_warnings(&text).with_context(|| format!("parsing {}", path.display()))?;
        for w in warnings {
            log::warn!("{}: {w:?}", path.display());
        }
        net.source_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        net
    } else if let Some(net) = zoo::by_name(&args.cfg) {
        net
    } else {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no cfg file or bundled network named {}", args.cfg),
        )
        .into());
    };
    if let Some(s) = args.size {
        net = zoo::resized(net, s, s);
    }
    Ok(net)
}

fn load_store(net: &NetworkDef, weights: Option<&Path>, seed: u64) -> Result<WeightStore> {
    match weights {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(netcfg::load_weights(&bytes, net).with_context(|| format!("loading {}", p.display()))?)
        }
        None => {
            log::warn!("no --weights given; using seeded random initialization");
            Ok(train::init_weights(net, seed)?)
        }
    }
}

fn load_model(ctx: &Ctx, args: &ModelArgs) -> Result<Model> {
    let net = load_net(&args.net)?;
    let store = load_store(&net, args.weights.as_deref(), ctx.seed)?;
    Ok(Model::new(net, store)?)
}

fn load_data(ctx: &Ctx, args: &DataArgs, first: u64) -> Result<Vec<Sample>> {
    match &args.list {
        Some(list) => {
            let labels = args
                .labels
                .clone()
                .unwrap_or_else(|| list.parent().unwrap_or(Path::new(".")).join("labels"));
            Ok(data::load_dataset(list, &labels)?)
        }
        None => Ok(data::synthetic_shapes(args.samples, args.image_size, ctx.seed, first)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(text: &str) -> Result<()> {
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn inspect(args: &NetArgs) -> Result<()> {
    let net = load_net(args)?;
    emit(&graph::render_layer_table(&net)?)?;
    println!("total parameters: {}", graph::count_parameters(&net)?.total);
    Ok(())
}

fn validate(args: &NetArgs, weights: Option<&Path>) -> Result<()> {
    let net = load_net(args)?;
    let problems = graph::validate(&net);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        return Err(usage(format!("{} structural problem(s)", problems.len())));
    }
    let params = graph::count_parameters(&net)?.total;
    let mut line = format!("ok: {} layers, {params} parameters", net.layers.len());
    if let Some(w) = weights {
        let store = load_store(&net, Some(w), 0)?;
        store.check_aligned(&net)?;
        line += &format!(", weights aligned ({} floats)", store.float_count());
    }
    println!("{line}");
    Ok(())
}

/// Image files under `input` in sorted path order, or `input` itself.
fn image_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} does not exist", input.display()),
            )
            .into());
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn infer(
    ctx: &Ctx,
    args: &ModelArgs,
    input: &Path,
    conf: f64,
    iou: f64,
    out: Option<&Path>,
    annotate: Option<&Path>,
) -> Result<()> {
    let model = load_model(ctx, args)?;
    let mut records = Vec::new();
    for p in image_paths(input)? {
        let image = data::load_image(&p)?;
        let dets = eval::detect_image(&model, &image, conf, iou)?;
        log::info!("{}: {} detections", p.display(), dets.len());
        records.extend(dets.iter().map(|d| DetectionRecord::new(&file_name(&p), d)));
        if let Some(dir) = annotate {
            let mut img = data::tensor_to_image(&image);
            crate::draw::draw_detections(&mut img, &dets);
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let target = dir.join(format!("{stem}.png"));
            img.save(&target)
                .with_context(|| format!("writing {}", target.display()))?;
        }
    }
    let text = detect::format_records(&records);
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => emit(&text),
    }
}

fn prune_once(
    ctx: &Ctx,
    args: &ModelArgs,
    ratio: f64,
    floor: Floor,
    out_cfg: Option<&Path>,
    out_weights: Option<&Path>,
    report: Option<&Path>,
) -> Result<()> {
    let net = load_net(&args.net)?;
    let store = load_store(&net, args.weights.as_deref(), ctx.seed)?;
    let p = prune::prune(&net, &store, ratio, floor)?;
    for (layer, ch, beta) in &p.report.beta_warnings {
        log::warn!("layer {layer} channel {ch}: pruned with beta = {beta}");
    }
    if let Some(path) = out_cfg {
        write_file(path, netcfg::serialize_cfg(&p.net)?.as_bytes())?;
    }
    if let Some(path) = out_weights {
        write_file(path, &netcfg::save_weights(&p.store, &p.net)?)?;
    }
    let text = p.report.render();
    match report {
        Some(path) => write_file(path, text.as_bytes()),
        None => emit(&text),
    }
}

/// `start:end:step`, both ends inclusive.
fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --sweep {text}; expected start:end:step")))?;
    let [start, end, step] = parts[..] else {
        return Err(usage(format!("bad --sweep {text}; expected start:end:step")));
    };
    if step.is_nan() || step <= 0.0 || end < start {
        return Err(usage(format!("bad --sweep {text}; need step > 0 and end >= start")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + step * k as f64).collect())
}

fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    let ratios: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| usage(format!("bad ratio {s:?}"))))
        .collect::<Result<_>>()?;
    if ratios.is_empty() {
        return Err(usage("--ratios needs at least one value"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(usage(format!("ratio {r} outside [0, 1)")));
    }
    Ok(ratios)
}

fn prune_sweep(ctx: &Ctx, args: &ModelArgs, text: &str, floor: Floor) -> Result<()> {
    let net = load_net(&args.net)?;
    let store = load_store(&net, args.weights.as_deref(), ctx.seed)?;
    let mut rows = Vec::new();
    for ratio in parse_range(text)? {
        let p = prune::prune(&net, &store, ratio, floor)?;
        rows.push(SweepRow {
            ratio,
            params: p.report.params_after,
            map50: None,
            fps: None,
        });
    }
    emit(&prune::render_sweep(&rows))
}

fn train_config(ctx: &Ctx, args: &TrainArgs, sparsity_default: bool) -> Result<TrainConfig> {
    let mut cfg = ctx.train.clone();
    if !sparsity_default {
        cfg.sparsity = None;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("batch", args.batch.map(|v| v.to_string()))?;
    set("lambda", args.lambda.map(|v| v.to_string()))?;
    set("mosaic", args.mosaic.map(|v| v.to_string()))?;
    set("augment", args.augment.map(|v| v.to_string()))?;
    if let Some(f) = &args.freeze {
        FreezeMode::parse(f).ok_or_else(|| usage(format!("unknown --freeze {f}")))?;
        cfg.set("freeze", f)?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn write_history(path: Option<&Path>, h: &TrainHistory) -> Result<()> {
    if let Some(p) = path {
        write_file(p, h.to_json_lines().as_bytes())?;
    }
    if let (Some(a), Some(b)) = (h.first_loss(), h.last_loss()) {
        log::info!("loss {a:.4} -> {b:.4} over {} epochs", h.records.len());
    }
    Ok(())
}

fn train_toy(
    ctx: &Ctx,
    data_args: &DataArgs,
    args: &TrainArgs,
    out_weights: &Path,
    out_cfg: Option<&Path>,
) -> Result<()> {
    let cfg = train_config(ctx, args, true)?;
    let set = load_data(ctx, data_args, 0)?;
    let net = zoo::toy();
    let (w, h) = train::train_toy(&cfg, &set)?;
    write_file(out_weights, &netcfg::save_weights(&w, &net)?)?;
    if let Some(p) = out_cfg {
        write_file(p, netcfg::serialize_cfg(&net)?.as_bytes())?;
    }
    write_history(args.history.as_deref(), &h)
}

fn fine_tune(ctx: &Ctx, model: &ModelArgs, data_args: &DataArgs, args: &TrainArgs, out_weights: &Path) -> Result<()> {
    // sparsity only when asked for on the command line
    let cfg = train_config(ctx, args, false)?;
    let net = load_net(&model.net)?;
    let store = load_store(&net, model.weights.as_deref(), ctx.seed)?;
    let set = load_data(ctx, data_args, 0)?;
    let (w, h) = train::train(&net, store, &cfg, &set)?;
    write_file(out_weights, &netcfg::save_weights(&w, &net)?)?;
    write_history(args.history.as_deref(), &h)
}

fn evaluate(ctx: &Ctx, model: &ModelArgs, data_args: &DataArgs, cfg: &EvalConfig, report: Option<&Path>) -> Result<()> {
    let m = load_model(ctx, model)?;
    let set = load_data(ctx, data_args, HELD_OUT_FIRST)?;
    let r = eval::evaluate_model(&m, &set, cfg)?;
    let text = r.render();
    if let Some(p) = report {
        write_file(p, text.as_bytes())?;
    }
    emit(&text)
}

fn bench_images(ctx: &Ctx, model: &Model, input: Option<&Path>) -> Result<Vec<Tensor>> {
    match input {
        Some(dir) => image_paths(dir)?.iter().map(|p| Ok(data::load_image(p)?)).collect(),
        None => {
            let [c, h, w] = model.input_shape();
            let mut g = SplitMix64::derive(ctx.seed, 0xbe4c);
            Ok((0..4)
                .map(|_| {
                    Tensor::chw(c, h, w, (0..c * h * w).map(|_| g.uniform_f32(0.0, 1.0)).collect()).expect("sized")
                })
                .collect())
        }
    }
}

fn bench(ctx: &Ctx, args: &ModelArgs, input: Option<&Path>, n: usize, warmup: usize) -> Result<()> {
    let model = load_model(ctx, args)?;
    let images = bench_images(ctx, &model, input)?;
    let r = eval::benchmark_fps(
        &model,
        &images,
        warmup,
        n,
        detect::DEFAULT_CONF_THRESH,
        detect::DEFAULT_IOU_THRESH,
    )?;
    emit(&r.render())
}

fn augment_preview(
    ctx: &Ctx,
    data_args: &DataArgs,
    size: usize,
    basic: bool,
    out: &Path,
    out_labels: Option<&Path>,
) -> Result<()> {
    let set = load_data(ctx, data_args, 0)?;
    if set.len() < 4 {
        return Err(usage(format!("mosaic needs 4 samples, got {}", set.len())));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    SplitMix64::derive(ctx.seed, 0x4d4f).shuffle(&mut order);
    let quad: [Sample; 4] = std::array::from_fn(|k| set[order[k]].clone());
    let mut m = data::mosaic(&quad, size, size, ctx.seed);
    if basic {
        m = data::basic_transforms(&m, &data::AugmentConfig::default(), ctx.seed);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    data::save_png(&m.image, out)?;
    let labels = out_labels.map_or_else(|| out.with_extension("txt"), Path::to_path_buf);
    write_file(&labels, data::format_labels(&m.gts).as_bytes())
}

fn sweep(ctx: &Ctx, args: &ModelArgs, ratios: &str, data_args: &DataArgs, ft_epochs: usize, n: usize) -> Result<()> {
    let ratios = parse_ratios(ratios)?;
    let net = load_net(&args.net)?;
    let store = load_store(&net, args.weights.as_deref(), ctx.seed)?;
    let eval_set = load_data(ctx, data_args, HELD_OUT_FIRST)?;
    let train_set = data::synthetic_shapes(data_args.samples, data_args.image_size, ctx.seed, 0);
    let ecfg = EvalConfig::default();
    let mut rows = Vec::new();
    for ratio in ratios {
        let p = prune::prune(&net, &store, ratio, Floor::default())?;
        let mut weights = p.store;
        if ft_epochs > 0 {
            let cfg = TrainConfig {
                epochs: ft_epochs,
                sparsity: None,
                ..ctx.train.clone()
            };
            weights = train::fine_tune(&p.net, weights, &cfg, &train_set)?.0;
        }
        let model = Model::new(p.net, weights)?;
        let map = eval::evaluate_model(&model, &eval_set, &ecfg)?.map;
        let images = bench_images(ctx, &model, None)?;
        let fps = eval::benchmark_fps(&model, &images, 1, n, ecfg.conf_thresh, ecfg.nms_iou)?.fps;
        log::info!("ratio {ratio}: mAP {map:.4}, {fps:.1} FPS");
        rows.push(SweepRow {
            ratio,
            params: p.report.params_after,
            map50: Some(map),
            fps: Some(fps),
        });
    }
    emit(&prune::render_sweep(&rows))
}
