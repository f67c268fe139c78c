use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;

use egd_core::dataset::list_images;
use egd_core::metrics::{benchmark_runs, hardware_description, write_predictions, PredictionRecord, ScoredBox};
use egd_core::model::{
    build_model, count_flops, count_params, decode_predictions, load_weights, save_weights, Architecture,
    CostReport, DecodeConfig, Layer, LayerGraph, Modality, VariantConfig, FLOP_CONVENTION, STRIDES,
};
use egd_core::restoration::{resize_bilinear, Image};
use egd_core::suite::{run_gradient_suite, SUITE_STEP, SUITE_TOLERANCE};
use egd_core::tensor::Tensor;

use crate::settings::{usage, ConfigFile, Resolver};
use crate::VariantArgs;

pub const PREDICTIONS_FILE: &str = "predictions.txt";
pub const REFERENCE_PARAMS: f64 = 3.5e6;
pub const REFERENCE_GFLOPS: f64 = 8.5;
/// Per-stage reduction band the C3Ghost blocks are expected to land in.
pub const REDUCTION_BAND: (f64, f64) = (0.25, 0.50);

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// rgb, ir or fusion.
    #[arg(long)]
    modality: Option<String>,
    /// Square input side (multiple of 32).
    #[arg(long)]
    imgsz: Option<usize>,
    /// Also write per-layer CSV tables and the analysis here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[command(flatten)]
    variant: VariantArgs,
    /// Weight file; without it the graph uses seeded random initialisation.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image files (RGB for rgb/fusion, IR for ir).
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// IR partners for fusion, matched by position.
    #[arg(long, num_args = 1..)]
    ir_input: Vec<PathBuf>,
    #[arg(long)]
    ir_dir: Option<PathBuf>,
    #[arg(long)]
    imgsz: Option<usize>,
    /// Confidence threshold.
    #[arg(long)]
    conf: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long)]
    nms: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Scale analytic gradients by this factor (negative control).
    #[arg(long, hide = true)]
    fault: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    variant: VariantArgs,
    #[arg(long)]
    imgsz: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InitWeightsArgs {
    #[command(flatten)]
    variant: VariantArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight file to write.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn resolve_variant(r: &mut Resolver, v: VariantArgs, default_modality: &str) -> anyhow::Result<VariantConfig> {
    let arch: Architecture = r
        .string("arch", v.arch, "egd")?
        .parse()
        .map_err(|e| usage(format!("--arch: {e}")))?;
    let modality = resolve_modality(r, v.modality, default_modality)?;
    let cfg = match arch {
        Architecture::Egd => VariantConfig::egd(modality),
        Architecture::Baseline => VariantConfig::baseline(modality),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn resolve_modality(r: &mut Resolver, flag: Option<String>, default: &str) -> anyhow::Result<Modality> {
    r.string("modality", flag, default)?
        .parse()
        .map_err(|e| usage(format!("--modality: {e}")))
}

fn check_imgsz(imgsz: usize) -> anyhow::Result<()> {
    if imgsz == 0 || !imgsz.is_multiple_of(32) {
        return Err(usage(format!("--imgsz must be a positive multiple of 32, got {imgsz}")));
    }
    Ok(())
}

/// Index ranges of the C2f / C3Ghost nodes, paired stage by stage.
fn csp_stages(base: &LayerGraph, egd: &LayerGraph) -> Vec<(usize, usize)> {
    let pick = |g: &LayerGraph, f: fn(&Layer) -> bool| -> Vec<usize> {
        g.nodes().iter().enumerate().filter(|(_, n)| f(&n.layer)).map(|(i, _)| i).collect()
    };
    let b = pick(base, |l| matches!(l, Layer::C2f(_)));
    let e = pick(egd, |l| matches!(l, Layer::C3Ghost(_)));
    b.into_iter().zip(e).collect()
}

/// Row sums equal the totals, totals equal the tensor walk, and MACs split
/// additively at the backbone boundary.
fn columns_consistent(rep: &CostReport, g: &LayerGraph) -> bool {
    let params: u64 = rep.rows.iter().map(|r| r.params).sum();
    let macs: u64 = rep.rows.iter().map(|r| r.macs).sum();
    let k = g.backbone_end().min(rep.rows.len());
    let split = rep.slice(0..k).total_macs + rep.slice(k..rep.rows.len()).total_macs;
    params == rep.total_params && rep.total_params == count_params(g) && macs == rep.total_macs && split == macs
}

pub fn analyze(a: AnalyzeArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("analyze")?;
    let modality = resolve_modality(&mut r, a.modality, "rgb")?;
    let imgsz = r.usize("imgsz", a.imgsz, 640)?;
    let output = r.opt_path("output", a.output)?;
    let stanza = r.finish()?;
    check_imgsz(imgsz)?;

    let shape = [1, modality.in_channels(), imgsz, imgsz];
    let base = build_model(&VariantConfig::baseline(modality), 0)?;
    let egd = build_model(&VariantConfig::egd(modality), 0)?;
    let (rb, re) = (count_flops(&base, shape)?, count_flops(&egd, shape)?);

    let mut s = String::new();
    let _ = writeln!(s, "# {FLOP_CONVENTION}");
    let _ = writeln!(s, "# input {}x{}x{}x{} ({modality})", shape[0], shape[1], shape[2], shape[3]);
    let _ = writeln!(s, "{:<18} {:>16} {:>16} {:>12}", "metric", "baseline", "egd", "egd/base");
    let row = |s: &mut String, name: &str, b: f64, e: f64, prec: usize| {
        let _ = writeln!(s, "{name:<18} {b:>16.prec$} {e:>16.prec$} {:>12.4}", e / b);
    };
    row(&mut s, "params", rb.total_params as f64, re.total_params as f64, 0);
    row(&mut s, "MACs", rb.total_macs as f64, re.total_macs as f64, 0);
    row(&mut s, "GFLOPs", rb.total_flops() as f64 / 1e9, re.total_flops() as f64 / 1e9, 3);
    let _ = writeln!(s, "{:<18} {:>16} {:>16}", "stem in-channels", base.in_channels(), egd.in_channels());

    let _ = writeln!(s, "\nper-stage CSP blocks, C2f -> C3Ghost");
    let _ = writeln!(
        s,
        "{:<10} {:<10} {:>12} {:>12} {:>10}  band [{:.0}%, {:.0}%]",
        "baseline",
        "egd",
        "C2f",
        "C3Ghost",
        "reduction",
        REDUCTION_BAND.0 * 100.0,
        REDUCTION_BAND.1 * 100.0
    );
    for (bi, ei) in csp_stages(&base, &egd) {
        let (pb, pe) = (rb.rows[bi].params, re.rows[ei].params);
        let red = 1.0 - pe as f64 / pb as f64;
        let inside = (REDUCTION_BAND.0..=REDUCTION_BAND.1).contains(&red);
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:>12} {:>12} {:>9.1}%  {}",
            rb.rows[bi].name,
            re.rows[ei].name,
            pb,
            pe,
            red * 100.0,
            if inside { "inside" } else { "outside" }
        );
    }

    let sums_ok = columns_consistent(&rb, &base) && columns_consistent(&re, &egd);
    let _ = writeln!(s, "\ncolumn sums: {}", if sums_ok { "PASS" } else { "FAIL" });
    let dp = re.total_params as f64 - REFERENCE_PARAMS;
    let df = re.total_flops() as f64 / 1e9 - REFERENCE_GFLOPS;
    let _ = writeln!(
        s,
        "reference ~{:.1}M params / ~{REFERENCE_GFLOPS} GFLOPs: egd differs by {:+.3}M params ({:+.1}%), {:+.3} GFLOPs ({:+.1}%)",
        REFERENCE_PARAMS / 1e6,
        dp / 1e6,
        100.0 * dp / REFERENCE_PARAMS,
        df,
        100.0 * df / REFERENCE_GFLOPS
    );
    print!("{s}");
    if let Some(dir) = output {
        stanza.write(&dir)?;
        std::fs::write(dir.join("analysis.txt"), &s).context("writing analysis.txt")?;
        std::fs::write(dir.join("baseline_cost.csv"), rb.to_csv()).context("writing baseline_cost.csv")?;
        std::fs::write(dir.join("egd_cost.csv"), re.to_csv()).context("writing egd_cost.csv")?;
    }
    Ok(if sums_ok { 0 } else { 1 })
}

/// Load, match the channel count and resize to the network input.
fn load_input(path: &Path, channels: usize, imgsz: usize) -> anyhow::Result<Tensor> {
    let img = Image::load(path)?;
    let img = match (img.channels(), channels) {
        (a, b) if a == b => img,
        (1, 3) => Image::from_fn(img.width(), img.height(), 3, |_, y, x| img.get(0, y, x))?,
        (3, 1) => Image::from_fn(img.width(), img.height(), 1, |_, y, x| {
            (img.get(0, y, x) + img.get(1, y, x) + img.get(2, y, x)) / 3.0
        })?,
        (a, b) => anyhow::bail!("{}: cannot convert {a} channels to {b}", path.display()),
    };
    Ok(resize_bilinear(&img, imgsz, imgsz)?.to_tensor())
}

fn gather(files: Vec<PathBuf>, dir: Option<PathBuf>) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = files;
    if let Some(d) = dir {
        out.extend(list_images(&d)?);
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn forward(a: ForwardArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("forward")?;
    let cfg = resolve_variant(&mut r, a.variant, "rgb")?;
    let weights = r.opt_path("weights", a.weights)?;
    let seed = r.u64("seed", a.seed, 0)?;
    let inputs = r.paths("input", a.input)?;
    let input_dir = r.opt_path("input_dir", a.input_dir)?;
    let ir_inputs = r.paths("ir_input", a.ir_input)?;
    let ir_dir = r.opt_path("ir_dir", a.ir_dir)?;
    let imgsz = r.usize("imgsz", a.imgsz, 640)?;
    let conf = r.f64("conf", a.conf, 0.25)?;
    let nms = r.f64("nms", a.nms, 0.45)?;
    let output = r.path("output", a.output)?;
    let stanza = r.finish()?;
    check_imgsz(imgsz)?;
    for (name, v) in [("--conf", conf), ("--nms", nms)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(usage(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if inputs.is_empty() && input_dir.is_none() {
        return Err(usage("forward: give --input or --input-dir"));
    }
    let fusion = cfg.modality == Modality::Fusion;
    if fusion && ir_inputs.is_empty() && ir_dir.is_none() {
        return Err(usage("forward: fusion needs --ir-input or --ir-dir"));
    }

    let mut graph = build_model(&cfg, seed)?;
    if let Some(w) = &weights {
        load_weights(&mut graph, w).with_context(|| format!("loading {}", w.display()))?;
    }
    let primary = gather(inputs, input_dir)?;
    let partners = if fusion {
        let ir = gather(ir_inputs, ir_dir)?;
        if ir.len() < primary.len() {
            for p in &primary[ir.len()..] {
                eprintln!("missing IR partner for {}", p.display());
            }
            anyhow::bail!("{} RGB images but only {} IR images", primary.len(), ir.len());
        }
        if ir.len() > primary.len() {
            anyhow::bail!("{} IR images but only {} RGB images", ir.len(), primary.len());
        }
        ir.into_iter().map(Some).collect()
    } else {
        vec![None; primary.len()]
    };

    let dc = DecodeConfig {
        num_classes: cfg.num_classes,
        reg_max: cfg.reg_max,
        conf_threshold: conf,
        nms_iou: nms,
    };
    let per_image: Vec<Vec<PredictionRecord>> = primary
        .par_iter()
        .zip(&partners)
        .map(|(p, ir)| -> anyhow::Result<Vec<PredictionRecord>> {
            let maps = match ir {
                Some(irp) => {
                    let (x, y) = (load_input(p, 3, imgsz)?, load_input(irp, 1, imgsz)?);
                    graph.predict_pair(&x, &y)?
                }
                None => graph.predict(&load_input(p, cfg.in_channels, imgsz)?)?,
            };
            let dets = decode_predictions(&maps, &STRIDES, dc)?.pop().unwrap_or_default();
            let id = stem(p);
            Ok(dets
                .into_iter()
                .map(|d| PredictionRecord {
                    image_id: id.clone(),
                    det: ScoredBox {
                        class_id: d.class_id,
                        confidence: d.score,
                        bbox: d.bbox,
                    },
                })
                .collect())
        })
        .collect::<anyhow::Result<_>>()?;

    let records: Vec<PredictionRecord> = per_image.into_iter().flatten().collect();
    std::fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
    let path = output.join(PREDICTIONS_FILE);
    write_predictions(&path, &records)?;
    stanza.write(&output)?;
    println!(
        "{} images, {} detections -> {}",
        primary.len(),
        records.len(),
        path.display()
    );
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("gradcheck")?;
    let seed = r.u64("seed", a.seed, 0)?;
    r.finish()?;
    let started = std::time::Instant::now();
    let entries = run_gradient_suite(seed, a.fault)?;
    println!("# central differences, step {SUITE_STEP:e}, tolerance {SUITE_TOLERANCE:e}");
    let mut failed = Vec::new();
    for e in &entries {
        println!(
            "{} {:<20} configs {} max rel error {:.3e}",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.configs,
            e.max_rel_error
        );
        if !e.passed {
            failed.push(e);
        }
    }
    println!("{} entries in {:.1}s", entries.len(), started.elapsed().as_secs_f64());
    for e in &failed {
        eprintln!("gradcheck failed: {} max relative error {:.3e}", e.name, e.max_rel_error);
    }
    Ok(if failed.is_empty() { 0 } else { 1 })
}

pub fn bench(a: BenchArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("bench")?;
    let cfg = resolve_variant(&mut r, a.variant, "rgb")?;
    let imgsz = r.usize("imgsz", a.imgsz, 640)?;
    let warmup = r.usize("warmup", a.warmup, 1)?;
    let iters = r.usize("iters", a.iters, 10)?;
    let runs = r.usize("runs", a.runs, 3)?;
    let seed = r.u64("seed", a.seed, 0)?;
    r.finish()?;
    check_imgsz(imgsz)?;
    if warmup < 1 || iters < 5 || runs < 1 {
        return Err(usage("bench needs --warmup >= 1, --iters >= 5 and --runs >= 1"));
    }
    let graph = build_model(&cfg, seed)?;
    let shape = [1, cfg.in_channels, imgsz, imgsz];
    let s = benchmark_runs(&graph, shape, warmup, iters, runs)?;
    println!("# {} {} at {imgsz}x{imgsz}, batch 1, {}", cfg.architecture, cfg.modality, hardware_description());
    for (i, run) in s.runs.iter().enumerate() {
        println!(
            "run {i}: mean latency {:.3} ms, fps {:.2}, CV {:.2}%",
            run.mean_latency_s * 1e3,
            run.fps,
            run.cv * 100.0
        );
    }
    println!(
        "fps {:.2}, mean latency {:.3} ms, CV of run means {:.2}%",
        s.fps,
        s.mean_latency_s * 1e3,
        s.cv_of_means * 100.0
    );
    println!("# desk-scale CPU figures; not comparable with published GPU throughput");
    Ok(0)
}

pub fn init_weights(a: InitWeightsArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("init-weights")?;
    let cfg = resolve_variant(&mut r, a.variant, "rgb")?;
    let seed = r.u64("seed", a.seed, 0)?;
    let output = r.path("output", a.output)?;
    r.finish()?;
    let graph = build_model(&cfg, seed)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_weights(&graph, &output)?;
    println!(
        "{} {} seed {seed}: {} parameters -> {}",
        cfg.architecture,
        cfg.modality,
        count_params(&graph),
        output.display()
    );
    Ok(0)
}
