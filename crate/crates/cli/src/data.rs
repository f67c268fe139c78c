use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;

use egd_core::dataset::{
    compute_size_thresholds, distribution_report, emit_manifests, label_path_for, list_images, pair_modalities,
    read_manifests, stratified_split, stratum_of, verify_integrity, Corpus, ImagePair, SizeThresholds,
    SplitManifest, StratumCount,
};
use egd_core::restoration::{normalize_ir, FilterChain, FilterSettings, Image, Psf};

use crate::settings::{usage, ConfigFile};

pub const RESTORE_REPORT: &str = "restore_report.txt";
pub const PREPARE_REPORT: &str = "report.txt";

#[derive(Args, Debug)]
pub struct RestoreArgs {
    /// Directory of PNG/JPEG images (an `images/` subdirectory is used if present).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated filters from median, rl, unsharp. An empty chain copies files unchanged.
    #[arg(long)]
    chain: Option<String>,
    /// Adaptive median window (odd).
    #[arg(long)]
    window: Option<usize>,
    /// Local variance above which the median is applied.
    #[arg(long)]
    variance_threshold: Option<f64>,
    /// Point-spread function text file; `rl` is skipped without one.
    #[arg(long)]
    psf: Option<PathBuf>,
    #[arg(long)]
    rl_iterations: Option<usize>,
    /// Unsharp-mask blur sigma.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    amount: Option<f64>,
    #[arg(long)]
    unsharp_threshold: Option<f64>,
    /// Min-max normalise single-channel images before filtering.
    #[arg(long)]
    normalize_ir: bool,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    rgb: Option<PathBuf>,
    #[arg(long)]
    ir: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Train fraction per stratum.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PairArgs {
    #[arg(long)]
    rgb: Option<PathBuf>,
    #[arg(long)]
    ir: Option<PathBuf>,
    /// Also write pairs.txt here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    rgb: Option<PathBuf>,
    #[arg(long)]
    ir: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Directory holding the four list files.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// text or csv.
    #[arg(long)]
    format: Option<String>,
    /// Also write distribution.{txt,csv} here.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if cond {
        Ok(())
    } else {
        Err(usage(msg()))
    }
}

struct RestoreJob {
    chain: FilterChain,
    normalize: bool,
}

enum Outcome {
    Ok { warnings: Vec<String> },
    Failed(String),
}

fn restore_one(job: &RestoreJob, src: &Path, dst: &Path) -> anyhow::Result<Vec<String>> {
    let mut warnings = Vec::new();
    if job.chain.steps.is_empty() && !job.normalize {
        std::fs::copy(src, dst).with_context(|| format!("copying {}", src.display()))?;
    } else {
        let mut img = Image::load(src)?;
        if job.normalize {
            if img.channels() == 1 {
                img = normalize_ir(&img)?;
            } else {
                warnings.push("not single-channel, IR normalisation skipped".to_string());
            }
        }
        let mut out = job.chain.apply(&img)?;
        out.clamp01();
        out.save(dst)?;
    }
    let label = label_path_for(src);
    if label.is_file() {
        let to = label_path_for(dst);
        if let Some(dir) = to.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::copy(&label, &to).with_context(|| format!("copying {}", label.display()))?;
    }
    Ok(warnings)
}

pub fn restore(a: RestoreArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("restore")?;
    let input = r.path("input", a.input)?;
    let output = r.path("output", a.output)?;
    let chain_spec = r.string("chain", a.chain, "median,rl,unsharp")?;
    let d = FilterSettings::default();
    let window = r.usize("window", a.window, d.median_window)?;
    let variance_threshold = r.f64("variance_threshold", a.variance_threshold, d.variance_threshold)?;
    let psf_path = r.opt_path("psf", a.psf)?;
    let rl_iterations = r.usize("rl_iterations", a.rl_iterations, d.rl_iterations)?;
    let sigma = r.f64("sigma", a.sigma, d.unsharp_sigma)?;
    let amount = r.f64("amount", a.amount, d.unsharp_amount)?;
    let unsharp_threshold = r.f64("unsharp_threshold", a.unsharp_threshold, d.unsharp_threshold)?;
    let normalize = r.flag("normalize_ir", a.normalize_ir)?;
    let stanza = r.finish()?;

    check(window % 2 == 1, || format!("--window must be odd, got {window}"))?;
    check(variance_threshold >= 0.0, || format!("--variance-threshold must be >= 0, got {variance_threshold}"))?;
    check(rl_iterations >= 1, || "--rl-iterations must be at least 1".into())?;
    check(sigma > 0.0 && sigma.is_finite(), || format!("--sigma must be positive, got {sigma}"))?;
    check(amount >= 0.0, || format!("--amount must be >= 0, got {amount}"))?;
    check(unsharp_threshold >= 0.0, || format!("--unsharp-threshold must be >= 0, got {unsharp_threshold}"))?;
    let psf = psf_path.as_deref().map(Psf::load).transpose()?;
    let names: Vec<&str> = chain_spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let settings = FilterSettings {
        median_window: window,
        variance_threshold,
        psf,
        rl_iterations,
        unsharp_sigma: sigma,
        unsharp_amount: amount,
        unsharp_threshold,
    };
    let chain = FilterChain::from_names(&names, &settings).map_err(|e| usage(format!("--chain: {e}")))?;
    let mut global_warnings = Vec::new();
    if names.contains(&"rl") && settings.psf.is_none() {
        global_warnings.push("chain lists rl but no --psf was given; rl skipped".to_string());
    }

    let images = list_images(&input)?;
    let nested = images[0].parent().is_some_and(|p| p.file_name().is_some_and(|n| n == "images"));
    let out_images = if nested { output.join("images") } else { output.clone() };
    std::fs::create_dir_all(&out_images).with_context(|| format!("creating {}", out_images.display()))?;
    let job = RestoreJob { chain, normalize };
    let outcomes: Vec<Outcome> = images
        .par_iter()
        .map(|src| {
            let dst = out_images.join(src.file_name().expect("listed files have names"));
            match restore_one(&job, src, &dst) {
                Ok(warnings) => Outcome::Ok { warnings },
                Err(e) => Outcome::Failed(format!("{e:#}")),
            }
        })
        .collect();

    let mut text = String::new();
    let (mut ok, mut failed, mut warned) = (0, 0, global_warnings.len());
    for w in &global_warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    for (src, o) in images.iter().zip(&outcomes) {
        let name = src.file_name().unwrap_or_default().to_string_lossy();
        match o {
            Outcome::Ok { warnings } => {
                ok += 1;
                let _ = writeln!(text, "ok {name}");
                for w in warnings {
                    warned += 1;
                    let _ = writeln!(text, "warning {name}: {w}");
                }
            }
            Outcome::Failed(e) => {
                failed += 1;
                let _ = writeln!(text, "failed {name}: {e}");
            }
        }
    }
    let steps: Vec<&str> = job.chain.steps.iter().map(|s| s.name()).collect();
    let summary = format!(
        "restored {ok}/{} files with chain [{}], {warned} warnings, {failed} failures",
        images.len(),
        steps.join(", ")
    );
    let _ = writeln!(text, "{summary}");
    let report = output.join(RESTORE_REPORT);
    std::fs::write(&report, &text).with_context(|| format!("writing {}", report.display()))?;
    stanza.write(&output)?;
    for w in &global_warnings {
        eprintln!("warning: {w}");
    }
    println!("{summary}");
    if failed > 0 {
        for line in text.lines().filter(|l| l.starts_with("failed")) {
            eprintln!("{line}");
        }
        return Ok(1);
    }
    Ok(0)
}

/// Files left without a partner by truncation.
fn unpaired(rgb: &Path, ir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (a, b) = (list_images(rgb)?, list_images(ir)?);
    let n = a.len().min(b.len());
    Ok(a.into_iter().skip(n).chain(b.into_iter().skip(n)).collect())
}

struct Prepared {
    corpus: Corpus,
    thresholds: SizeThresholds,
    split: SplitManifest,
}

fn pair_and_split(rgb: &Path, ir: &Path, ratio: f64, seed: u64) -> anyhow::Result<Prepared> {
    let pairs = pair_modalities(rgb, ir)?;
    let corpus = Corpus::load(pairs)?;
    let thresholds = compute_size_thresholds(&corpus.all_records())?;
    let split = stratified_split(&corpus, &thresholds, ratio, seed)?;
    Ok(Prepared {
        corpus,
        thresholds,
        split,
    })
}

fn ratio_ok(ratio: f64) -> anyhow::Result<()> {
    check(ratio > 0.0 && ratio < 1.0, || format!("--ratio must lie in (0, 1), got {ratio}"))
}

pub fn prepare(a: PrepareArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("prepare")?;
    let rgb = r.path("rgb", a.rgb)?;
    let ir = r.path("ir", a.ir)?;
    let output = r.path("output", a.output)?;
    let ratio = r.f64("ratio", a.ratio, 0.9)?;
    let seed = r.u64("seed", a.seed, 0)?;
    let stanza = r.finish()?;
    ratio_ok(ratio)?;

    let p = pair_and_split(&rgb, &ir, ratio, seed)?;
    emit_manifests(&p.split, &output)?;
    let integrity = verify_integrity(&output);
    let orphans = unpaired(&rgb, &ir)?;
    let dist = distribution_report(&p.corpus, &p.split, &p.thresholds);

    let mut text = dist.to_text();
    let _ = writeln!(text, "\n{}", integrity.to_text().trim_end());
    if !orphans.is_empty() {
        let _ = writeln!(text, "unpaired images dropped by truncation: {}", orphans.len());
        for o in &orphans {
            let _ = writeln!(text, "  unpaired: {}", o.display());
        }
    }
    let _ = writeln!(text, "\n{}", stanza.render().trim_end());
    let report = output.join(PREPARE_REPORT);
    std::fs::write(&report, &text).with_context(|| format!("writing {}", report.display()))?;

    println!(
        "{} pairs: {} train, {} val; {}",
        p.corpus.pairs.len(),
        p.split.train.len(),
        p.split.val.len(),
        integrity.summary()
    );
    if !integrity.is_clean() || !orphans.is_empty() {
        for f in &integrity.failures {
            eprintln!("{f}");
        }
        for o in &orphans {
            eprintln!("unpaired: {}", o.display());
        }
        eprintln!("verification failed; see {}", report.display());
        return Ok(1);
    }
    println!("report: {}", report.display());
    Ok(0)
}

pub fn pair(a: PairArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("pair")?;
    let rgb = r.path("rgb", a.rgb)?;
    let ir = r.path("ir", a.ir)?;
    let output = r.opt_path("output", a.output)?;
    let stanza = r.finish()?;
    let pairs = pair_modalities(&rgb, &ir)?;
    let mut text = String::new();
    for p in &pairs {
        let _ = writeln!(text, "{}\t{}\t{}", p.pair_index, p.rgb_path.display(), p.ir_path.display());
    }
    print!("{text}");
    let orphans = unpaired(&rgb, &ir)?;
    if !orphans.is_empty() {
        eprintln!("{} images without a partner were dropped", orphans.len());
    }
    if let Some(dir) = output {
        stanza.write(&dir)?;
        std::fs::write(dir.join("pairs.txt"), &text).context("writing pairs.txt")?;
    }
    Ok(0)
}

pub fn split(a: SplitArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("split")?;
    let rgb = r.path("rgb", a.rgb)?;
    let ir = r.path("ir", a.ir)?;
    let output = r.path("output", a.output)?;
    let ratio = r.f64("ratio", a.ratio, 0.9)?;
    let seed = r.u64("seed", a.seed, 0)?;
    let stanza = r.finish()?;
    ratio_ok(ratio)?;
    let p = pair_and_split(&rgb, &ir, ratio, seed)?;
    let paths = emit_manifests(&p.split, &output)?;
    stanza.write(&output)?;
    for s in &p.split.strata {
        println!("{:<18} train {:>6} val {:>6}", s.stratum.to_string(), s.train, s.val);
    }
    println!(
        "{} train, {} val -> {}",
        p.split.train.len(),
        p.split.val.len(),
        paths.config.display()
    );
    Ok(0)
}

pub fn verify(a: VerifyArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("verify")?;
    let dir = r.path("manifest", a.manifest)?;
    r.finish()?;
    let rep = verify_integrity(&dir);
    print!("{}", rep.to_text());
    Ok(if rep.is_clean() { 0 } else { 1 })
}

/// Rebuild corpus, thresholds and stratum table from emitted lists.
fn reload(dir: &Path) -> anyhow::Result<Prepared> {
    let m = read_manifests(dir)?;
    let n_train = m.train.len();
    let pairs: Vec<ImagePair> = m
        .train
        .into_iter()
        .chain(m.val)
        .enumerate()
        .map(|(i, p)| ImagePair::new(p.rgb_path, p.ir_path, i))
        .collect();
    let corpus = Corpus::load(pairs)?;
    let thresholds = compute_size_thresholds(&corpus.all_records())?;
    let mut tally: BTreeMap<_, (usize, usize)> = BTreeMap::new();
    for i in 0..corpus.pairs.len() {
        let e = tally.entry(stratum_of(corpus.pair_records(i), &thresholds)).or_default();
        if i < n_train {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let split = SplitManifest {
        train: corpus.pairs[..n_train].to_vec(),
        val: corpus.pairs[n_train..].to_vec(),
        strata: tally
            .into_iter()
            .map(|(stratum, (train, val))| StratumCount { stratum, train, val })
            .collect(),
    };
    Ok(Prepared {
        corpus,
        thresholds,
        split,
    })
}

pub fn report(a: ReportArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("report")?;
    let dir = r.path("manifest", a.manifest)?;
    let format = r.string("format", a.format, "text")?;
    let output = r.opt_path("output", a.output)?;
    let stanza = r.finish()?;
    check(format == "text" || format == "csv", || format!("--format must be text or csv, got '{format}'"))?;
    let p = reload(&dir)?;
    let rep = distribution_report(&p.corpus, &p.split, &p.thresholds);
    let (body, name) = if format == "csv" {
        (rep.to_csv(), "distribution.csv")
    } else {
        (rep.to_text(), "distribution.txt")
    };
    print!("{body}");
    if let Some(out) = output {
        stanza.write(&out)?;
        std::fs::write(out.join(name), &body).with_context(|| format!("writing {name}"))?;
    }
    Ok(0)
}
