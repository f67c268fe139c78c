//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use egd_core::blocks::{deform_conv2d, Block, ConvBnAct, GhostConv};
use egd_core::dataset::{
    compute_size_thresholds, emit_manifests, pair_modalities, stratified_split, verify_integrity, Corpus,
    IntegrityFailure, SplitManifest,
};
use egd_core::metrics::{benchmark_runs, evaluate, BBox, EvalConfig, GroundTruth, ImageGt, ImagePred, ScoredBox};
use egd_core::model::{build_model, count_flops, count_params, Layer, LayerGraph, Modality, VariantConfig};
use egd_core::restoration::{adaptive_median, richardson_lucy, unsharp_mask, Image, Psf};
use egd_core::suite::{run_gradient_suite, CONFIGS_PER_ENTRY, SUITE_TOLERANCE};
use egd_core::tensor::kernels::conv2d;
use egd_core::tensor::{ConvGeom, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let entries = run_gradient_suite(0, None).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    let few = entries.iter().any(|e| e.configs < CONFIGS_PER_ENTRY);
    let required = ["GhostConv", "GhostBottleneck", "C3Ghost", "EMA", "SPPF", "DeformConv", "DetectHead", "FusionStem"];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !entries.iter().any(|e| e.name.starts_with(r)))
        .collect();
    let pass = failed.is_empty() && !few && missing.is_empty() && worst < SUITE_TOLERANCE && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} entries x >= {CONFIGS_PER_ENTRY} configs, max rel error {worst:.2e} (< {SUITE_TOLERANCE:e}), {secs:.1}s (< 120s){}{}",
            entries.len(),
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") },
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") },
        ),
    )
}

fn deform_reduction() -> Outcome {
    let mut r = rng(2);
    let configs = 12;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n = r.random_range(1..=2);
        let c = r.random_range(1..=4);
        let o = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let geom = ConvGeom::new(r.random_range(1..=2), r.random_range(0..=k / 2)).with_dilation(r.random_range(1..=2));
        let hw = r.random_range(11..=15);
        let x = random_tensor(&mut r, [n, c, hw, hw]);
        let w = random_tensor(&mut r, [o, c, k, k]);
        let reference = conv2d(&x, &w, None, geom).unwrap();
        let [_, _, ho, wo] = reference.shape();
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let off = tape.constant(Tensor::zeros([n, 2 * k * k, ho, wo]));
        let mask = tape.constant(Tensor::from_vec([n, k * k, ho, wo], vec![1.0; n * k * k * ho * wo]).unwrap());
        let y = deform_conv2d(&mut tape, &xv, &off, Some(&mask), &wv, geom).unwrap();
        assert_eq!(y.shape(), reference.shape());
        for (a, b) in y.value().data().iter().zip(reference.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-5, format!("{configs} configs, max abs diff {worst:.2e} (<= 1e-5)"))
}

fn ghost_efficiency() -> Outcome {
    let mut init = rng(3);
    let mut parts = Vec::new();
    let mut pass = true;
    for c in [64, 128, 256] {
        let shape = [1, c, 40, 40];
        let g = GhostConv::new(c, c, 3, 1, true, &mut init).unwrap().cost(shape).unwrap();
        let s = ConvBnAct::new(c, c, 3, 1, &mut init).unwrap().cost(shape).unwrap();
        let ratio = g.macs as f64 / s.macs as f64;
        pass &= ratio < 0.55;
        parts.push(format!("c={c}: {ratio:.4}"));
    }
    outcome(pass, format!("ghost/standard MACs {} (< 0.55)", parts.join(", ")))
}

fn csp_params(g: &LayerGraph, shape: [usize; 4], want_ghost: bool) -> Vec<(String, u64)> {
    let rep = count_flops(g, shape).unwrap();
    g.nodes()
        .iter()
        .zip(&rep.rows)
        .filter(|(n, _)| match n.layer {
            Layer::C3Ghost(_) => want_ghost,
            Layer::C2f(_) => !want_ghost,
            _ => false,
        })
        .map(|(_, r)| (r.name.clone(), r.params))
        .collect()
}

fn c3ghost_compression() -> Outcome {
    let shape = [1, 3, 640, 640];
    let base = build_model(&VariantConfig::baseline(Modality::Rgb), 0).unwrap();
    let egd = build_model(&VariantConfig::egd(Modality::Rgb), 0).unwrap();
    let (b, e) = (csp_params(&base, shape, false), csp_params(&egd, shape, true));
    let mut pass = b.len() == e.len() && !b.is_empty();
    let mut parts = Vec::new();
    for ((bn, bp), (_, ep)) in b.iter().zip(&e) {
        let red = 1.0 - *ep as f64 / *bp as f64;
        pass &= (0.25..=0.50).contains(&red);
        parts.push(format!("{bn} {:.1}%", 100.0 * red));
    }
    outcome(pass, format!("per-stage reduction {} (band [25%, 50%])", parts.join(", ")))
}

/// Parameter count from the weight file, which lists each stored tensor
/// with its dimensions; running statistics are not learnable.
fn params_from_weight_file(g: &LayerGraph) -> u64 {
    let bytes = egd_core::model::weights_to_bytes(g).unwrap();
    egd_core::model::parse_weights(&bytes)
        .unwrap()
        .iter()
        .filter(|(name, _, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
        .map(|(_, dims, data)| {
            assert_eq!(dims.iter().product::<usize>(), data.len());
            data.len() as u64
        })
        .sum()
}

fn model_accounting() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, cfg) in [
        ("baseline/rgb", VariantConfig::baseline(Modality::Rgb)),
        ("egd/rgb", VariantConfig::egd(Modality::Rgb)),
        ("egd/fusion", VariantConfig::egd(Modality::Fusion)),
    ] {
        let g = build_model(&cfg, 0).unwrap();
        let shape = [1, g.in_channels(), 640, 640];
        let rep = count_flops(&g, shape).unwrap();
        let walked = count_params(&g);
        let listed = params_from_weight_file(&g);
        let rows: u64 = rep.rows.iter().map(|r| r.params).sum();
        pass &= walked == listed && rows == walked && rep.total_params == walked;
        let len = rep.rows.len();
        for k in [1, g.backbone_end(), len / 2, len - 1] {
            pass &= rep.slice(0..k).total_macs + rep.slice(k..len).total_macs == rep.total_macs;
        }
        parts.push(format!("{label} {walked}"));
        if label == "egd/fusion" {
            pass &= g.in_channels() == 4;
            let dp = walked as f64 - 3.5e6;
            let df = rep.total_flops() as f64 / 1e9 - 8.5;
            parts.push(format!(
                "stem in-channels {}; vs ~3.5M/~8.5 GFLOPs: {:+.3}M params, {:+.3} GFLOPs (informational)",
                g.in_channels(),
                dp / 1e6,
                df
            ));
        }
    }
    outcome(pass, format!("params == weight-file tensors, FLOPs additive: {}", parts.join(", ")))
}

fn random_box(r: &mut ChaCha8Rng) -> [f64; 4] {
    let w = r.random_range(0.1..0.4);
    let h = r.random_range(0.1..0.4);
    [r.random_range(w / 2.0..1.0 - w / 2.0), r.random_range(h / 2.0..1.0 - h / 2.0), w, h]
}

fn jitter(r: &mut ChaCha8Rng, b: [f64; 4]) -> [f64; 4] {
    let d = 0.03;
    [
        b[0] + r.random_range(-d..d),
        b[1] + r.random_range(-d..d),
        (b[2] * r.random_range(0.85..1.15)).min(0.5),
        (b[3] * r.random_range(0.85..1.15)).min(0.5),
    ]
}

fn metric_oracle() -> Outcome {
    let mut r = rng(6);
    let instances = 60;
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let cfg = EvalConfig::default();
    let (mut mismatches, mut order_violations, mut scored) = (0, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let images = r.random_range(1..=3);
        let gts: Vec<(usize, usize, [f64; 4])> = (0..r.random_range(1..=6))
            .map(|_| (r.random_range(0..images), r.random_range(0..2), random_box(&mut r)))
            .collect();
        let preds: Vec<(usize, usize, f64, [f64; 4])> = (0..r.random_range(0..=10))
            .map(|_| {
                let conf = (r.random_range(1..=20) as f64) / 20.0;
                if r.random_bool(0.6) {
                    let g = gts[r.random_range(0..gts.len())];
                    (g.0, g.1, conf, jitter(&mut r, g.2))
                } else {
                    (r.random_range(0..images), r.random_range(0..2), conf, random_box(&mut r))
                }
            })
            .collect();
        let ip: Vec<ImagePred> = preds
            .iter()
            .map(|p| ImagePred {
                image: p.0,
                det: ScoredBox {
                    class_id: p.1,
                    confidence: p.2,
                    bbox: BBox::new(p.3[0], p.3[1], p.3[2], p.3[3]),
                },
            })
            .collect();
        let ig: Vec<ImageGt> = gts
            .iter()
            .map(|g| ImageGt {
                image: g.0,
                gt: GroundTruth {
                    class_id: g.1,
                    bbox: BBox::new(g.2[0], g.2[1], g.2[2], g.2[3]),
                },
            })
            .collect();
        let rep = evaluate(&ip, &ig, 2, &cfg).unwrap();
        let mut per_class = Vec::new();
        for class in 0..2 {
            let g: Vec<_> = gts
                .iter()
                .filter(|g| g.1 == class)
                .map(|g| (g.0, corners(g.2[0], g.2[1], g.2[2], g.2[3])))
                .collect();
            if g.is_empty() {
                continue;
            }
            let p: Vec<_> = preds
                .iter()
                .filter(|p| p.1 == class)
                .map(|p| (p.0, p.2, corners(p.3[0], p.3[1], p.3[2], p.3[3])))
                .collect();
            let want: Vec<f64> = thresholds
                .iter()
                .map(|&t| if p.is_empty() { 0.0 } else { oracle_ap(&p, &g, t) })
                .collect();
            let got = &rep.classes.iter().find(|c| c.class_id == class).expect("class scored").ap;
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
                if a != b {
                    mismatches += 1;
                }
            }
            scored += 1;
            per_class.push(want);
        }
        let n = per_class.len() as f64;
        let map50 = per_class.iter().map(|a| a[0]).sum::<f64>() / n;
        let map = per_class.iter().map(|a| a.iter().sum::<f64>() / 10.0).sum::<f64>() / n;
        if rep.map50_95 > rep.map50 || map > map50 + 1e-15 {
            order_violations += 1;
        }
    }
    outcome(
        mismatches == 0 && order_violations == 0,
        format!(
            "{instances} instances, {scored} class curves x 10 IoU thresholds: {mismatches} AP mismatches (max diff {worst:.1e}), {order_violations} mAP50-95 > mAP50"
        ),
    )
}

fn mse(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Blur with edge replication, written independently of the library.
fn blur(img: &Image, psf: &Psf) -> Image {
    let (w, h, k) = (img.width() as isize, img.height() as isize, psf.size() as isize);
    let r = k / 2;
    Image::from_fn(img.width(), img.height(), img.channels(), |c, y, x| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let sy = (y as isize + r - ky).clamp(0, h - 1) as usize;
                let sx = (x as isize + r - kx).clamp(0, w - 1) as usize;
                acc += psf.data()[(ky * k + kx) as usize] * img.get(c, sy, sx);
            }
        }
        acc
    })
    .unwrap()
}

fn restoration_fixed_points() -> Outcome {
    let mut r = rng(7);
    let values: Vec<f64> = (0..48 * 40 * 3).map(|_| r.random_range(0.05..0.95)).collect();
    let noisy = Image::new(48, 40, 3, values).unwrap();
    let rl = richardson_lucy(&noisy, &Psf::delta(5).unwrap(), 10).unwrap();
    let drift = noisy.data().iter().zip(rl.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let flat = Image::filled(32, 32, 3, 0.37).unwrap();
    let still = |out: &Image| out.data().iter().map(|v| (v - 0.37).abs()).fold(0.0, f64::max);
    let unsharp = still(&unsharp_mask(&flat, 1.0, 1.5, 0.0).unwrap());
    let median = still(&adaptive_median(&flat, 3, 0.0).unwrap());

    // bars and a checkerboard patch
    let pattern = Image::from_fn(64, 64, 1, |_, y, x| {
        if (16..48).contains(&x) && (16..48).contains(&y) {
            if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 }
        } else if (x / 6) % 2 == 0 {
            0.8
        } else {
            0.2
        }
    })
    .unwrap();
    let psf = Psf::gaussian(5, 1.0).unwrap();
    let blurred = blur(&pattern, &psf);
    let restored = richardson_lucy(&blurred, &psf, 10).unwrap();
    let (before, after) = (mse(&blurred, &pattern), mse(&restored, &pattern));

    let pass = drift <= 1e-6 && unsharp == 0.0 && median == 0.0 && after < before;
    outcome(
        pass,
        format!(
            "RL delta drift {drift:.1e} (<= 1e-6), unsharp {unsharp:.1e}, median {median:.1e} on constant, self-blur MSE {before:.5} -> {after:.5}"
        ),
    )
}

/// 1,000 pairs of empty image files with random YOLO labels.
fn synthetic_corpus(root: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut r = rng(8);
    let (rgb, ir) = (root.join("rgb"), root.join("ir"));
    for d in [&rgb, &ir] {
        std::fs::create_dir_all(d.join("images")).unwrap();
        std::fs::create_dir_all(d.join("labels")).unwrap();
    }
    for i in 0..n {
        let objects = r.random_range(0..=3);
        let text: String = (0..objects)
            .map(|_| {
                let s = r.random_range(0.01f64..0.3).sqrt();
                format!("{} 0.5 0.5 {s:.5} {:.5}\n", r.random_range(0..2), s * r.random_range(0.6..1.0))
            })
            .collect();
        let name = format!("s{i:04}");
        for d in [&rgb, &ir] {
            std::fs::write(d.join("images").join(format!("{name}.jpg")), b"").unwrap();
            std::fs::write(d.join("labels").join(format!("{name}.txt")), &text).unwrap();
        }
    }
    (rgb, ir)
}

fn ids(v: &[egd_core::dataset::ImagePair]) -> BTreeSet<usize> {
    v.iter().map(|p| p.pair_index).collect()
}

fn split_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let n = 1000;
    let (rgb, ir) = synthetic_corpus(dir.path(), n);
    let corpus = Corpus::load(pair_modalities(&rgb, &ir).unwrap()).unwrap();
    let t = compute_size_thresholds(&corpus.all_records()).unwrap();
    let m: SplitManifest = stratified_split(&corpus, &t, 0.9, 11).unwrap();

    let ratio_ok = m.strata.iter().all(|s| (s.train as f64 - 0.9 * s.total() as f64).abs() <= 1.0);
    let worst = m
        .strata
        .iter()
        .map(|s| (s.train as f64 - 0.9 * s.total() as f64).abs())
        .fold(0.0, f64::max);
    let (tr, va) = (ids(&m.train), ids(&m.val));
    let partition = tr.is_disjoint(&va) && tr.len() + va.len() == n && m.train.len() + m.val.len() == n;
    let again = stratified_split(&corpus, &t, 0.9, 11).unwrap();
    let other = stratified_split(&corpus, &t, 0.9, 12).unwrap();
    let deterministic = again == m && other.strata == m.strata;

    let out = dir.path().join("manifest");
    emit_manifests(&m, &out).unwrap();
    let clean = verify_integrity(&out);
    let intact = clean.is_clean() && clean.pairs_ok == n && clean.files_present == clean.files_checked;

    // corrupt: drop three IR images, break two RGB label files, drop one IR label
    let mut expected: Vec<String> = Vec::new();
    for (split, list, idx) in [("val", &m.val, 0), ("val", &m.val, 5), ("train", &m.train, 100)] {
        let p = &list[idx];
        std::fs::remove_file(&p.ir_path).unwrap();
        expected.push(format!("missing {}", p.ir_path.display()));
        expected.push(format!("pairing {split}[{idx}]"));
    }
    for p in [&m.train[3], &m.val[2]] {
        std::fs::write(&p.rgb_label_path, "0 0.5 0.5 0.1 0.1\n9 0.5 0.5 0.1 0.1\n").unwrap();
        expected.push(format!("label {}:2", p.rgb_label_path.display()));
    }
    std::fs::remove_file(&m.train[7].ir_label_path).unwrap();
    expected.push(format!("missing {}", m.train[7].ir_label_path.display()));
    let broken = verify_integrity(&out);
    let mut got: Vec<String> = broken
        .failures
        .iter()
        .map(|f| match f {
            IntegrityFailure::Missing { path } => format!("missing {}", path.display()),
            IntegrityFailure::Pairing { split, index, .. } => format!("pairing {split}[{index}]"),
            IntegrityFailure::Label { path, line, .. } => format!("label {}:{line}", path.display()),
            IntegrityFailure::List { path, .. } => format!("list {}", path.display()),
        })
        .collect();
    got.sort();
    expected.sort();
    let enumerated = got == expected && broken.pairs_ok == n - 3;

    outcome(
        ratio_ok && partition && deterministic && intact && enumerated,
        format!(
            "{} strata, worst |train - 0.9n| {worst:.2} (<= 1), partition {partition}, deterministic {deterministic}, intact {}, corrupted: {} failures reported, {} expected, exact {enumerated}",
            m.strata.len(),
            clean.summary().trim(),
            got.len(),
            expected.len()
        ),
    )
}

fn run_ok(args: &[&str]) {
    let o = egd(args);
    assert_eq!(code(&o), 0, "egd {args:?}\n{}", stderr(&o));
}

/// prepare -> restore -> forward -> evaluate; returns the output hashes.
fn pipeline(c: &common::Corpus, out: &Path) -> Vec<(String, String)> {
    let (m, r, f, e) = (out.join("manifest"), out.join("restored"), out.join("forward"), out.join("eval"));
    run_ok(&["prepare", "--rgb", s(&c.rgb), "--ir", s(&c.ir), "--output", s(&m), "--seed", "4"]);
    run_ok(&["restore", "--input", s(&c.rgb), "--output", s(&r)]);
    run_ok(&["forward", "--input-dir", s(&r), "--imgsz", "64", "--seed", "1", "--conf", "0.01", "--output", s(&f)]);
    let preds = f.join("predictions.txt");
    run_ok(&["evaluate", "--predictions", s(&preds), "--manifest", s(&m), "--split", "all", "--output", s(&e)]);
    let mut hashes = Vec::new();
    for name in egd_core::dataset::LIST_FILES {
        hashes.push((name.to_string(), sha256_file(&m.join(name))));
    }
    hashes.push(("restored images".into(), sha256_dir(&r.join("images"))));
    hashes.push(("restored labels".into(), sha256_dir(&r.join("labels"))));
    hashes.push(("predictions.txt".into(), sha256_file(&preds)));
    hashes.push(("eval_report.csv".into(), sha256_file(&e.join("eval_report.csv"))));
    hashes
}

fn end_to_end() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let c = make_corpus(&d.path().join("corpus"), 20, 64, 9);
    let t = Instant::now();
    let a = pipeline(&c, &d.path().join("run_a"));
    let b = pipeline(&c, &d.path().join("run_b"));
    let secs = t.elapsed().as_secs_f64();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        differing.is_empty() && secs < 300.0,
        format!(
            "20 pairs, two runs in {secs:.1}s (< 300s), {} output hashes compared{}",
            a.len(),
            if differing.is_empty() { ", all identical".to_string() } else { format!(", differ: {differing:?}") }
        ),
    )
}

fn bench_stability() -> Outcome {
    let g = build_model(&VariantConfig::egd(Modality::Fusion), 0).unwrap();
    let s = benchmark_runs(&g, [1, 4, 64, 64], 3, 20, 3).unwrap();
    let means: Vec<String> = s.runs.iter().map(|r| format!("{:.2}ms", 1e3 * r.mean_latency_s)).collect();
    outcome(
        s.cv_of_means < 0.20,
        format!("fusion 64x64, run means [{}], CV {:.2}% (< 20%)", means.join(", "), 100.0 * s.cv_of_means),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("deformable conv reduces to conv2d", deform_reduction),
        ("ghost conv efficiency", ghost_efficiency),
        ("C3Ghost compression", c3ghost_compression),
        ("model accounting", model_accounting),
        ("metric oracle", metric_oracle),
        ("restoration fixed points", restoration_fixed_points),
        ("split contract", split_contract),
        ("end-to-end smoke", end_to_end),
        ("bench harness", bench_stability),
    ];
    // keep panic messages inside the FAIL line
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
