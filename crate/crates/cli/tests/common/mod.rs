#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn egd(args: &[&str]) -> Output {
    egd_env(args, &[])
}

pub fn egd_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_egd"));
    c.args(args).env_remove("EGD_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("spawn egd")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn sha256_file(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))))
}

/// Hash of every regular file directly in `dir` (name and content), in
/// name order.
pub fn sha256_dir(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&p).unwrap());
    }
    hex::encode(h.finalize())
}

/// One synthetic object: class and normalised box.
#[derive(Clone, Copy, Debug)]
pub struct Obj {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

fn draw(img: &mut image::RgbImage, o: &Obj, color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = ((o.cx - o.w / 2.0) * w).max(0.0) as u32;
    let x1 = (((o.cx + o.w / 2.0) * w).ceil() as u32).min(img.width());
    let y0 = ((o.cy - o.h / 2.0) * h).max(0.0) as u32;
    let y1 = (((o.cy + o.h / 2.0) * h).ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, image::Rgb(color));
        }
    }
}

fn label_text(objs: &[Obj]) -> String {
    objs.iter()
        .map(|o| format!("{} {:.6} {:.6} {:.6} {:.6}\n", o.class, o.cx, o.cy, o.w, o.h))
        .collect()
}

pub struct Corpus {
    pub rgb: PathBuf,
    pub ir: PathBuf,
    pub objects: Vec<Vec<Obj>>,
}

/// `n` RGB/IR pairs of `size`-pixel noisy PNGs with one or two boxes each,
/// laid out as `<root>/{rgb,ir}/{images,labels}`.
pub fn make_corpus(root: &Path, n: usize, size: u32, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rgb, ir) = (root.join("rgb"), root.join("ir"));
    for d in [&rgb, &ir] {
        std::fs::create_dir_all(d.join("images")).unwrap();
        std::fs::create_dir_all(d.join("labels")).unwrap();
    }
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(1..=2);
        let objs: Vec<Obj> = (0..k)
            .map(|_| {
                let w = rng.random_range(0.05..0.4);
                let h = rng.random_range(0.05..0.4);
                Obj {
                    class: rng.random_range(0..2),
                    cx: rng.random_range(w / 2.0..1.0 - w / 2.0),
                    cy: rng.random_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                }
            })
            .collect();
        let mut img = image::RgbImage::from_fn(size, size, |_, _| {
            image::Rgb([rng.random_range(0..90), rng.random_range(0..90), rng.random_range(0..90)])
        });
        for o in &objs {
            let c = if o.class == 1 { [230, 40, 40] } else { [40, 200, 230] };
            draw(&mut img, o, c);
        }
        let name = format!("pair_{i:04}");
        img.save(rgb.join("images").join(format!("{name}.png"))).unwrap();
        let grey = image::DynamicImage::ImageRgb8(img).to_luma8();
        grey.save(ir.join("images").join(format!("{name}.png"))).unwrap();
        std::fs::write(rgb.join("labels").join(format!("{name}.txt")), label_text(&objs)).unwrap();
        std::fs::write(ir.join("labels").join(format!("{name}.txt")), label_text(&objs)).unwrap();
        objects.push(objs);
    }
    Corpus { rgb, ir, objects }
}

/// Read a `key value` style number from a line starting with `prefix`.
pub fn number_after(text: &str, prefix: &str) -> f64 {
    text.lines()
        .find_map(|l| l.trim_start().strip_prefix(prefix))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap_or_else(|| panic!("no '{prefix}' in:\n{text}"))
}

#[derive(Clone, Copy)]
pub struct B {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

pub fn corners(cx: f64, cy: f64, w: f64, h: f64) -> B {
    B {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
    }
}

pub fn overlap(a: B, b: B) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let i = iw * ih;
    i / ((a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - i)
}

/// AP from scratch: every prefix of the confidence ranking is re-matched
/// greedily, giving one (precision, recall) point per prefix; precision is
/// then made monotone and read at 101 recall levels.
pub fn oracle_ap(preds: &[(usize, f64, B)], gts: &[(usize, B)], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    let mut points = Vec::new();
    for k in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &p in &order[..k] {
            let (img, _, pb) = preds[p];
            let best = (0..gts.len())
                .filter(|&g| !used[g] && gts[g].0 == img)
                .map(|g| (g, overlap(pb, gts[g].1)))
                .filter(|&(_, v)| v >= thr)
                .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / k as f64, tp as f64 / gts.len() as f64));
    }
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            points.iter().filter(|p| p.1 >= r - 1e-12).map(|p| p.0).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}
