use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use egd_core::dataset::{parse_labels, read_manifests, ImagePair};
use egd_core::metrics::{evaluate as score, read_predictions, BBox, EvalConfig, GroundTruth, ImageGt, ImagePred};
use egd_core::model::Modality;

use crate::settings::{usage, ConfigFile};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Prediction file: `image_id class_id confidence cx cy w h` per line.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Directory holding the list files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val or all.
    #[arg(long)]
    split: Option<String>,
    /// Which labels to score against: rgb or ir (fusion uses rgb).
    #[arg(long)]
    modality: Option<String>,
    /// Confidence cut for P/R/F1.
    #[arg(long)]
    conf: Option<f64>,
    /// IoU threshold for P/R/F1.
    #[arg(long)]
    iou: Option<f64>,
    /// Also write eval_report.{txt,csv} here.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs, file: &ConfigFile) -> anyhow::Result<u8> {
    let mut r = file.section("evaluate")?;
    let pred_path = r.path("predictions", a.predictions)?;
    let manifest = r.path("manifest", a.manifest)?;
    let split = r.string("split", a.split, "val")?;
    let modality: Modality = r
        .string("modality", a.modality, "rgb")?
        .parse()
        .map_err(|e| usage(format!("--modality: {e}")))?;
    let d = EvalConfig::default();
    let conf = r.f64("conf", a.conf, d.conf_threshold)?;
    let iou = r.f64("iou", a.iou, d.match_iou)?;
    let output = r.opt_path("output", a.output)?;
    let stanza = r.finish()?;
    let cfg = EvalConfig {
        conf_threshold: conf,
        match_iou: iou,
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let m = read_manifests(&manifest)?;
    let pairs: Vec<ImagePair> = match split.as_str() {
        "train" => m.train,
        "val" => m.val,
        "all" => m.train.into_iter().chain(m.val).collect(),
        other => return Err(usage(format!("--split must be train, val or all, got '{other}'"))),
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut gts = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let (img, label) = match modality {
            Modality::Ir => (&p.ir_path, &p.ir_label_path),
            _ => (&p.rgb_path, &p.rgb_label_path),
        };
        let id = img.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if index.insert(id.clone(), i).is_some() {
            anyhow::bail!("image id '{id}' appears twice in the {split} split");
        }
        if label.is_file() {
            for rec in parse_labels(label)?.records {
                gts.push(ImageGt {
                    image: i,
                    gt: GroundTruth {
                        class_id: rec.class_id as usize,
                        bbox: BBox::new(rec.cx, rec.cy, rec.w, rec.h),
                    },
                });
            }
        }
    }

    let records = read_predictions(&pred_path)?;
    let mut unknown = 0usize;
    let preds: Vec<ImagePred> = records
        .iter()
        .filter_map(|rec| match index.get(&rec.image_id) {
            Some(&image) => Some(ImagePred { image, det: rec.det }),
            None => {
                unknown += 1;
                None
            }
        })
        .collect();
    if unknown > 0 {
        log::warn!("{unknown} predictions name images outside the {split} split; ignored");
    }

    let rep = score(&preds, &gts, 2, &cfg)?;
    let text = format!(
        "{} images ({split}, {modality} labels), {} ground-truth boxes, {} predictions\n{}",
        pairs.len(),
        gts.len(),
        preds.len(),
        rep.to_text()
    );
    print!("{text}");
    if let Some(dir) = output {
        stanza.write(&dir)?;
        std::fs::write(dir.join("eval_report.txt"), &text).context("writing eval_report.txt")?;
        std::fs::write(dir.join("eval_report.csv"), rep.to_csv()).context("writing eval_report.csv")?;
    }
    Ok(0)
}
