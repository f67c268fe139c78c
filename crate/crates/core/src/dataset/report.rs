use std::fmt::Write as _;

use super::labels::{LabelRecord, BIRD, CLASS_NAMES, DRONE};
use super::pairing::Corpus;
use super::split::{SizeCategory, SizeThresholds, SplitManifest, StratumCount};

/// Class and size histograms of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityCounts {
    pub modality: String,
    pub class_counts: [usize; 2],
    /// Indexed by [`SizeCategory::ALL`], per class.
    pub size_counts: [[usize; 5]; 2],
}

impl ModalityCounts {
    pub fn from_records<'a>(modality: &str, records: impl IntoIterator<Item = &'a LabelRecord>, t: &SizeThresholds) -> Self {
        let mut m = ModalityCounts {
            modality: modality.to_string(),
            class_counts: [0; 2],
            size_counts: [[0; 5]; 2],
        };
        for r in records {
            let c = r.class_id as usize;
            m.class_counts[c] += 1;
            m.size_counts[c][t.categorize(r.area()) as usize] += 1;
        }
        m
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// Birds per drone, the `x` in `drone:bird = 1:x`.
    pub fn bird_per_drone(&self) -> Option<f64> {
        let d = self.class_counts[DRONE as usize];
        (d > 0).then(|| self.class_counts[BIRD as usize] as f64 / d as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub thresholds: SizeThresholds,
    pub modalities: Vec<ModalityCounts>,
    pub strata: Vec<StratumCount>,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

pub fn distribution_report(corpus: &Corpus, manifest: &SplitManifest, thresholds: &SizeThresholds) -> DistributionReport {
    let rgb = ModalityCounts::from_records("rgb", corpus.rgb_labels.iter().flatten(), thresholds);
    let ir = ModalityCounts::from_records("ir", corpus.ir_labels.iter().flatten(), thresholds);
    let all = ModalityCounts::from_records("all", corpus.rgb_labels.iter().chain(&corpus.ir_labels).flatten(), thresholds);
    DistributionReport {
        thresholds: *thresholds,
        modalities: vec![rgb, ir, all],
        strata: manifest.strata.clone(),
        train_pairs: manifest.train.len(),
        val_pairs: manifest.val.len(),
    }
}

fn ratio_text(m: &ModalityCounts) -> String {
    m.bird_per_drone().map_or("n/a".into(), |r| format!("1:{r:.2}"))
}

impl DistributionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.thresholds;
        let _ = writeln!(s, "area range: min {:.6} max {:.6}", t.min_area, t.max_area);
        let _ = writeln!(
            s,
            "size bounds (p5/p20/p40/p60): {:.6} {:.6} {:.6} {:.6}",
            t.bounds[0], t.bounds[1], t.bounds[2], t.bounds[3]
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>12}", "modality", "bird", "drone", "total", "drone:bird");
        for m in &self.modalities {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>8} {:>8} {:>12}",
                m.modality,
                m.class_counts[0],
                m.class_counts[1],
                m.total(),
                ratio_text(m)
            );
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<8} {:<6}", "modality", "class");
        for c in SizeCategory::ALL {
            let _ = write!(s, " {:>10}", c.name());
        }
        let _ = writeln!(s);
        for m in &self.modalities {
            for (c, name) in CLASS_NAMES.iter().enumerate() {
                let _ = write!(s, "{:<8} {:<6}", m.modality, name);
                for v in m.size_counts[c] {
                    let _ = write!(s, " {v:>10}");
                }
                let _ = writeln!(s);
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "split: {} train / {} val pairs", self.train_pairs, self.val_pairs);
        let _ = writeln!(s, "{:<20} {:>7} {:>7} {:>7}", "stratum", "train", "val", "total");
        for st in &self.strata {
            let _ = writeln!(s, "{:<20} {:>7} {:>7} {:>7}", st.stratum.to_string(), st.train, st.val, st.total());
        }
        s
    }

    /// `section,key1,key2,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,key1,key2,value\n");
        for (i, b) in self.thresholds.bounds.iter().enumerate() {
            let _ = writeln!(s, "threshold,p{},,{b}", super::split::PERCENTILES[i]);
        }
        let _ = writeln!(s, "threshold,min,,{}", self.thresholds.min_area);
        let _ = writeln!(s, "threshold,max,,{}", self.thresholds.max_area);
        for m in &self.modalities {
            for (c, name) in CLASS_NAMES.iter().enumerate() {
                let _ = writeln!(s, "class,{},{name},{}", m.modality, m.class_counts[c]);
                for (k, cat) in SizeCategory::ALL.iter().enumerate() {
                    let _ = writeln!(s, "size,{}/{name},{cat},{}", m.modality, m.size_counts[c][k]);
                }
            }
        }
        for st in &self.strata {
            let _ = writeln!(s, "stratum,{},train,{}", st.stratum, st.train);
            let _ = writeln!(s, "stratum,{},val,{}", st.stratum, st.val);
        }
        s
    }
}
