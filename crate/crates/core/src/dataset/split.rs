use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::labels::{LabelRecord, CLASS_NAMES, DRONE};
use super::pairing::{Corpus, ImagePair};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeCategory {
    VerySmall,
    Small,
    Medium,
    Large,
    VeryLarge,
}

impl SizeCategory {
    pub const ALL: [SizeCategory; 5] = [
        SizeCategory::VerySmall,
        SizeCategory::Small,
        SizeCategory::Medium,
        SizeCategory::Large,
        SizeCategory::VeryLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SizeCategory::VerySmall => "very_small",
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
            SizeCategory::VeryLarge => "very_large",
        }
    }
}

impl fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const PERCENTILES: [f64; 4] = [5.0, 20.0, 40.0, 60.0];

/// Area boundaries at the 5/20/40/60th percentiles plus the observed range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeThresholds {
    pub bounds: [f64; 4],
    pub min_area: f64,
    pub max_area: f64,
}

impl SizeThresholds {
    /// An area equal to a boundary belongs to the lower category.
    pub fn categorize(&self, area: f64) -> SizeCategory {
        self.bounds
            .iter()
            .position(|&b| area <= b)
            .map_or(SizeCategory::VeryLarge, |i| SizeCategory::ALL[i])
    }
}

/// Percentile by linear interpolation between order statistics of sorted
/// data: rank `p / 100 * (n - 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * f
}

pub fn compute_size_thresholds(records: &[LabelRecord]) -> Result<SizeThresholds> {
    if records.is_empty() {
        return Err(Error::Pipeline("cannot compute size thresholds of an empty corpus".into()));
    }
    let mut areas: Vec<f64> = records.iter().map(LabelRecord::area).collect();
    areas.sort_by(f64::total_cmp);
    Ok(SizeThresholds {
        bounds: PERCENTILES.map(|p| percentile(&areas, p)),
        min_area: areas[0],
        max_area: areas[areas.len() - 1],
    })
}

/// Split stratum of a pair: dominant class and size of its largest object,
/// or `Empty` for pairs without objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Empty,
    Objects { class_id: u8, size: SizeCategory },
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Empty => f.write_str("empty"),
            Stratum::Objects { class_id, size } => write!(f, "{}/{}", CLASS_NAMES[*class_id as usize], size),
        }
    }
}

/// Majority class (ties go to drone) and the category of the largest box.
pub fn stratum_of<'a>(records: impl IntoIterator<Item = &'a LabelRecord>, t: &SizeThresholds) -> Stratum {
    let mut counts = [0usize; 2];
    let mut largest: Option<f64> = None;
    for r in records {
        counts[r.class_id as usize] += 1;
        largest = Some(largest.map_or(r.area(), |a: f64| a.max(r.area())));
    }
    match largest {
        None => Stratum::Empty,
        Some(a) => Stratum::Objects {
            class_id: if counts[DRONE as usize] >= counts[0] { DRONE } else { 0 },
            size: t.categorize(a),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StratumCount {
    pub stratum: Stratum,
    pub train: usize,
    pub val: usize,
}

impl StratumCount {
    pub fn total(&self) -> usize {
        self.train + self.val
    }
}

/// Train/val partition of the pairs, both lists ordered by pair index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub strata: Vec<StratumCount>,
}

/// Within each stratum, shuffle with `seed` and send the first
/// `ceil(ratio * n)` pairs to train.
pub fn stratified_split(corpus: &Corpus, thresholds: &SizeThresholds, ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut groups: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for i in 0..corpus.pairs.len() {
        groups.entry(stratum_of(corpus.pair_records(i), thresholds)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut strata) = (Vec::new(), Vec::new(), Vec::new());
    for (stratum, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n_train = train_count(idx.len(), ratio);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
        strata.push(StratumCount {
            stratum,
            train: n_train,
            val: idx.len() - n_train,
        });
    }
    train.sort_unstable();
    val.sort_unstable();
    let pick = |v: Vec<usize>| v.into_iter().map(|i| corpus.pairs[i].clone()).collect();
    Ok(SplitManifest {
        train: pick(train),
        val: pick(val),
        strata,
    })
}

/// `ceil(ratio * n)`, guarded against representation error.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let v = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (v as usize).min(n)
}
