use std::fmt;
use std::str::FromStr;

use crate::blocks::{HeadKind, DEFAULT_EMA_FACTOR};
use crate::{Error, Result};

/// Input modality of a detection pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Ir,
    Fusion,
}

impl Modality {
    pub fn in_channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir => 1,
            Modality::Fusion => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "fusion" => Ok(Modality::Fusion),
            _ => Err(Error::Config(format!("unknown modality '{s}' (rgb, ir, fusion)"))),
        }
    }
}

/// Where attention sits relative to each C3Ghost unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaPlacement {
    AfterC3Ghost,
    BeforeC3Ghost,
}

/// EGD network or the unmodified YOLOv8 baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Egd,
    Baseline,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Egd => "egd",
            Architecture::Baseline => "baseline",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "egd" => Ok(Architecture::Egd),
            "baseline" | "yolov8n" => Ok(Architecture::Baseline),
            _ => Err(Error::Config(format!("unknown architecture '{s}' (egd, baseline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub architecture: Architecture,
    pub modality: Modality,
    pub in_channels: usize,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub num_classes: usize,
    pub reg_max: usize,
    pub head: HeadKind,
    pub ema_placement: EmaPlacement,
    pub ema_factor: usize,
}

/// Unscaled widths of the five backbone levels and the largest allowed width.
const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const MAX_CHANNELS: usize = 1024;
const BASE_BACKBONE_REPEATS: [usize; 4] = [3, 6, 6, 3];
const BASE_NECK_REPEATS: usize = 3;

impl VariantConfig {
    /// Nano EGD network with the deformable head.
    pub fn egd(modality: Modality) -> Self {
        Self {
            architecture: Architecture::Egd,
            modality,
            in_channels: modality.in_channels(),
            width_multiple: 0.25,
            depth_multiple: 0.33,
            num_classes: 2,
            reg_max: 16,
            head: HeadKind::DDetect,
            ema_placement: EmaPlacement::AfterC3Ghost,
            ema_factor: DEFAULT_EMA_FACTOR,
        }
    }

    /// Unmodified nano YOLOv8.
    pub fn baseline(modality: Modality) -> Self {
        Self {
            architecture: Architecture::Baseline,
            head: HeadKind::Standard,
            ..Self::egd(modality)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != self.modality.in_channels() {
            return Err(Error::Config(format!(
                "{} modality needs {} input channels, got {}",
                self.modality,
                self.modality.in_channels(),
                self.in_channels
            )));
        }
        if !(self.width_multiple > 0.0 && self.width_multiple <= 1.0)
            || !(self.depth_multiple > 0.0 && self.depth_multiple <= 1.0)
        {
            return Err(Error::Config(format!(
                "width/depth multiples must lie in (0, 1], got {} / {}",
                self.width_multiple, self.depth_multiple
            )));
        }
        if self.num_classes == 0 || self.reg_max == 0 {
            return Err(Error::Config("num_classes and reg_max must be positive".into()));
        }
        if self.architecture == Architecture::Baseline && self.head != HeadKind::Standard {
            return Err(Error::Config("the baseline network uses the standard head".into()));
        }
        if self.architecture == Architecture::Egd {
            for w in self.widths() {
                if self.ema_factor == 0 || w % self.ema_factor != 0 {
                    return Err(Error::Config(format!(
                        "EMA factor {} does not divide stage width {w}",
                        self.ema_factor
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scaled channel widths, rounded up to a multiple of 8.
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|c| make_divisible(c.min(MAX_CHANNELS) as f64 * self.width_multiple, 8))
    }

    /// Scaled repeats of the four backbone CSP stages.
    pub fn backbone_repeats(&self) -> [usize; 4] {
        BASE_BACKBONE_REPEATS.map(|n| self.scale_depth(n))
    }

    pub fn neck_repeats(&self) -> usize {
        self.scale_depth(BASE_NECK_REPEATS)
    }

    fn scale_depth(&self, n: usize) -> usize {
        ((n as f64 * self.depth_multiple).round() as usize).max(1)
    }
}

fn make_divisible(x: f64, divisor: usize) -> usize {
    ((x / divisor as f64).ceil() as usize * divisor).max(divisor)
}
