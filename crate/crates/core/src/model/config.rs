//! Model configuration and presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, ScanStrategy, SremPosition};
use crate::error::{DigError, Result};
use crate::gla::{GlaConfig, DEFAULT_TAU};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Plain,
    Ushape,
}

/// Stage layout of the U-shaped variant: `widths[i]` at resolution level
/// `i`, `depths` lists encoder levels `0..L` followed by decoder levels
/// `0..L-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UShape {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    #[serde(default = "yes")]
    pub shortcuts: bool,
}

/// Softmax-attention transformer the FLOP ratio is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDit {
    pub layers: usize,
    pub hidden: usize,
    pub patch: usize,
}

fn yes() -> bool {
    true
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_freq_dim() -> usize {
    256
}
fn default_dk_div() -> usize {
    8
}
fn default_dv_div() -> usize {
    4
}
fn default_chunk() -> usize {
    64
}
fn default_steps() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub variant: Variant,
    /// Total block count `N`.
    pub layers: usize,
    /// Width `D` (first-stage width for the U-shaped variant).
    pub hidden: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Heads per block; defaults to `D/64`, reduced until it divides the
    /// GLA widths.
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default = "default_dk_div")]
    pub dk_divisor: usize,
    #[serde(default = "default_dv_div")]
    pub dv_divisor: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    /// Diffusion steps the timestep embedder accepts.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Chunk length used by the FLOP estimate.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default)]
    pub srem: SremPosition,
    #[serde(default)]
    pub strategy: ScanStrategy,
    #[serde(default = "yes")]
    pub dwconv: bool,
    #[serde(default = "yes")]
    pub reorient: bool,
    #[serde(default)]
    pub ushape: Option<UShape>,
    #[serde(default)]
    pub reference_dit: Option<ReferenceDit>,
}

impl ModelConfig {
    fn base(name: &str, layers: usize, hidden: usize, patch: usize) -> Self {
        Self {
            name: name.to_string(),
            variant: Variant::Plain,
            layers,
            hidden,
            patch,
            image: 32,
            channels: 4,
            num_classes: 1000,
            heads: None,
            dk_divisor: default_dk_div(),
            dv_divisor: default_dv_div(),
            tau: DEFAULT_TAU,
            freq_dim: default_freq_dim(),
            steps: default_steps(),
            chunk: default_chunk(),
            srem: SremPosition::default(),
            strategy: ScanStrategy::default(),
            dwconv: true,
            reorient: true,
            ushape: None,
            reference_dit: Some(ReferenceDit {
                layers,
                hidden,
                patch,
            }),
        }
    }

    fn ushape(name: &str, widths: [usize; 3], per_stage: usize, reference: (usize, usize)) -> Self {
        let mut cfg = Self::base(name, 5 * per_stage, widths[0], 1);
        cfg.variant = Variant::Ushape;
        cfg.ushape = Some(UShape {
            widths: widths.to_vec(),
            depths: vec![per_stage; 5],
            shortcuts: true,
        });
        cfg.reference_dit = Some(ReferenceDit {
            layers: reference.0,
            hidden: reference.1,
            patch: 2,
        });
        cfg
    }

    fn toy(name: &str, layers: usize, hidden: usize, image: usize, patch: usize) -> Self {
        let mut cfg = Self::base(name, layers, hidden, patch);
        cfg.image = image;
        cfg.channels = 1;
        cfg.num_classes = 2;
        cfg.freq_dim = 64;
        cfg.steps = 100;
        cfg.chunk = 16;
        cfg
    }

    pub const PRESETS: [&'static str; 13] = [
        "dig-s", "dig-b", "dig-l", "dig-xl", "udig-s", "udig-b", "udig-l", "udig-xl", "toy-s",
        "toy-m", "toy-l", "toy-udig", "xl-toy",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "dig-s" => Self::base(name, 12, 384, 2),
            "dig-b" => Self::base(name, 12, 768, 2),
            "dig-l" => Self::base(name, 24, 1024, 2),
            "dig-xl" => Self::base(name, 28, 1152, 2),
            "udig-s" => Self::ushape(name, [128, 320, 512], 4, (12, 384)),
            "udig-b" => Self::ushape(name, [256, 608, 992], 4, (12, 768)),
            "udig-l" => Self::ushape(name, [320, 896, 1088], 8, (24, 1024)),
            "udig-xl" => Self::ushape(name, [416, 960, 1760], 8, (28, 1152)),
            "toy-s" => Self::toy(name, 2, 16, 8, 2),
            "toy-m" => Self::toy(name, 4, 32, 8, 2),
            "toy-l" => Self::toy(name, 4, 32, 16, 2),
            "toy-udig" => {
                let mut cfg = Self::toy(name, 5, 8, 8, 1);
                cfg.variant = Variant::Ushape;
                cfg.ushape = Some(UShape {
                    widths: vec![8, 16, 16],
                    depths: vec![1; 5],
                    shortcuts: true,
                });
                cfg
            }
            "xl-toy" => {
                let mut cfg = Self::toy(name, 4, 64, 16, 1);
                cfg.channels = 4;
                cfg
            }
            other => {
                return Err(DigError::Unknown {
                    what: "preset",
                    name: other.to_string(),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| DigError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DigError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn tokens(&self) -> usize {
        let n = self.image / self.patch;
        n * n
    }

    pub fn levels(&self) -> usize {
        self.ushape.as_ref().map_or(1, |u| u.widths.len())
    }

    /// Width at resolution level `i`.
    pub fn width(&self, level: usize) -> usize {
        match &self.ushape {
            Some(u) => u.widths[level],
            None => self.hidden,
        }
    }

    pub fn gla_config(&self, d: usize) -> Result<GlaConfig> {
        let dk = (d / self.dk_divisor).max(1);
        let dv = (d / self.dv_divisor).max(1);
        let mut heads = self.heads.unwrap_or((d / 64).max(1));
        if self.heads.is_none() {
            while heads > 1 && (!dk.is_multiple_of(heads) || !dv.is_multiple_of(heads)) {
                heads -= 1;
            }
        }
        GlaConfig::new(d, dk, dv, heads, self.tau)
    }

    pub fn block_config(&self, d: usize) -> Result<BlockConfig> {
        let mut b = BlockConfig::new(d, self.hidden, self.gla_config(d)?)?;
        b.srem = self.srem;
        b.strategy = self.strategy;
        b.dwconv = self.dwconv;
        b.reorient = self.reorient;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DigError::Config(m));
        if self.patch == 0 || !self.image.is_multiple_of(self.patch) {
            return bad(format!("image {} not divisible by patch {}", self.image, self.patch));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden width must be even, got {}", self.hidden));
        }
        if self.channels == 0 || self.num_classes == 0 || self.freq_dim < 2 {
            return bad("channels, classes and frequency width must be positive".into());
        }
        if self.dk_divisor == 0 || self.dv_divisor == 0 || self.chunk == 0 || self.steps == 0 {
            return bad("divisors, chunk and steps must be positive".into());
        }
        match (self.variant, &self.ushape) {
            (Variant::Plain, _) => {}
            (Variant::Ushape, None) => return bad("ushape variant needs a [ushape] table".into()),
            (Variant::Ushape, Some(u)) => {
                let levels = u.widths.len();
                if levels == 0 || u.depths.len() != 2 * levels - 1 {
                    return bad(format!(
                        "{} widths need {} depths, got {}",
                        levels,
                        2 * levels.max(1) - 1,
                        u.depths.len()
                    ));
                }
                if u.widths[0] != self.hidden {
                    return bad("first stage width must equal hidden".into());
                }
                let side = self.image / self.patch;
                let factor = 1usize << (levels - 1);
                if !side.is_multiple_of(factor) {
                    return bad(format!(
                        "token grid side {side} not divisible by total downsampling {factor}"
                    ));
                }
                if u.depths.iter().sum::<usize>() != self.layers {
                    return bad(format!(
                        "stage depths sum to {}, layers = {}",
                        u.depths.iter().sum::<usize>(),
                        self.layers
                    ));
                }
            }
        }
        for level in 0..self.levels() {
            self.gla_config(self.width(level))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for name in ModelConfig::PRESETS {
            let cfg = ModelConfig::preset(name).unwrap();
            let back = ModelConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(ModelConfig::preset("dig-xxl").is_err());
    }

    #[test]
    fn paper_token_counts() {
        assert_eq!(ModelConfig::preset("dig-s").unwrap().tokens(), 256);
        assert_eq!(ModelConfig::preset("udig-s").unwrap().tokens(), 1024);
    }

    #[test]
    fn heads_shrink_to_divide_widths() {
        let cfg = ModelConfig::preset("udig-xl").unwrap();
        let g = cfg.gla_config(416).unwrap();
        assert_eq!((g.dk, g.dv, g.heads), (52, 104, 4));
        let g = cfg.gla_config(384).unwrap();
        assert_eq!((g.dk, g.dv, g.heads), (48, 96, 6));
    }

    #[test]
    fn indivisible_ushape_is_rejected() {
        let mut cfg = ModelConfig::preset("toy-udig").unwrap();
        cfg.image = 6;
        assert!(matches!(cfg.validate(), Err(DigError::Config(_))));
    }

    #[test]
    fn minimal_toml_takes_defaults() {
        let cfg = ModelConfig::from_toml_str(
            "name = \"mini\"\nlayers = 2\nhidden = 8\npatch = 2\nimage = 8\nchannels = 1\nnum_classes = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Plain);
        assert_eq!(cfg.tau, 16.0);
        assert_eq!(cfg.srem, SremPosition::AfterFfn);
        assert!(ModelConfig::from_toml_str("name = 3").is_err());
    }
}
