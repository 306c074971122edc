use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size network (64 channels, 23 RRDBs, 7 input frames).
    Paper,
    /// Small network trainable on a CPU in minutes.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::invalid("preset", format!("unknown preset `{s}` (expected paper|desk)"))),
        }
    }
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

/// Reconstruction trunk variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrunkKind {
    Rrdb,
    /// Plain residual blocks in place of RRDBs (ablation).
    Residual,
}

impl TrunkKind {
    fn as_str(self) -> &'static str {
        match self {
            TrunkKind::Rrdb => "rrdb",
            TrunkKind::Residual => "residual",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Feature width used throughout.
    pub channels: usize,
    /// Residual blocks in the feature extractor.
    pub n_res: usize,
    /// Deformable stages in the alignment cascade.
    pub n_dconv: usize,
    /// Blocks in the reconstruction trunk.
    pub n_rrdb: usize,
    /// Dense-layer growth width inside RRDBs.
    pub growth: usize,
    /// Temporal radius `N`; the network reads `2N+1` frames.
    pub radius: usize,
    pub scale: usize,
    /// Filters per dilated branch of the fusion block.
    pub hffb_channels: usize,
    /// Embedding width of the non-local block.
    pub embed_channels: usize,
    pub use_hffb: bool,
    pub use_align: bool,
    pub use_nonlocal: bool,
    pub trunk: TrunkKind,
    /// Residual scaling inside and around each RRDB.
    pub beta: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            channels: 64,
            n_res: 5,
            n_dconv: 5,
            n_rrdb: 23,
            growth: 32,
            radius: 3,
            scale: 4,
            hffb_channels: 32,
            embed_channels: 32,
            use_hffb: true,
            use_align: true,
            use_nonlocal: true,
            trunk: TrunkKind::Rrdb,
            beta: 0.2,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            channels: 8,
            n_res: 1,
            n_dconv: 2,
            n_rrdb: 2,
            growth: 8,
            radius: 1,
            scale: 4,
            hffb_channels: 4,
            embed_channels: 4,
            ..Self::paper()
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn frames(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of ×2 upsampling stages.
    pub fn up_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("ModelConfig", d));
        if self.channels == 0 || self.growth == 0 || self.hffb_channels == 0 || self.embed_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return bad(format!("scale {} must be a power of two >= 2", self.scale));
        }
        if self.use_align && self.n_dconv == 0 {
            return bad("alignment enabled with zero deformable stages".into());
        }
        if !(self.beta.is_finite()) {
            return bad("beta must be finite".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("preset", self.preset.as_str().into());
        kv("channels", self.channels.to_string());
        kv("n_res", self.n_res.to_string());
        kv("n_dconv", self.n_dconv.to_string());
        kv("n_rrdb", self.n_rrdb.to_string());
        kv("growth", self.growth.to_string());
        kv("radius", self.radius.to_string());
        kv("scale", self.scale.to_string());
        kv("hffb_channels", self.hffb_channels.to_string());
        kv("embed_channels", self.embed_channels.to_string());
        kv("hffb", self.use_hffb.to_string());
        kv("align", self.use_align.to_string());
        kv("nonlocal", self.use_nonlocal.to_string());
        kv("trunk", self.trunk.as_str().into());
        kv("beta", format!("{:?}", self.beta));
        s
    }

    /// Parses `key=value` lines. A `preset` key (default `desk`) supplies
    /// every field not given explicitly; blank lines and `#` comments are
    /// skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::from_preset(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid("ModelConfig", format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "preset" => self.preset = value.parse()?,
            "channels" => self.channels = num(key, value)?,
            "n_res" => self.n_res = num(key, value)?,
            "n_dconv" => self.n_dconv = num(key, value)?,
            "n_rrdb" => self.n_rrdb = num(key, value)?,
            "growth" => self.growth = num(key, value)?,
            "radius" => self.radius = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "hffb_channels" => self.hffb_channels = num(key, value)?,
            "embed_channels" => self.embed_channels = num(key, value)?,
            "hffb" => self.use_hffb = num(key, value)?,
            "align" => self.use_align = num(key, value)?,
            "nonlocal" => self.use_nonlocal = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "trunk" => {
                self.trunk = match value {
                    "rrdb" => TrunkKind::Rrdb,
                    "residual" => TrunkKind::Residual,
                    _ => return Err(Error::invalid("ModelConfig", format!("unknown trunk `{value}`"))),
                }
            }
            _ => return Err(Error::invalid("ModelConfig", format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::invalid("config", format!("expected key=value, got `{l}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_documented_sizes() {
        let p = ModelConfig::paper();
        assert_eq!((p.channels, p.n_res, p.n_dconv, p.n_rrdb, p.growth, p.radius, p.scale), (64, 5, 5, 23, 32, 3, 4));
        let d = ModelConfig::desk();
        assert_eq!((d.channels, d.n_res, d.n_dconv, d.n_rrdb, d.growth, d.radius, d.scale), (8, 1, 2, 2, 8, 1, 4));
        assert_eq!(p.frames(), 7);
        assert_eq!(d.up_stages(), 2);
    }

    #[test]
    fn kv_roundtrip_and_overrides() {
        let mut c = ModelConfig::desk();
        c.use_hffb = false;
        c.n_dconv = 4;
        c.beta = 0.15;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let c2 = ModelConfig::from_kv("# comment\npreset = paper\nn_rrdb=14\n\n").unwrap();
        assert_eq!(c2.n_rrdb, 14);
        assert_eq!(c2.channels, 64);
        assert!(ModelConfig::from_kv("bogus=1").is_err());
        assert!(ModelConfig::from_kv("scale=3").is_err());
        assert!(ModelConfig::from_kv("channels").is_err());
    }
}
