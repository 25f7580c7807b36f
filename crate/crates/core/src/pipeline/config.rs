//! Flat `key=value` pipeline configuration with built-in profiles.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gcp::ExtractorConfig;
use crate::heads::BevGeometry;
use crate::losses::WeightingMode;
use crate::refine::ThingClassMap;
use crate::sparse::UNetArch;
use crate::voxelizer::VoxelConfig;

/// How the bottleneck feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GcpMode {
    /// Extractor output projected back onto the bottom sites.
    #[default]
    Full,
    /// Scatter/gather round trip with an identity projection; the heads
    /// still read the extractor output.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub profile: String,
    pub voxel: VoxelConfig,
    pub vfe_channels: usize,
    pub unet: UNetArch,
    pub gcp: ExtractorConfig,
    pub gcp_mode: GcpMode,
    pub num_classes: usize,
    /// Global class id of each thing class, in thing-index order.
    pub thing_classes: Vec<usize>,
    pub stage2_hidden: usize,
    pub max_boxes: usize,
    pub score_threshold: f64,
    /// Class given to points outside the voxel range.
    pub fallback_class: usize,
    pub loss_weighting: WeightingMode,
    /// Log-variances: 3 for grouped weighting, 7 for per-loss.
    pub log_vars: Vec<f64>,
}

pub const PROFILES: [&str; 3] = ["waymo", "nuscenes", "toy"];

const KEYS: [&str; 21] = [
    "profile",
    "voxel_size",
    "point_range_min",
    "point_range_max",
    "vfe_channels",
    "encoder_depths",
    "encoder_widths",
    "decoder_widths",
    "bridge_channels",
    "kernel",
    "gcp_depths",
    "gcp_widths",
    "gcp_mode",
    "num_classes",
    "thing_classes",
    "stage2_hidden",
    "max_boxes",
    "score_threshold",
    "fallback_class",
    "loss_weighting",
    "log_vars",
];

impl PipelineConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let base = |voxel: VoxelConfig| Self {
            profile: name.to_string(),
            voxel,
            vfe_channels: 16,
            unet: UNetArch::default(),
            gcp: ExtractorConfig::default(),
            gcp_mode: GcpMode::Full,
            num_classes: 5,
            thing_classes: vec![2, 3, 4],
            stage2_hidden: 64,
            max_boxes: 500,
            score_threshold: 0.1,
            fallback_class: 0,
            loss_weighting: WeightingMode::Grouped,
            log_vars: vec![0.0; 3],
        };
        match name {
            "waymo" => Ok(base(VoxelConfig::new([-75.2, -75.2, -2.0], [75.2, 75.2, 4.0], [0.1, 0.1, 0.15])?)),
            "nuscenes" => Ok(base(VoxelConfig::new([-54.0, -54.0, -5.0], [54.0, 54.0, 3.0], [0.075, 0.075, 0.2])?)),
            "toy" => {
                let mut c = base(VoxelConfig::new([-16.0, -16.0, -2.0], [16.0, 16.0, 6.0], [1.0, 1.0, 0.5])?);
                c.unet = UNetArch {
                    in_channels: 16,
                    enc_depths: vec![2, 3, 3, 3],
                    enc_widths: vec![4, 8, 16, 32],
                    dec_widths: vec![16, 8, 4, 4],
                    bridge_channels: 32,
                    kernel: 3,
                };
                c.gcp = ExtractorConfig { level1_depth: 6, level1_width: 16, level2_depth: 6, level2_width: 32, kernel: 3 };
                c.stage2_hidden = 16;
                c.max_boxes = 50;
                Ok(c)
            }
            other => Err(Error::config(format!("unknown profile `{other}` (expected one of {PROFILES:?})"))),
        }
    }

    pub fn thing_map(&self) -> ThingClassMap {
        ThingClassMap { num_classes: self.num_classes, thing_to_global: self.thing_classes.clone() }
    }

    pub fn num_thing(&self) -> usize {
        self.thing_classes.len()
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.voxel.grid_dims()
    }

    /// Grid of the bottom encoder stage.
    pub fn bottom_grid(&self) -> [usize; 3] {
        let d = self.unet.downsample();
        self.grid_dims().map(|g| g.div_ceil(d))
    }

    /// Placement of the BEV plane the heads read.
    pub fn bev_geometry(&self) -> BevGeometry {
        let d = self.unet.downsample() as f64;
        let [w, h, _] = self.bottom_grid();
        BevGeometry {
            x_min: self.voxel.range_min[0],
            y_min: self.voxel.range_min[1],
            cell_x: self.voxel.voxel_size[0] * d,
            cell_y: self.voxel.voxel_size[1] * d,
            width: w,
            height: h,
        }
    }

    pub fn bev_in_channels(&self) -> usize {
        self.unet.bottom_channels() * self.bottom_grid()[2]
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel.validate().map_err(|e| e.in_stage("voxel_size/point_range"))?;
        self.unet.validate().map_err(|e| e.in_stage("encoder/decoder"))?;
        self.gcp.validate().map_err(|e| e.in_stage("gcp"))?;
        self.thing_map().validate().map_err(|e| e.in_stage("thing_classes"))?;
        if self.unet.in_channels != self.vfe_channels {
            return Err(Error::config("vfe_channels must equal the U-Net input width"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.thing_classes.is_empty() {
            return Err(Error::config("thing_classes must not be empty"));
        }
        if self.fallback_class >= self.num_classes {
            return Err(Error::config(format!("fallback_class {} >= num_classes", self.fallback_class)));
        }
        if self.stage2_hidden == 0 {
            return Err(Error::config("stage2_hidden must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::config("score_threshold must lie in [0, 1]"));
        }
        if self.gcp_mode == GcpMode::Identity && self.unet.bridge_channels != self.unet.bottom_channels() {
            return Err(Error::config("gcp_mode=identity needs bridge_channels equal to the last encoder width"));
        }
        let expected = match self.loss_weighting {
            WeightingMode::Grouped => 3,
            WeightingMode::PerLoss => 7,
        };
        if self.log_vars.len() != expected || self.log_vars.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("log_vars needs {expected} finite values for this loss_weighting")));
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the profile named by the `profile`
    /// key (default `waymo`). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::config(format!("unknown config key `{k}` (line {})", n + 1)));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        let profile = entries.iter().rev().find(|(k, _)| k == "profile").map_or("waymo", |(_, v)| v.as_str());
        let mut cfg = Self::profile(profile)?;
        let mut weighting_set = false;
        let mut log_vars_set = false;
        for (k, v) in &entries {
            cfg.apply(k, v).map_err(|e| e.in_stage(&format!("config key `{k}`")))?;
            weighting_set |= k == "loss_weighting";
            log_vars_set |= k == "log_vars";
        }
        if weighting_set && !log_vars_set && cfg.loss_weighting == WeightingMode::PerLoss {
            cfg.log_vars = vec![0.0; 7];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "profile" => {}
            "voxel_size" => self.voxel.voxel_size = triple(v)?,
            "point_range_min" => self.voxel.range_min = triple(v)?,
            "point_range_max" => self.voxel.range_max = triple(v)?,
            "vfe_channels" => {
                self.vfe_channels = scalar(v)?;
                self.unet.in_channels = self.vfe_channels;
            }
            "encoder_depths" => self.unet.enc_depths = list(v)?,
            "encoder_widths" => self.unet.enc_widths = list(v)?,
            "decoder_widths" => self.unet.dec_widths = list(v)?,
            "bridge_channels" => self.unet.bridge_channels = scalar(v)?,
            "kernel" => {
                self.unet.kernel = scalar(v)?;
                self.gcp.kernel = self.unet.kernel;
            }
            "gcp_depths" => {
                let d: Vec<usize> = list(v)?;
                let [a, b] = d[..] else { return Err(Error::config("expected two depths")) };
                (self.gcp.level1_depth, self.gcp.level2_depth) = (a, b);
            }
            "gcp_widths" => {
                let w: Vec<usize> = list(v)?;
                let [a, b] = w[..] else { return Err(Error::config("expected two widths")) };
                (self.gcp.level1_width, self.gcp.level2_width) = (a, b);
            }
            "gcp_mode" => {
                self.gcp_mode = match v {
                    "full" => GcpMode::Full,
                    "identity" => GcpMode::Identity,
                    _ => return Err(Error::config(format!("`{v}` is not full|identity"))),
                }
            }
            "num_classes" => self.num_classes = scalar(v)?,
            "thing_classes" => self.thing_classes = list(v)?,
            "stage2_hidden" => self.stage2_hidden = scalar(v)?,
            "max_boxes" => self.max_boxes = scalar(v)?,
            "score_threshold" => self.score_threshold = scalar(v)?,
            "fallback_class" => self.fallback_class = scalar(v)?,
            "loss_weighting" => {
                self.loss_weighting = match v {
                    "grouped" => WeightingMode::Grouped,
                    "per_loss" => WeightingMode::PerLoss,
                    _ => return Err(Error::config(format!("`{v}` is not grouped|per_loss"))),
                }
            }
            "log_vars" => self.log_vars = list(v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Serializes every key; [`PipelineConfig::parse`] reads it back unchanged.
    pub fn to_kv_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinf = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("profile", self.profile.clone());
        kv("voxel_size", joinf(&self.voxel.voxel_size));
        kv("point_range_min", joinf(&self.voxel.range_min));
        kv("point_range_max", joinf(&self.voxel.range_max));
        kv("vfe_channels", self.vfe_channels.to_string());
        kv("encoder_depths", join(&self.unet.enc_depths));
        kv("encoder_widths", join(&self.unet.enc_widths));
        kv("decoder_widths", join(&self.unet.dec_widths));
        kv("bridge_channels", self.unet.bridge_channels.to_string());
        kv("kernel", self.unet.kernel.to_string());
        kv("gcp_depths", join(&[self.gcp.level1_depth, self.gcp.level2_depth]));
        kv("gcp_widths", join(&[self.gcp.level1_width, self.gcp.level2_width]));
        kv("gcp_mode", match self.gcp_mode {
            GcpMode::Full => "full".into(),
            GcpMode::Identity => "identity".into(),
        });
        kv("num_classes", self.num_classes.to_string());
        kv("thing_classes", join(&self.thing_classes));
        kv("stage2_hidden", self.stage2_hidden.to_string());
        kv("max_boxes", self.max_boxes.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("fallback_class", self.fallback_class.to_string());
        kv("loss_weighting", match self.loss_weighting {
            WeightingMode::Grouped => "grouped".into(),
            WeightingMode::PerLoss => "per_loss".into(),
        });
        kv("log_vars", joinf(&self.log_vars));
        s
    }
}

fn scalar<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| scalar(x.trim())).collect()
}

fn triple(v: &str) -> Result<[f64; 3]> {
    let x: Vec<f64> = list(v)?;
    x.try_into().map_err(|_| Error::config(format!("`{v}` needs three values")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waymo_defaults() {
        let c = PipelineConfig::profile("waymo").unwrap();
        c.validate().unwrap();
        assert_eq!(c.voxel.voxel_size, [0.1, 0.1, 0.15]);
        assert_eq!(c.grid_dims(), [1504, 1504, 40]);
        assert_eq!(c.bottom_grid(), [188, 188, 5]);
        assert_eq!(c.bev_in_channels(), 1280);
        assert_eq!(c.unet.enc_depths, vec![2, 3, 3, 3]);
        assert_eq!(c.unet.enc_widths, vec![32, 64, 128, 256]);
        assert_eq!(c.unet.dec_widths, vec![128, 64, 32, 32]);
        assert_eq!((c.gcp.level1_depth, c.gcp.level2_depth, c.gcp.level1_width, c.gcp.level2_width), (6, 6, 128, 256));
        assert_eq!(c.vfe_channels, 16);
    }

    #[test]
    fn nuscenes_and_toy() {
        let n = PipelineConfig::profile("nuscenes").unwrap();
        assert_eq!(n.voxel.voxel_size, [0.075, 0.075, 0.2]);
        assert_eq!((n.voxel.range_min, n.voxel.range_max), ([-54.0, -54.0, -5.0], [54.0, 54.0, 3.0]));
        let t = PipelineConfig::profile("toy").unwrap();
        t.validate().unwrap();
        assert_eq!(t.grid_dims(), [32, 32, 16]);
        assert_eq!(t.bottom_grid(), [4, 4, 2]);
    }

    #[test]
    fn kv_round_trip() {
        for p in PROFILES {
            let c = PipelineConfig::profile(p).unwrap();
            assert_eq!(PipelineConfig::parse(&c.to_kv_text()).unwrap(), c);
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = PipelineConfig::parse("profile=toy\n# comment\nmax_boxes = 7\n").unwrap();
        assert_eq!(c.max_boxes, 7);
        let e = PipelineConfig::parse("profile=toy\nbogus=1\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("bogus")));
        let e = PipelineConfig::parse("profile=toy\nvoxel_size=0.7,1,0.5\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = PipelineConfig::parse("profile=toy\nencoder_depths=2,3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = PipelineConfig::parse("profile=mars\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let p = PipelineConfig::parse("profile=toy\nloss_weighting=per_loss\n").unwrap();
        assert_eq!(p.log_vars.len(), 7);
    }
}
