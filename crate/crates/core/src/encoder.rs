//! Dual-branch embedding network.
//!
//! The spatial branch reads the image, the frequency branch reads
//! `idct2(mask(dct2(image)))`. Each branch is a small backbone whose chosen
//! convolutions are replaced by ARF layers; with both branches active their
//! outputs are fused pixel-wise.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::arf::{ArfConfig, ArfLayer, ArfOutput, ArfOverrides};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionOutput};
use crate::nn::{init_batch_norm, init_conv, Forward, ParamStore};
use crate::ops;
use crate::spectral;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Spatial,
    Frequency,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Spatial => "spatial",
            Branch::Frequency => "frequency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Conv4Mini,
    ResnetMini,
}

impl Backbone {
    pub fn layers_per_block(self) -> usize {
        match self {
            Backbone::Conv4Mini => 1,
            Backbone::ResnetMini => 3,
        }
    }

    /// Layer an ARF replaces when a placement names only the block.
    pub fn default_arf_layer(self) -> usize {
        match self {
            Backbone::Conv4Mini => 1,
            Backbone::ResnetMini => 2,
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4_mini" => Ok(Backbone::Conv4Mini),
            "resnet_mini" => Ok(Backbone::ResnetMini),
            _ => Err(Error::Config(format!("unknown backbone `{s}` (expected conv4_mini or resnet_mini)"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Conv4Mini => "conv4_mini",
            Backbone::ResnetMini => "resnet_mini",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchMode {
    SpatialOnly,
    FrequencyOnly,
    Both,
}

impl BranchMode {
    pub fn active(self) -> Vec<Branch> {
        match self {
            BranchMode::SpatialOnly => vec![Branch::Spatial],
            BranchMode::FrequencyOnly => vec![Branch::Frequency],
            BranchMode::Both => vec![Branch::Spatial, Branch::Frequency],
        }
    }
}

impl FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_only" => Ok(BranchMode::SpatialOnly),
            "frequency_only" => Ok(BranchMode::FrequencyOnly),
            "both" => Ok(BranchMode::Both),
            _ => Err(Error::Config(format!("unknown branch_mode `{s}` (expected spatial_only, frequency_only or both)"))),
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchMode::SpatialOnly => "spatial_only",
            BranchMode::FrequencyOnly => "frequency_only",
            BranchMode::Both => "both",
        })
    }
}

/// One convolution position that an ARF layer replaces. Blocks and layers are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArfSite {
    pub branch: Branch,
    pub block: usize,
    pub layer: usize,
}

impl fmt::Display for ArfSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.branch.name(), self.block, self.layer)
    }
}

/// Parses `all`, `none`, or a comma list of `branch:block[:layer]` where
/// branch is `spatial`, `frequency` or `both`.
pub fn parse_placement(text: &str, backbone: Backbone, blocks: usize) -> Result<Vec<ArfSite>> {
    let text = text.trim();
    let layer = backbone.default_arf_layer();
    let every = |branch| (1..=blocks).map(move |block| ArfSite { branch, block, layer });
    match text {
        "none" | "" => return Ok(Vec::new()),
        "all" => return Ok(every(Branch::Spatial).chain(every(Branch::Frequency)).collect()),
        _ => {}
    }
    let mut sites = Vec::new();
    for item in text.split(',') {
        let parts: Vec<&str> = item.trim().split(':').collect();
        let bad = || Error::Config(format!("bad ARF placement `{}` (expected branch:block[:layer])", item.trim()));
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let branches = match parts[0] {
            "spatial" => vec![Branch::Spatial],
            "frequency" => vec![Branch::Frequency],
            "both" => vec![Branch::Spatial, Branch::Frequency],
            _ => return Err(bad()),
        };
        let block: usize = parts[1].parse().map_err(|_| bad())?;
        let layer: usize = match parts.get(2) {
            Some(l) => l.parse().map_err(|_| bad())?,
            None => layer,
        };
        for branch in branches {
            sites.push(ArfSite { branch, block, layer });
        }
    }
    sites.sort();
    sites.dedup();
    Ok(sites)
}

pub fn format_placement(sites: &[ArfSite]) -> String {
    if sites.is_empty() {
        return "none".into();
    }
    sites.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub widths: Vec<usize>,
    /// Whether each block ends with 2x2 max pooling.
    pub pool: Vec<bool>,
    pub arf_placement: Vec<ArfSite>,
    pub branch_mode: BranchMode,
    pub rho_max: usize,
    pub sigma_step: usize,
    pub kappa: f64,
    pub eca_window: usize,
    pub frozen_bank: bool,
    pub image_size: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    /// Frequency branch reuses the spatial branch's parameters.
    pub tie_branches: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let backbone = Backbone::Conv4Mini;
        Self {
            backbone,
            widths: vec![16, 32, 64, 64],
            pool: vec![true; 4],
            arf_placement: parse_placement("all", backbone, 4).expect("static placement"),
            branch_mode: BranchMode::Both,
            rho_max: 9,
            sigma_step: 2,
            kappa: 0.1,
            eca_window: 3,
            frozen_bank: false,
            image_size: 32,
            in_channels: 3,
            leaky_slope: 0.1,
            bn_momentum: 0.9,
            tie_branches: false,
        }
    }
}

impl EncoderConfig {
    pub fn arf_config(&self, c_in: usize, c_out: usize) -> ArfConfig {
        ArfConfig {
            rho_max: self.rho_max,
            sigma_step: self.sigma_step,
            kappa: self.kappa,
            channels_in: c_in,
            channels_out: c_out,
            eca_window: self.eca_window,
            frozen_bank: self.frozen_bank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be a non-empty list of positive values, got {:?}", self.widths)));
        }
        if self.pool.len() != n {
            return Err(Error::Config(format!("pool has {} entries for {} blocks", self.pool.len(), n)));
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("image_size and in_channels must be positive".into()));
        }
        let mut side = self.image_size;
        for (i, &p) in self.pool.iter().enumerate() {
            if p {
                if side < 2 {
                    return Err(Error::Config(format!("block {} pools a {}x{} map", i + 1, side, side)));
                }
                side /= 2;
            }
        }
        let layers = self.backbone.layers_per_block();
        for site in &self.arf_placement {
            if site.block == 0 || site.block > n || site.layer == 0 || site.layer > layers {
                let valid: Vec<String> = (1..=n)
                    .flat_map(|b| (1..=layers).map(move |l| format!("{b}:{l}")))
                    .collect();
                return Err(Error::Config(format!(
                    "ARF placement {} does not exist in {} with {} blocks; valid block:layer positions are {}",
                    site,
                    self.backbone,
                    n,
                    valid.join(", ")
                )));
            }
        }
        if self.tie_branches && self.branch_mode != BranchMode::Both {
            return Err(Error::Config("tie_branches requires branch_mode both".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum must be in [0,1), got {}", self.bn_momentum)));
        }
        self.arf_config(1, 1).validate()
    }

    /// `(C, h, w)` of the encoder output.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let pools = self.pool.iter().filter(|&&p| p).count();
        let side = self.image_size >> pools;
        (*self.widths.last().expect("validated widths"), side, side)
    }
}

/// Per-branch results of [`Encoder::encode`].
pub struct EncoderOutput<'t> {
    /// `[B, C, h, w]`.
    pub features: Var<'t>,
    pub theta_s: Option<Var<'t>>,
    pub theta_f: Option<Var<'t>>,
    pub fusion: Option<FusionOutput<'t>>,
    /// Frequency-branch input.
    pub omega_f: Option<Var<'t>>,
    pub arf: Vec<(ArfSite, ArfOutput<'t>)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: BTreeMap<ArfSite, ArfLayer>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let active = config.branch_mode.active();
        let mut layers = BTreeMap::new();
        for &site in &config.arf_placement {
            if !active.contains(&site.branch) {
                log::debug!("ARF placement {site} ignored: branch inactive");
                continue;
            }
            let (c_in, c_out) = Self::layer_channels(&config, site.block, site.layer);
            let prefix = format!("arf.{}", Self::site_key(&config, site));
            layers.insert(site, ArfLayer::new(prefix, config.arf_config(c_in, c_out))?);
        }
        Ok(Self { config, layers })
    }

    fn layer_channels(config: &EncoderConfig, block: usize, layer: usize) -> (usize, usize) {
        let c_out = config.widths[block - 1];
        let block_in = if block == 1 { config.in_channels } else { config.widths[block - 2] };
        (if layer == 1 { block_in } else { c_out }, c_out)
    }

    fn param_branch(config: &EncoderConfig, branch: Branch) -> &'static str {
        if config.tie_branches { Branch::Spatial.name() } else { branch.name() }
    }

    fn site_key(config: &EncoderConfig, site: ArfSite) -> String {
        let b = Self::param_branch(config, site.branch);
        match config.backbone {
            Backbone::Conv4Mini => format!("{b}_b{}", site.block),
            Backbone::ResnetMini => format!("{b}_b{}_l{}", site.block, site.layer),
        }
    }

    /// Applies `overrides` to every ARF layer.
    pub fn set_arf_overrides(&mut self, overrides: &ArfOverrides) {
        for layer in self.layers.values_mut() {
            layer.overrides = overrides.clone();
        }
    }

    pub fn arf_layers(&self) -> impl Iterator<Item = (&ArfSite, &ArfLayer)> {
        self.layers.iter()
    }

    /// False for parameters that must not be updated (a frozen kernel bank).
    pub fn is_trainable(&self, name: &str) -> bool {
        !self.layers.values().any(|l| l.config.frozen_bank && l.is_bank_param(name))
    }

    fn init_branch(&self, branch: Branch, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut impl Rng) {
        let cfg = &self.config;
        let prefix = Self::param_branch(cfg, branch);
        for block in 1..=cfg.widths.len() {
            for layer in 1..=cfg.backbone.layers_per_block() {
                let site = ArfSite { branch, block, layer };
                let (c_in, c_out) = Self::layer_channels(cfg, block, layer);
                let base = self.layer_prefix(prefix, block, layer);
                match self.layers.get(&site) {
                    Some(arf) => arf.init(params, buffers, rng),
                    None => init_conv(&base, c_in, c_out, (3, 3), false, params, rng),
                }
                init_batch_norm(&self.bn_prefix(prefix, block, layer), c_out, params, buffers);
            }
            if cfg.backbone == Backbone::ResnetMini {
                let (c_in, c_out) = Self::layer_channels(cfg, block, 1);
                init_conv(&format!("{prefix}.block{block}.shortcut"), c_in, c_out, (1, 1), false, params, rng);
                init_batch_norm(&format!("{prefix}.block{block}.shortcut_bn"), c_out, params, buffers);
            }
        }
    }

    fn layer_prefix(&self, branch: &str, block: usize, layer: usize) -> String {
        match self.config.backbone {
            Backbone::Conv4Mini => format!("{branch}.block{block}.conv"),
            Backbone::ResnetMini => format!("{branch}.block{block}.conv{layer}"),
        }
    }

    fn bn_prefix(&self, branch: &str, block: usize, layer: usize) -> String {
        match self.config.backbone {
            Backbone::Conv4Mini => format!("{branch}.block{block}.bn"),
            Backbone::ResnetMini => format!("{branch}.block{block}.bn{layer}"),
        }
    }

    /// Adds every encoder parameter and batch-norm buffer, drawing from `rng` in a fixed order.
    pub fn init(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut impl Rng) {
        let active = self.config.branch_mode.active();
        for &branch in &active {
            if branch == Branch::Frequency && self.config.tie_branches {
                continue;
            }
            self.init_branch(branch, params, buffers, rng);
        }
        if active.contains(&Branch::Frequency) {
            params.insert(spectral::TEMPLATE_NAME, spectral::init_template(self.config.in_channels));
        }
        if self.config.branch_mode == BranchMode::Both {
            fusion::init_fusion(*self.config.widths.last().expect("validated widths"), params, rng);
        }
    }

    fn conv_or_arf<'t>(
        &self,
        ctx: &Forward<'_, 't>,
        site: ArfSite,
        x: Var<'t>,
        arf_out: &mut Vec<(ArfSite, ArfOutput<'t>)>,
    ) -> Result<Var<'t>> {
        match self.layers.get(&site) {
            Some(layer) => {
                let out = layer.forward(ctx, x)?;
                let y = out.y;
                arf_out.push((site, out));
                Ok(y)
            }
            None => {
                let branch = Self::param_branch(&self.config, site.branch);
                ctx.conv(&self.layer_prefix(branch, site.block, site.layer), x)
            }
        }
    }

    fn run_branch<'t>(
        &self,
        ctx: &Forward<'_, 't>,
        branch: Branch,
        input: Var<'t>,
        arf_out: &mut Vec<(ArfSite, ArfOutput<'t>)>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let prefix = Self::param_branch(cfg, branch);
        let mut x = input;
        for block in 1..=cfg.widths.len() {
            let site = |layer| ArfSite { branch, block, layer };
            x = match cfg.backbone {
                Backbone::Conv4Mini => {
                    let h = self.conv_or_arf(ctx, site(1), x, arf_out)?;
                    ctx.leaky(ctx.batch_norm(&self.bn_prefix(prefix, block, 1), h)?)
                }
                Backbone::ResnetMini => {
                    let mut h = x;
                    for layer in 1..=3 {
                        h = self.conv_or_arf(ctx, site(layer), h, arf_out)?;
                        h = ctx.batch_norm(&self.bn_prefix(prefix, block, layer), h)?;
                        if layer < 3 {
                            h = ctx.leaky(h);
                        }
                    }
                    let short = ctx.conv(&format!("{prefix}.block{block}.shortcut"), x)?;
                    let short = ctx.batch_norm(&format!("{prefix}.block{block}.shortcut_bn"), short)?;
                    ctx.leaky(ops::add(h, short)?)
                }
            };
            if cfg.pool[block - 1] {
                x = ops::max_pool2(x)?;
            }
        }
        Ok(x)
    }

    fn check_input(&self, x: Var<'_>) -> Result<()> {
        let s = x.shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != n || s[3] != n {
            return Err(Error::Dimension(format!(
                "encoder expects [B,{},{},{}] images, got {:?}",
                self.config.in_channels, n, n, s
            )));
        }
        Ok(())
    }

    /// Embeds `[B, C0, H, W]` images.
    pub fn encode<'t>(&self, ctx: &Forward<'_, 't>, images: Var<'t>) -> Result<EncoderOutput<'t>> {
        self.check_input(images)?;
        let omega_f = if self.config.branch_mode.active().contains(&Branch::Frequency) {
            Some(spectral::frequency_view(images, ctx.param(spectral::TEMPLATE_NAME)?)?)
        } else {
            None
        };
        let mut out = self.encode_branches(ctx, images, omega_f.unwrap_or(images))?;
        out.omega_f = omega_f;
        Ok(out)
    }

    /// Runs the active branches on explicitly given inputs, bypassing the spectral stage.
    pub fn encode_branches<'t>(
        &self,
        ctx: &Forward<'_, 't>,
        spatial_input: Var<'t>,
        frequency_input: Var<'t>,
    ) -> Result<EncoderOutput<'t>> {
        let mut arf = Vec::new();
        let active = self.config.branch_mode.active();
        let theta_s = if active.contains(&Branch::Spatial) {
            Some(self.run_branch(ctx, Branch::Spatial, spatial_input, &mut arf)?)
        } else {
            None
        };
        let theta_f = if active.contains(&Branch::Frequency) {
            Some(self.run_branch(ctx, Branch::Frequency, frequency_input, &mut arf)?)
        } else {
            None
        };
        let (features, fusion) = match (theta_s, theta_f) {
            (Some(s), Some(f)) => {
                let fused = fusion::fuse(ctx, s, f)?;
                (fused.fused, Some(fused))
            }
            (Some(s), None) => (s, None),
            (None, Some(f)) => (f, None),
            (None, None) => unreachable!("branch mode activates at least one branch"),
        };
        Ok(EncoderOutput { features, theta_s, theta_f, fusion, omega_f: None, arf })
    }
}
