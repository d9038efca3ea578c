//! The coarse-to-fine cascade of two U-shaped subnetworks.

use std::fmt::Write as _;

use crate::blocks::{r2jump_fuse, Conv, FeatureBlock, Forward, FuseMode, R2Jump, ScseLite, UpConv};
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::tape::{Activation, Mode, Var};
use crate::tensor::{Dims, Real, Tensor};

/// Factor applied to the He-normal draw of each 1x1 output head. Unscaled,
/// the residual stack drives the initial logits far into sigmoid saturation.
pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Same treatment for the cross-stage convolutions, whose sum is added
/// straight onto the fine encoder features.
pub const INJECTION_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    /// Recurrent steps of the skip refinement, one per level (level 1 first).
    pub recurrence: Vec<usize>,
    pub input_size: usize,
    pub use_r2jump: bool,
    pub use_inception: bool,
    pub use_mcskip: bool,
    pub use_scse: bool,
    pub dropout_rate: f64,
    /// Apply bottleneck dropout after the attention block instead of before.
    pub dropout_after_scse: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 inputs with narrow channels, small enough to train on a CPU.
    pub fn desk() -> Self {
        Self {
            levels: 4,
            channels: vec![8, 16, 32, 64],
            recurrence: vec![4, 3, 2, 1],
            input_size: 64,
            use_r2jump: true,
            use_inception: true,
            use_mcskip: true,
            use_scse: true,
            dropout_rate: 0.2,
            dropout_after_scse: false,
            seed: 0,
        }
    }

    /// Full-width network at 512x512.
    pub fn paper() -> Self {
        Self { channels: vec![32, 64, 128, 256], input_size: 512, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.channels.len() != l || self.recurrence.len() != l {
            return Err(Error::Config(format!(
                "channels ({}) and recurrence ({}) must both have {l} entries",
                self.channels.len(),
                self.recurrence.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.recurrence.contains(&0) {
            return Err(Error::Config("recurrence steps must be >= 1".into()));
        }
        if self.use_scse && self.channels[l - 1] % 2 != 0 {
            return Err(Error::Config("bottleneck width must be even for the attention block".into()));
        }
        let step = 1usize << (l - 1);
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::Config(format!("input_size {} must be divisible by {step}", self.input_size)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Fusion used at `level` (1-based): addition on the upper half of the
    /// pyramid, concatenation on the lower half.
    pub fn fuse_mode(&self, level: usize) -> FuseMode {
        if level <= self.levels / 2 {
            FuseMode::Add
        } else {
            FuseMode::Concat
        }
    }

    /// Coarse decoder levels feeding fine encoder level `level`.
    pub fn mcskip_sources(&self, level: usize) -> std::ops::RangeInclusive<usize> {
        level..=(level + 2).min(self.levels)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("levels", self.levels.to_string()),
            ("channels", list(&self.channels)),
            ("recurrence", list(&self.recurrence)),
            ("input_size", self.input_size.to_string()),
            ("use_r2jump", self.use_r2jump.to_string()),
            ("use_inception", self.use_inception.to_string()),
            ("use_mcskip", self.use_mcskip.to_string()),
            ("use_scse", self.use_scse.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("dropout_after_scse", self.dropout_after_scse.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 11] = [
        "levels",
        "channels",
        "recurrence",
        "input_size",
        "use_r2jump",
        "use_inception",
        "use_mcskip",
        "use_scse",
        "dropout_rate",
        "dropout_after_scse",
        "seed",
    ];

    /// Sets one field from its text form. Returns `Ok(false)` for keys that
    /// are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key} = `{value}`: {e}"));
        match key {
            "levels" => self.levels = value.parse().map_err(|e| bad(&e))?,
            "channels" => self.channels = parse_list(value).map_err(|e| bad(&e))?,
            "recurrence" => self.recurrence = parse_list(value).map_err(|e| bad(&e))?,
            "input_size" => self.input_size = value.parse().map_err(|e| bad(&e))?,
            "use_r2jump" => self.use_r2jump = value.parse().map_err(|e| bad(&e))?,
            "use_inception" => self.use_inception = value.parse().map_err(|e| bad(&e))?,
            "use_mcskip" => self.use_mcskip = value.parse().map_err(|e| bad(&e))?,
            "use_scse" => self.use_scse = value.parse().map_err(|e| bad(&e))?,
            "dropout_rate" => self.dropout_rate = value.parse().map_err(|e| bad(&e))?,
            "dropout_after_scse" => self.dropout_after_scse = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses the output of [`to_text`](Self::to_text). Every key is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if !cfg.set(k, v.trim())? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
            seen.push(k.to_string());
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("missing model key `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

/// One U-shaped subnetwork. Vectors are indexed by level - 1.
#[derive(Clone, Debug)]
pub struct SubNet {
    pub encoder: Vec<FeatureBlock>,
    pub bottleneck: FeatureBlock,
    pub attention: Option<ScseLite>,
    pub skips: Vec<Option<R2Jump>>,
    /// `upconvs[k]` lifts level k + 2 decoder output to level k + 1.
    pub upconvs: Vec<UpConv>,
    pub decoder: Vec<FeatureBlock>,
    pub head: Conv,
    /// Fine network only: `mcskip[i][j]` maps coarse decoder level `i + j + 1`
    /// to the width of encoder level `i + 1`.
    pub mcskip: Vec<Vec<Conv>>,
}

impl SubNet {
    fn build<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, in_channels: usize, fine: bool) -> Result<Self> {
        let c = &cfg.channels;
        let l = cfg.levels;
        let mut encoder = Vec::with_capacity(l);
        for i in 0..l {
            let ci = if i == 0 { in_channels } else { c[i - 1] };
            encoder.push(FeatureBlock::build(b, &format!("enc{}", i + 1), ci, c[i], cfg.use_inception)?);
        }
        let bottleneck = FeatureBlock::build(b, "bottleneck", c[l - 1], c[l - 1], cfg.use_inception)?;
        let attention =
            if fine && cfg.use_scse { Some(ScseLite::build(b, "attention", c[l - 1])?) } else { None };
        let mut skips = Vec::with_capacity(l);
        for i in 0..l {
            skips.push(if cfg.use_r2jump {
                Some(R2Jump::build(b, &format!("skip{}", i + 1), c[i], cfg.recurrence[i])?)
            } else {
                None
            });
        }
        let mut upconvs = Vec::with_capacity(l.saturating_sub(1));
        for i in 0..l.saturating_sub(1) {
            upconvs.push(UpConv::build(b, &format!("up{}", i + 1), c[i + 1], c[i])?);
        }
        let mut decoder = Vec::with_capacity(l);
        for i in 0..l {
            let ci = match cfg.fuse_mode(i + 1) {
                FuseMode::Add => c[i],
                FuseMode::Concat => 2 * c[i],
            };
            decoder.push(FeatureBlock::build(b, &format!("dec{}", i + 1), ci, c[i], cfg.use_inception)?);
        }
        let head = Conv::build(b, "head", c[0], 1, 1)?;
        b.rescale(head.weight, HEAD_INIT_SCALE);
        let mut mcskip = Vec::new();
        if fine && cfg.use_mcskip {
            for i in 1..=l {
                let mut row = Vec::new();
                for k in cfg.mcskip_sources(i) {
                    let psi = Conv::build(b, &format!("mcskip.d{k}_e{i}"), c[k - 1], c[i - 1], 3)?;
                    b.rescale(psi.weight, INJECTION_INIT_SCALE);
                    row.push(psi);
                }
                mcskip.push(row);
            }
        }
        Ok(Self { encoder, bottleneck, attention, skips, upconvs, decoder, head, mcskip })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CascadeOutput {
    pub coarse: Var,
    pub fine: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub coarse: SubNet,
    pub fine: SubNet,
}

impl<T: Real> Model<T> {
    /// Builds the cascade with He-normal weights drawn from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, cfg.seed);
        let coarse = b.scoped("coarse", |b| SubNet::build(b, cfg, 1, false))?;
        let fine = b.scoped("fine", |b| SubNet::build(b, cfg, 2, true))?;
        Ok(Self { config: cfg.clone(), store, coarse, fine })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast(), coarse: self.coarse.clone(), fine: self.fine.clone() }
    }

    fn check_input(&self, f: &Forward<'_, T>, image: Var) -> Result<Dims> {
        let d = f.tape.dims(image);
        let s = self.config.input_size;
        if d.c != 1 || d.h != s || d.w != s {
            return Err(shape_err!("expected input (n,1,{s},{s}), got {d}"));
        }
        Ok(d)
    }

    /// Shared encoder-bottleneck-decoder pass. `inject` adds a term to each
    /// encoder level output.
    fn unet_forward(
        &self,
        net: &SubNet,
        f: &mut Forward<'_, T>,
        input: Var,
        mut inject: impl FnMut(&mut Forward<'_, T>, usize) -> Result<Option<Var>>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let l = cfg.levels;
        let mut enc = Vec::with_capacity(l);
        let mut x = input;
        for (i, block) in net.encoder.iter().enumerate() {
            if i > 0 {
                x = f.tape.maxpool2x2(x)?;
            }
            x = block.forward(f, x)?;
            if let Some(g) = inject(f, i + 1)? {
                x = f.tape.add(x, g)?;
            }
            enc.push(x);
        }

        let mut z = net.bottleneck.forward(f, enc[l - 1])?;
        if cfg.dropout_after_scse {
            if let Some(att) = &net.attention {
                z = att.forward(f, z)?;
            }
            z = f.dropout(z, cfg.dropout_rate)?;
        } else {
            z = f.dropout(z, cfg.dropout_rate)?;
            if let Some(att) = &net.attention {
                z = att.forward(f, z)?;
            }
        }

        let mut feats = vec![z; l];
        let mut prev = z;
        for k in (1..=l).rev() {
            let d = if k == l { z } else { net.upconvs[k - 1].forward(f, prev)? };
            let skip = match &net.skips[k - 1] {
                Some(r) => r.refine(f, enc[k - 1])?,
                None => enc[k - 1],
            };
            let h = r2jump_fuse(&mut f.tape, skip, d, cfg.fuse_mode(k))?;
            prev = net.decoder[k - 1].forward(f, h)?;
            feats[k - 1] = prev;
        }
        let logits = net.head.forward(f, prev)?;
        Ok((f.tape.activation(logits, Activation::Sigmoid), feats))
    }

    /// Coarse probability map and the per-level decoder outputs
    /// (level 1 first, full resolution).
    pub fn coarse_forward(&self, f: &mut Forward<'_, T>, image: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(f, image)?;
        self.unet_forward(&self.coarse, f, image, |_, _| Ok(None))
    }

    /// Sum of the projected, upsampled coarse decoder outputs injected at fine
    /// encoder `level` (1-based).
    pub fn mc_skip_aggregate(&self, f: &mut Forward<'_, T>, decoder_feats: &[Var], level: usize) -> Result<Var> {
        let cfg = &self.config;
        if !cfg.use_mcskip {
            return Err(invalid!("cross-stage skips are disabled in this model"));
        }
        if level == 0 || level > cfg.levels {
            return Err(invalid!("level {level} outside 1..={}", cfg.levels));
        }
        if decoder_feats.len() != cfg.levels {
            return Err(invalid!("expected {} decoder maps, got {}", cfg.levels, decoder_feats.len()));
        }
        let mut total: Option<Var> = None;
        for (j, k) in cfg.mcskip_sources(level).enumerate() {
            let up = f.tape.upsample_bilinear(decoder_feats[k - 1], 1 << (k - level))?;
            let term = self.fine.mcskip[level - 1][j].forward(f, up)?;
            total = Some(match total {
                Some(t) => f.tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("source range is never empty"))
    }

    pub fn fine_forward(&self, f: &mut Forward<'_, T>, image: Var, p_coarse: Var, decoder_feats: &[Var]) -> Result<Var> {
        self.check_input(f, image)?;
        if self.config.use_mcskip && decoder_feats.len() != self.config.levels {
            return Err(invalid!(
                "fine pass needs {} coarse decoder maps, got {}",
                self.config.levels,
                decoder_feats.len()
            ));
        }
        let input = f.tape.concat_channels(&[image, p_coarse])?;
        let use_mcskip = self.config.use_mcskip;
        let (p, _) = self.unet_forward(&self.fine, f, input, |f, level| {
            if use_mcskip {
                self.mc_skip_aggregate(f, decoder_feats, level).map(Some)
            } else {
                Ok(None)
            }
        })?;
        Ok(p)
    }

    pub fn cascade_forward(&self, f: &mut Forward<'_, T>, image: Var) -> Result<CascadeOutput> {
        let (coarse, feats) = self.coarse_forward(f, image)?;
        let fine = self.fine_forward(f, image, coarse, &feats)?;
        Ok(CascadeOutput { coarse, fine })
    }

    /// Evaluation-mode inference: `(coarse, fine)` probability maps.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut f = Forward::new(&self.store, Mode::Eval, 0);
        let x = f.input(image.clone());
        let out = self.cascade_forward(&mut f, x)?;
        Ok((f.tape.value(out.coarse).clone(), f.tape.value(out.fine).clone()))
    }
}
