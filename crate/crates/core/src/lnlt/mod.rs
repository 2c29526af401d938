//! Local and non-local transformer (LNLT) denoiser.
//!
//! A three-level U-shaped network of [`block::lnlb_forward`] blocks:
//!
//! ```text
//! [x | eta] -3x3-> X0 (C) -> enc0 -> down -> enc1 (2C) -> down -> bottleneck (4C)
//!                          ^                 ^                         |
//!                          |                 +--fuse-- up <------------+
//!                 dec0 <- fuse <- up <- dec1 (2C)
//! dec0 -3x3-> R (B channels);   output = x + R
//! ```
//!
//! Down-sampling is a stride-2 4x4 conv doubling channels, up-sampling a
//! stride-2 2x2 transposed conv halving them, and skip fusion concatenates
//! the encoder features and mixes them with a 1x1 conv.

pub mod attention;
pub mod block;

pub use attention::{
    init_msa, local_attention, local_msa, local_msa_core, nonlocal_attention, nonlocal_msa,
    nonlocal_msa_core, qkv_project, AttentionRecorder, MsaWeights, Projection,
};
pub use block::{gdfn, gdfn_core, init_lnlb, lnlb_forward, BlockShape, GdfnWeights, LnlbWeights};

use crate::cassi::HsiCube;
use crate::nn::{Conv, ConvTranspose};
use crate::rng::Rng;
use crate::tensor::params::Initializer;
use crate::tensor::{ops, BoundParams, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "lnlt";
pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LnltConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub heads_per_level: [usize; LEVELS],
    /// Local window side `M`.
    pub window_size: usize,
    /// Non-local grid side `N`.
    pub window_count: usize,
    /// GDFN hidden width as a multiple of the block width.
    pub ffn_expansion: usize,
}

impl LnltConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            base_channels: 32,
            blocks_per_level: 1,
            heads_per_level: [1, 2, 4],
            window_size: 8,
            window_count: 8,
            ffn_expansion: 2,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn shape(&self, level: usize) -> BlockShape {
        let c = self.channels(level);
        BlockShape {
            channels: c,
            heads: self.heads_per_level[level],
            hidden: c * self.ffn_expansion,
            window: self.window_size,
            grid: self.window_count,
        }
    }

    /// Checks the architecture and that an `h x w` input can be processed.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.bands == 0 || self.base_channels == 0 || self.blocks_per_level == 0 {
            return Err(Error::InvalidConfig("LNLT extents must be positive".into()));
        }
        if self.window_size == 0 || self.window_count == 0 {
            return Err(Error::InvalidConfig("window size and count must be positive".into()));
        }
        for level in 0..LEVELS {
            let (c, heads) = (self.channels(level), self.heads_per_level[level]);
            if heads == 0 || c % heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "level {level}: {c} channels not divisible by {heads} heads"
                )));
            }
        }
        let scale = 1 << (LEVELS - 1);
        for (what, side) in [("window size", self.window_size), ("window count", self.window_count)] {
            let q = scale * side;
            if h % q != 0 || w % q != 0 {
                return Err(Error::InvalidConfig(format!(
                    "input {h}x{w} must be divisible by {q} ({scale} x {what} {side})"
                )));
            }
        }
        Ok(())
    }

    /// Recovers the architecture from a parameter set written by
    /// [`LnltConfig::init_params`].
    pub fn from_params(p: &ParamStore) -> Result<Self> {
        let embed = p.get(&format!("{PREFIX}.embed.weight"))?.shape().to_vec();
        if embed.len() != 4 || embed[3] < 2 {
            return Err(Error::shape(format!("{PREFIX}.embed.weight has shape {embed:?}")));
        }
        let blocks_per_level = (0..).take_while(|b| p.contains(&format!("{PREFIX}.enc0.b{b}.local.pos"))).count();
        let pos = |name: &str| -> Result<(usize, usize)> {
            let s = p.get(&format!("{PREFIX}.{name}.pos"))?.shape();
            let side = (s[1] as f64).sqrt().round() as usize;
            if s.len() != 3 || side * side != s[1] {
                return Err(Error::shape(format!("{name}.pos has shape {s:?}")));
            }
            Ok((s[0], side))
        };
        let (_, window_size) = pos("enc0.b0.local")?;
        let (_, window_count) = pos("enc0.b0.nonlocal")?;
        let mut heads_per_level = [0; LEVELS];
        for (level, name) in ["enc0", "enc1", "bottleneck"].iter().enumerate() {
            heads_per_level[level] = pos(&format!("{name}.b0.local"))?.0;
        }
        let base_channels = embed[0];
        let hidden = p.get(&format!("{PREFIX}.enc0.b0.ffn.out.weight"))?.shape()[3];
        let cfg = Self {
            bands: embed[3] - 1,
            base_channels,
            blocks_per_level,
            heads_per_level,
            window_size,
            window_count,
            ffn_expansion: hidden / base_channels,
        };
        let mut expect = ParamStore::new();
        cfg.init_params(&mut expect, &mut crate::rng::stream(0, crate::rng::Stream::Params));
        for (name, t) in expect.iter() {
            let got = p.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(format!("`{name}` is {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(cfg)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let mut init = Initializer { store, rng };
        let c = self.base_channels;
        init.conv(&format!("{PREFIX}.embed"), self.bands + 1, c, 3, 1);
        for level in 0..LEVELS - 1 {
            let ch = self.channels(level);
            for b in 0..self.blocks_per_level {
                block::init_lnlb(&mut init, &format!("{PREFIX}.enc{level}.b{b}"), self.shape(level));
                block::init_lnlb(&mut init, &format!("{PREFIX}.dec{level}.b{b}"), self.shape(level));
            }
            init.conv(&format!("{PREFIX}.down{level}"), ch, 2 * ch, 4, 1);
            init.conv_transpose(&format!("{PREFIX}.up{level}"), 2 * ch, ch, 2);
            init.conv(&format!("{PREFIX}.fuse{level}"), 2 * ch, ch, 1, 1);
        }
        for b in 0..self.blocks_per_level {
            block::init_lnlb(&mut init, &format!("{PREFIX}.bottleneck.b{b}"), self.shape(LEVELS - 1));
        }
        init.conv(&format!("{PREFIX}.out"), c, self.bands, 3, 1);
    }
}

struct Level {
    encoder: Vec<LnlbWeights>,
    decoder: Vec<LnlbWeights>,
    down: Conv,
    up: ConvTranspose,
    fuse: Conv,
}

pub struct LnltWeights {
    embed: Conv,
    levels: Vec<Level>,
    bottleneck: Vec<LnlbWeights>,
    out: Conv,
}

impl LnltWeights {
    pub fn bind(p: &BoundParams, cfg: &LnltConfig) -> Result<Self> {
        let blocks = |name: &str, level: usize| -> Result<Vec<LnlbWeights>> {
            let s = cfg.shape(level);
            (0..cfg.blocks_per_level)
                .map(|b| LnlbWeights::bind(p, &format!("{PREFIX}.{name}.b{b}"), s.channels, s.heads, s.hidden))
                .collect()
        };
        let levels = (0..LEVELS - 1)
            .map(|l| {
                Ok(Level {
                    encoder: blocks(&format!("enc{l}"), l)?,
                    decoder: blocks(&format!("dec{l}"), l)?,
                    down: Conv::bind(p, &format!("{PREFIX}.down{l}"), 2, 1, 1)?,
                    up: ConvTranspose::bind(p, &format!("{PREFIX}.up{l}"), 2)?,
                    fuse: Conv::same(p, &format!("{PREFIX}.fuse{l}"), 1, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: Conv::same(p, &format!("{PREFIX}.embed"), 3, 1)?,
            levels,
            bottleneck: blocks("bottleneck", LEVELS - 1)?,
            out: Conv::same(p, &format!("{PREFIX}.out"), 3, 1)?,
        })
    }
}

/// Denoises `x` (`[H, W, B]`) conditioned on the one-element `eta`.
pub fn lnlt_forward(
    x: &Var,
    eta: &Var,
    w: &LnltWeights,
    cfg: &LnltConfig,
    rec: &AttentionRecorder,
) -> Result<Var> {
    let (h, wd, b) = x.value().dims3()?;
    if b != cfg.bands {
        return Err(Error::shape(format!("LNLT built for {} bands, got {b}", cfg.bands)));
    }
    cfg.validate(h, wd)?;
    let (m, n) = (cfg.window_size, cfg.window_count);
    let run = |mut x: Var, blocks: &[LnlbWeights]| -> Result<Var> {
        for blk in blocks {
            x = lnlb_forward(&x, blk, m, n, rec)?;
        }
        Ok(x)
    };

    let eta_plane = ops::broadcast_scalar(eta, &[h, wd, 1])?;
    let mut feat = w.embed.forward(&ops::concat_last(x, &eta_plane)?)?;
    let mut skips = Vec::with_capacity(LEVELS - 1);
    for level in &w.levels {
        let enc = run(feat, &level.encoder)?;
        feat = level.down.forward(&enc)?;
        skips.push(enc);
    }
    feat = run(feat, &w.bottleneck)?;
    for (level, skip) in w.levels.iter().zip(skips).rev() {
        let up = level.up.forward(&feat)?;
        feat = level.fuse.forward(&ops::concat_last(&up, &skip)?)?;
        feat = run(feat, &level.decoder)?;
    }
    ops::add(x, &w.out.forward(&feat)?)
}

/// Value-level denoising with the weights in `params`.
pub fn lnlt_denoise(x: &HsiCube, eta: f64, params: &ParamStore, cfg: &LnltConfig) -> Result<HsiCube> {
    let bound = params.bind(false);
    let w = LnltWeights::bind(&bound, cfg)?;
    let z = lnlt_forward(
        &Var::constant(x.tensor().clone()),
        &Var::constant(Tensor::scalar(eta)),
        &w,
        cfg,
        &AttentionRecorder::disabled(),
    )?;
    HsiCube::new(z.value().clone())
}

/// Runs the denoiser once and returns every attention map it computed.
pub fn attention_maps(
    x: &HsiCube,
    eta: f64,
    params: &ParamStore,
    cfg: &LnltConfig,
) -> Result<Vec<(String, Tensor)>> {
    let bound = params.bind(false);
    let w = LnltWeights::bind(&bound, cfg)?;
    let rec = AttentionRecorder::enabled();
    lnlt_forward(
        &Var::constant(x.tensor().clone()),
        &Var::constant(Tensor::scalar(eta)),
        &w,
        cfg,
        &rec,
    )?;
    Ok(rec.take())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn tiny(bands: usize) -> LnltConfig {
        LnltConfig {
            base_channels: 4,
            window_size: 2,
            window_count: 2,
            ..LnltConfig::new(bands)
        }
    }

    fn params(cfg: &LnltConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut stream(seed, Stream::Params));
        store
    }

    fn cube(h: usize, w: usize, b: usize, amp: f64, seed: u64) -> HsiCube {
        let mut rng = stream(seed, Stream::Test);
        HsiCube::new(Tensor::from_fn(&[h, w, b], |_| rng.random_range(-amp..amp))).unwrap()
    }

    #[test]
    fn zero_output_conv_returns_input() {
        let cfg = tiny(3);
        let mut p = params(&cfg, 1);
        for name in ["lnlt.out.weight", "lnlt.out.bias"] {
            let t = p.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let x = cube(8, 8, 3, 1.0, 2);
        assert_eq!(lnlt_denoise(&x, 0.5, &p, &cfg).unwrap(), x);
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = tiny(3);
        let p = params(&cfg, 3);
        let x = cube(16, 8, 3, 10.0, 4);
        let z = lnlt_denoise(&x, 2.0, &p, &cfg).unwrap();
        assert_eq!(z.dims(), (16, 8, 3));
        assert!(z.tensor().is_finite());
    }

    #[test]
    fn eta_enters_only_through_its_channel() {
        let cfg = tiny(2);
        let mut p = params(&cfg, 5);
        let x = cube(8, 8, 2, 1.0, 6);
        let a = lnlt_denoise(&x, 0.1, &p, &cfg).unwrap();
        let b = lnlt_denoise(&x, 5.0, &p, &cfg).unwrap();
        assert_ne!(a, b);

        // Zero the embed taps reading the eta channel (input channel index = bands).
        let w = p.get_mut("lnlt.embed.weight").unwrap();
        let cin = 3;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            if i % cin == 2 {
                *v = 0.0;
            }
        }
        let a = lnlt_denoise(&x, 0.1, &p, &cfg).unwrap();
        let b = lnlt_denoise(&x, 5.0, &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_recovered_from_params() {
        let cfg = LnltConfig {
            blocks_per_level: 2,
            heads_per_level: [1, 1, 2],
            ffn_expansion: 3,
            ..tiny(5)
        };
        let mut p = params(&cfg, 0);
        assert_eq!(LnltConfig::from_params(&p).unwrap(), cfg);
        p.insert("lnlt.out.bias", Tensor::zeros(&[4]));
        assert!(LnltConfig::from_params(&p).is_err());
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let cfg = tiny(2);
        let p = params(&cfg, 7);
        assert!(matches!(
            lnlt_denoise(&cube(12, 8, 2, 1.0, 1), 1.0, &p, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn nonlocal_map_size_is_independent_of_image_size() {
        let cfg = tiny(2);
        let p = params(&cfg, 8);
        for side in [8, 16] {
            let maps = attention_maps(&cube(side, side, 2, 1.0, 9), 1.0, &p, &cfg).unwrap();
            for (label, map) in maps {
                if label.starts_with("nonlocal") {
                    let heads = map.shape()[0];
                    assert_eq!(&map.shape()[1..], &[4, 4], "{label}");
                    assert!(heads <= 4);
                }
            }
        }
    }
}
