//! Full network: two encoders, per-stage fusion and the decoder.

use alloc::format;

use crate::decoder::{Decoder, SaliencyOutput};
use crate::encoders::{replicate_channels, DepthEncoder, RgbEncoder, StageContract};
use crate::fusion::{ConcatFusion, Hocf, Hosf, StageFusion};
use crate::nn::{init, Mode, ParamStore, Pass};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Which fusion block runs at which stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionVariant {
    /// Spatial fusion at stages 1–2, channel fusion at stages 3–4.
    #[default]
    Full,
    /// Concatenation replaces the spatial blocks.
    WithoutHosf,
    /// Concatenation replaces the channel blocks.
    WithoutHocf,
    /// Channel fusion at stages 1–2, spatial fusion at stages 3–4.
    Swapped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub contract: StageContract,
    pub fusion_widths: [usize; 4],
    pub decoder_width: usize,
    pub variant: FusionVariant,
    /// Column maxima ahead of row maxima in the channel descriptor.
    pub swap_pools: bool,
}

impl ModelConfig {
    /// Toy widths, fusion widths equal to the RGB widths, `D = 32`.
    pub fn toy(input_size: (usize, usize)) -> Result<Self> {
        let contract = StageContract::toy(input_size)?;
        Ok(ModelConfig {
            fusion_widths: contract.rgb_channels,
            contract,
            decoder_width: 32,
            variant: FusionVariant::Full,
            swap_pools: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.contract.validate()?;
        if self.fusion_widths.contains(&0) || self.decoder_width == 0 {
            return Err(Error::Config("fusion and decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Layer structure without parameter values.
#[derive(Clone, Debug)]
pub struct Network {
    pub rgb: RgbEncoder,
    pub depth: DepthEncoder,
    pub fusion: [StageFusion; 4],
    pub decoder: Decoder,
}

impl Network {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::rng(seed);
        let c = &cfg.contract;
        let rgb = RgbEncoder::new(store, "rgb", c.rgb_channels, &mut rng);
        let depth = DepthEncoder::new(store, "depth", c.depth_channels, &mut rng);
        let fusion = core::array::from_fn(|i| {
            let name = format!("fusion{}", i + 1);
            let (cr, cd, w) = (c.rgb_channels[i], c.depth_channels[i], cfg.fusion_widths[i]);
            let early = i < 2;
            let spatial = |store: &mut ParamStore, rng: &mut init::InitRng| StageFusion::Spatial(Hosf::new(store, &name, cr, cd, w, rng));
            let channel = |store: &mut ParamStore, rng: &mut init::InitRng| {
                let mut b = Hocf::new(store, &name, cr, cd, w, rng);
                b.swap_pools = cfg.swap_pools;
                StageFusion::Channel(b)
            };
            let concat = |store: &mut ParamStore, rng: &mut init::InitRng| StageFusion::Concat(ConcatFusion::new(store, &name, cr, cd, w, rng));
            match (cfg.variant, early) {
                (FusionVariant::Full, true) | (FusionVariant::WithoutHocf, true) | (FusionVariant::Swapped, false) => {
                    spatial(store, &mut rng)
                }
                (FusionVariant::Full, false) | (FusionVariant::WithoutHosf, false) | (FusionVariant::Swapped, true) => {
                    channel(store, &mut rng)
                }
                (FusionVariant::WithoutHosf, true) | (FusionVariant::WithoutHocf, false) => concat(store, &mut rng),
            }
        });
        let decoder = Decoder::new(store, "decoder", cfg.fusion_widths, cfg.decoder_width, &mut rng);
        Ok(Network {
            rgb,
            depth,
            fusion,
            decoder,
        })
    }

    /// `rgb` is `(n, 3, H, W)`; `depth` is `(n, 1, H, W)` or already
    /// replicated to three channels.
    pub fn forward(&self, p: &mut Pass, rgb: Var, depth: Var) -> Result<SaliencyOutput> {
        let depth = if p.graph.shape(depth).c() == 1 {
            replicate_channels(p, depth)?
        } else {
            depth
        };
        let s = p.graph.shape(rgb);
        let fr = self.rgb.forward(p, rgb)?;
        let fd = self.depth.forward(p, depth)?;
        let mut fused = fr.f;
        for i in 0..4 {
            fused[i] = self.fusion[i].forward(p, fr.f[i], fd.f[i])?;
        }
        self.decoder.forward(p, fused, (s.h(), s.w()))
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(&config, &mut store, seed)?;
        Ok(Model { config, store, net })
    }

    pub fn forward(&mut self, g: &mut Graph, rgb: Var, depth: Var, mode: Mode) -> Result<SaliencyOutput> {
        let mut p = Pass::new(g, &mut self.store, mode);
        self.net.forward(&mut p, rgb, depth)
    }
}
