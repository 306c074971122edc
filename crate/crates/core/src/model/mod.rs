//! The full network: shared feature extraction, per-neighbour alignment and
//! non-local attention, temporal fusion, RRDB trunk with a global skip from
//! the reference features, and sub-pixel reconstruction.

mod blocks;
mod config;

pub use blocks::{rrdb_forward, DenseBlock, ResidualBlock, Rrdb};
pub use config::{ModelConfig, Preset, TrunkKind};
pub(crate) use config::parse_kv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{align_cascade, AlignStage};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Layers, ParamStore};
use crate::nonlocal::{nonlocal_forward, NonLocal};
use crate::pipeline::{Frame, FrameSequence};
use crate::tensor::Tensor;

use blocks::SLOPE;

/// Subtracted from input pixels and added back to the output, so the
/// network works on values centred at zero.
pub const PIXEL_MEAN: f64 = 0.5;

/// Shallow feature extractor shared by all input frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub conv0: Conv,
    pub blocks: Vec<ResidualBlock>,
}

impl Layers for Extractor {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        f(&self.conv0);
        for b in &self.blocks {
            b.visit(f);
        }
    }
}

impl Extractor {
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, frame: Var) -> Result<Var> {
        let mut h = self.conv0.forward(tape, b, frame)?;
        for block in &self.blocks {
            h = block.forward(tape, b, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trunk {
    Rrdb(Vec<Rrdb>),
    Residual(Vec<ResidualBlock>),
}

/// Network architecture; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dnln {
    pub config: ModelConfig,
    pub extract: Extractor,
    pub align: Vec<AlignStage>,
    pub nonlocal: Option<NonLocal>,
    pub fusion: Conv,
    pub trunk: Trunk,
    /// Closes the trunk before the global skip.
    pub trunk_conv: Conv,
    pub up: Vec<Conv>,
    pub head: Conv,
}

impl Layers for Dnln {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        self.extract.visit(f);
        for s in &self.align {
            s.visit(f);
        }
        if let Some(nl) = &self.nonlocal {
            nl.visit(f);
        }
        f(&self.fusion);
        match &self.trunk {
            Trunk::Rrdb(blocks) => blocks.iter().for_each(|b| b.visit(f)),
            Trunk::Residual(blocks) => blocks.iter().for_each(|b| b.visit(f)),
        }
        f(&self.trunk_conv);
        self.up.iter().for_each(&mut *f);
        f(&self.head);
    }
}

/// Intermediate tape variables of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Extracted features, one per input frame.
    pub features: Vec<Var>,
    /// Neighbour features after alignment and attention, in frame order with
    /// `None` at the reference slot.
    pub neighbours: Vec<Option<Var>>,
    pub fused: Var,
    /// `trunk(fused) + F_t`, the input of the upsampler.
    pub upsampler_input: Var,
    pub output: Var,
}

/// Parameter group of a parameter name (its first dotted component).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl Dnln {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let extract = Extractor {
            conv0: Conv::new("extract.conv0", 3, c, 3),
            blocks: (0..config.n_res).map(|k| ResidualBlock::new(&format!("extract.res{k}"), c)).collect(),
        };
        let align = if config.use_align {
            (0..config.n_dconv)
                .map(|k| AlignStage::new(&format!("align.stage{k}"), c, config.hffb_channels, config.use_hffb))
                .collect()
        } else {
            Vec::new()
        };
        let nonlocal = config.use_nonlocal.then(|| NonLocal::new("nonlocal", c, config.embed_channels));
        let trunk = match config.trunk {
            TrunkKind::Rrdb => Trunk::Rrdb(
                (0..config.n_rrdb).map(|k| Rrdb::new(&format!("trunk.rrdb{k}"), c, config.growth, config.beta)).collect(),
            ),
            TrunkKind::Residual => {
                Trunk::Residual((0..config.n_rrdb).map(|k| ResidualBlock::new(&format!("trunk.res{k}"), c)).collect())
            }
        };
        let up = (0..config.up_stages()).map(|s| Conv::new(format!("up.{s}"), c, 4 * c, 3)).collect();
        Ok(Dnln {
            extract,
            align,
            nonlocal,
            fusion: Conv::new("fusion", config.frames() * c, c, 3),
            trunk,
            trunk_conv: Conv::new("trunk.conv", c, c, 3),
            up,
            head: Conv::new("head", c, 3, 3),
            config,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Layers::init_params(self, &mut store, &mut rng);
        store
    }

    /// Every parameter name this architecture reads, in visiting order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |c| {
            names.push(c.weight_name());
            names.push(c.bias_name());
        });
        names
    }

    /// Checks that `params` holds exactly this architecture's tensors.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let mut expected = 0;
        let mut err = None;
        self.visit(&mut |c| {
            expected += 2;
            let shapes = [(c.weight_name(), c.weight_shape().to_vec()), (c.bias_name(), vec![c.out_ch])];
            for (name, shape) in shapes {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        err.get_or_insert(Error::shape("parameters", format!("`{name}` is {:?}, need {shape:?}", t.shape())));
                    }
                    None => {
                        err.get_or_insert(Error::invalid("parameters", format!("missing `{name}`")));
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if params.len() != expected {
            return Err(Error::invalid("parameters", format!("{} tensors, architecture has {expected}", params.len())));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, frames: &[Var]) -> Result<Var> {
        Ok(self.forward_trace(tape, b, frames)?.output)
    }

    /// Forward pass over `2N+1` frame variables `(3, H, W)`, reference in
    /// the centre.
    pub fn forward_trace(&self, tape: &mut Tape, b: &Bindings, frames: &[Var]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if frames.len() != cfg.frames() {
            return Err(Error::shape(
                "forward",
                format!("{} frames for temporal radius {} (need {})", frames.len(), cfg.radius, cfg.frames()),
            ));
        }
        let first = tape.shape(frames[0]).to_vec();
        if first.len() != 3 || first[0] != 3 || frames.iter().any(|&f| tape.shape(f) != first.as_slice()) {
            return Err(Error::shape("forward", "frames must share one (3, H, W) shape"));
        }

        let shift = tape.constant(Tensor::full(&first, -PIXEL_MEAN));
        let features = frames
            .iter()
            .map(|&f| {
                let centred = tape.add(f, shift)?;
                self.extract.forward(tape, b, centred)
            })
            .collect::<Result<Vec<_>>>()?;
        let center = cfg.radius;
        let f_t = features[center];

        let mut neighbours = Vec::with_capacity(features.len());
        for (i, &f_i) in features.iter().enumerate() {
            if i == center {
                neighbours.push(None);
                continue;
            }
            let aligned = if self.align.is_empty() { f_i } else { align_cascade(tape, b, f_i, f_t, &self.align)? };
            let attended = match &self.nonlocal {
                Some(nl) => nonlocal_forward(tape, b, aligned, f_t, nl)?,
                None => aligned,
            };
            neighbours.push(Some(attended));
        }

        let ordered: Vec<Var> = neighbours.iter().map(|n| n.unwrap_or(f_t)).collect();
        let cat = tape.concat(&ordered)?;
        let fused = self.fusion.forward(tape, b, cat)?;

        let mut h = fused;
        match &self.trunk {
            Trunk::Rrdb(blocks) => {
                for blk in blocks {
                    h = rrdb_forward(tape, b, h, blk)?;
                }
            }
            Trunk::Residual(blocks) => {
                for blk in blocks {
                    h = blk.forward(tape, b, h)?;
                }
            }
        }
        let h = self.trunk_conv.forward(tape, b, h)?;
        let upsampler_input = tape.add(h, f_t)?;

        let mut h = upsampler_input;
        for conv in &self.up {
            let y = conv.forward(tape, b, h)?;
            let y = tape.pixel_shuffle(y, 2)?;
            h = tape.leaky_relu(y, SLOPE);
        }
        let h = self.head.forward(tape, b, h)?;
        let out_shape = tape.shape(h).to_vec();
        let unshift = tape.constant(Tensor::full(&out_shape, PIXEL_MEAN));
        let output = tape.add(h, unshift)?;
        Ok(ForwardTrace { features, neighbours, fused, upsampler_input, output })
    }

    /// Inference on one window; the output is not clamped.
    pub fn upscale(&self, params: &ParamStore, lr_frames: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let frames: Vec<Var> = lr_frames.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.forward(&mut tape, &b, &frames)?;
        Ok(tape.value(out).clone())
    }

    /// Super-resolves the reference frame of `seq`.
    pub fn upscale_sequence(&self, params: &ParamStore, seq: &FrameSequence) -> Result<Frame> {
        if seq.radius != self.config.radius || seq.scale != self.config.scale {
            return Err(Error::invalid(
                "forward",
                format!(
                    "sequence (radius {}, scale {}) does not match model (radius {}, scale {})",
                    seq.radius, seq.scale, self.config.radius, self.config.scale
                ),
            ));
        }
        let frames: Vec<Tensor> = seq.lr_frames.iter().map(|f| f.pixels().clone()).collect();
        Frame::rgb(self.upscale(params, &frames)?)
    }
}
