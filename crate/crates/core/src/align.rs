//! Feature-level alignment of a neighbouring frame to the reference frame
//! through a cascade of modulated deformable convolutions.
//!
//! Each stage concatenates the current neighbour features with the
//! (unchanging) reference features, reduces channels, widens the receptive
//! field with a hierarchical feature fusion block (eight dilated branches,
//! cumulatively summed, concatenated and fused), and predicts per-pixel
//! offsets and modulation scalars for its deformable kernel.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Init, Layers};

/// Taps of the 3×3 deformable kernel.
pub const DEFORM_TAPS: usize = 9;
/// Dilation rates `1..=HFFB_BRANCHES`.
pub const HFFB_BRANCHES: usize = 8;
const SLOPE: f64 = 0.2;

/// Hierarchical feature fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct Hffb {
    /// Branch `r-1` is a 3×3 convolution with dilation `r`.
    pub branches: Vec<Conv>,
    pub fuse: Conv,
}

impl Hffb {
    pub fn new(prefix: &str, channels: usize, branch_channels: usize) -> Self {
        let branches = (1..=HFFB_BRANCHES)
            .map(|r| Conv::new(format!("{prefix}.branch{r}"), channels, branch_channels, 3).dilated(r))
            .collect();
        let fuse = Conv::new(format!("{prefix}.fuse"), HFFB_BRANCHES * branch_channels, channels, 1);
        Hffb { branches, fuse }
    }
}

impl Layers for Hffb {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        self.branches.iter().for_each(&mut *f);
        f(&self.fuse);
    }
}

/// `s_r = d_1 + … + d_r` for every `r`.
pub fn hierarchical_sums(tape: &mut Tape, branch_outputs: &[Var]) -> Result<Vec<Var>> {
    let mut sums: Vec<Var> = Vec::with_capacity(branch_outputs.len());
    for &d in branch_outputs {
        let s = match sums.last() {
            Some(&prev) => tape.add(prev, d)?,
            None => d,
        };
        sums.push(s);
    }
    Ok(sums)
}

/// Branch activations `d_r = lrelu(conv_r(x))`.
pub fn hffb_branches(tape: &mut Tape, b: &Bindings, x: Var, hffb: &Hffb) -> Result<Vec<Var>> {
    hffb.branches
        .iter()
        .map(|conv| {
            let d = conv.forward(tape, b, x)?;
            Ok(tape.leaky_relu(d, SLOPE))
        })
        .collect()
}

/// `x + fuse(concat(s_1, …, s_8))`.
pub fn hffb_forward(tape: &mut Tape, b: &Bindings, x: Var, hffb: &Hffb) -> Result<Var> {
    let d = hffb_branches(tape, b, x, hffb)?;
    let sums = hierarchical_sums(tape, &d)?;
    let cat = tape.concat(&sums)?;
    let fused = hffb.fuse.forward(tape, b, cat)?;
    tape.add(x, fused)
}

/// Receptive-field enlargement inside the sampling-parameter predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum Context {
    Hffb(Hffb),
    /// A single 3×3 convolution in place of the fusion block (ablation).
    Plain(Conv),
}

/// One deformable alignment stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignStage {
    pub reduce: Conv,
    pub context: Context,
    /// Zero-initialised; emits `2K` offset channels then `K` modulation channels.
    pub head: Conv,
    pub deform: Conv,
}

impl AlignStage {
    pub fn new(prefix: &str, channels: usize, branch_channels: usize, use_hffb: bool) -> Self {
        let context = if use_hffb {
            Context::Hffb(Hffb::new(&format!("{prefix}.hffb"), channels, branch_channels))
        } else {
            Context::Plain(Conv::new(format!("{prefix}.conv"), channels, channels, 3))
        };
        AlignStage {
            reduce: Conv::new(format!("{prefix}.reduce"), 2 * channels, channels, 3),
            context,
            head: Conv::new(format!("{prefix}.head"), channels, 3 * DEFORM_TAPS, 3).with_init(Init::Zero),
            deform: Conv::new(format!("{prefix}.deform"), channels, channels, 3),
        }
    }
}

impl Layers for AlignStage {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        f(&self.reduce);
        match &self.context {
            Context::Hffb(h) => h.visit(f),
            Context::Plain(c) => f(c),
        }
        f(&self.head);
        f(&self.deform);
    }
}

/// Sampling field as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `(2K, H, W)`, `(Δy, Δx)` per tap.
    pub offsets: Var,
    /// `(K, H, W)` after the sigmoid, so strictly inside `(0, 1)`.
    pub modulation: Var,
}

/// Predicts offsets and modulation from `concat(f_i, f_t)`.
pub fn predict_field(tape: &mut Tape, b: &Bindings, f_i: Var, f_t: Var, stage: &AlignStage) -> Result<FieldVars> {
    if tape.shape(f_i) != tape.shape(f_t) {
        return Err(Error::shape("predict_field", format!("{:?} vs {:?}", tape.shape(f_i), tape.shape(f_t))));
    }
    let cat = tape.concat(&[f_i, f_t])?;
    let reduced = stage.reduce.forward(tape, b, cat)?;
    let reduced = tape.leaky_relu(reduced, SLOPE);
    let ctx = match &stage.context {
        Context::Hffb(h) => hffb_forward(tape, b, reduced, h)?,
        Context::Plain(c) => {
            let y = c.forward(tape, b, reduced)?;
            tape.leaky_relu(y, SLOPE)
        }
    };
    let head = stage.head.forward(tape, b, ctx)?;
    let offsets = tape.slice(head, 0, 2 * DEFORM_TAPS)?;
    let logits = tape.slice(head, 2 * DEFORM_TAPS, DEFORM_TAPS)?;
    let modulation = tape.sigmoid(logits);
    Ok(FieldVars { offsets, modulation })
}

/// Deformable convolution of `f` driven by the predicted field.
pub fn align_stage(tape: &mut Tape, b: &Bindings, f: Var, f_t: Var, stage: &AlignStage) -> Result<Var> {
    let field = predict_field(tape, b, f, f_t, stage)?;
    let conv = &stage.deform;
    tape.deform_conv(f, field.offsets, field.modulation, b.get(&conv.weight_name())?, b.get(&conv.bias_name())?, 1)
}

/// Runs every stage in order; each one sees the original reference `f_t`.
pub fn align_cascade(tape: &mut Tape, b: &Bindings, f_i: Var, f_t: Var, stages: &[AlignStage]) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::invalid("align_cascade", "no alignment stages"));
    }
    stages.iter().try_fold(f_i, |f, stage| align_stage(tape, b, f, f_t, stage))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::ops::ConvKernel;
    use crate::tensor::Tensor;

    fn stage_params(stage: &AlignStage, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        stage.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn cumulative_sums_of_ones() {
        let mut tape = Tape::new();
        let ones: Vec<Var> = (0..HFFB_BRANCHES).map(|_| tape.constant(Tensor::ones(&[2, 3, 3]))).collect();
        let sums = hierarchical_sums(&mut tape, &ones).unwrap();
        for (r, s) in sums.iter().enumerate() {
            assert!(tape.value(*s).data().iter().all(|&v| v == (r + 1) as f64));
        }
    }

    #[test]
    fn zero_fuse_is_identity() {
        let h = Hffb::new("h", 4, 2);
        let mut store = ParamStore::new();
        h.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        store.set_conv_kernel(&h.fuse, &ConvKernel::zeros(4, 16, 1, 1));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::randn(&[4, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let y = hffb_forward(&mut tape, &b, x, &h).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn predictor_starts_at_standard_convolution() {
        let stage = AlignStage::new("s", 4, 2, true);
        let store = stage_params(&stage, 5);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fi = tape.constant(Tensor::randn(&[4, 5, 5], 1.0, &mut rng));
        let ft = tape.constant(Tensor::randn(&[4, 5, 5], 1.0, &mut rng));
        let field = predict_field(&mut tape, &b, fi, ft, &stage).unwrap();
        assert_eq!(tape.shape(field.offsets), &[18, 5, 5]);
        assert!(tape.value(field.offsets).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(field.modulation).data().iter().all(|&v| v == 0.5));
        assert_eq!(stage.head.out_ch, 27);

        let bad = tape.constant(Tensor::zeros(&[4, 5, 4]));
        assert!(predict_field(&mut tape, &b, fi, bad, &stage).is_err());
    }

    #[test]
    fn identity_deform_halves_input_and_keeps_reference() {
        let stage = AlignStage::new("s", 3, 2, true);
        let mut store = stage_params(&stage, 7);
        store.set_conv_kernel(&stage.deform, &ConvKernel::identity(3, 3));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fi = tape.constant(Tensor::randn(&[3, 4, 6], 1.0, &mut rng));
        let ft_value = Tensor::randn(&[3, 4, 6], 1.0, &mut rng);
        let ft = tape.constant(ft_value.clone());
        let out = align_cascade(&mut tape, &b, fi, ft, std::slice::from_ref(&stage)).unwrap();
        let expect = tape.value(fi).map(|v| 0.5 * v);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-15);
        assert_eq!(tape.value(ft), &ft_value);
        assert!(align_cascade(&mut tape, &b, fi, ft, &[]).is_err());
    }

    #[test]
    fn cascade_preserves_shape_for_every_depth() {
        for depth in 1..=5 {
            let stages: Vec<AlignStage> = (0..depth).map(|k| AlignStage::new(&format!("a{k}"), 2, 2, depth % 2 == 0)).collect();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            stages.iter().for_each(|s| s.init_params(&mut store, &mut rng));
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let fi = tape.constant(Tensor::randn(&[2, 4, 5], 1.0, &mut rng));
            let ft = tape.constant(Tensor::randn(&[2, 4, 5], 1.0, &mut rng));
            let out = align_cascade(&mut tape, &b, fi, ft, &stages).unwrap();
            assert_eq!(tape.shape(out), &[2, 4, 5]);
        }
    }
}
