//! Central finite-difference checks of every recorded operation and of the
//! composite blocks.
//!
//! Each check reduces the output to `Σ y ⊙ R` for a fixed random `R`, so
//! arbitrary upstream gradients are exercised. The error of one coordinate
//! is `|a − n| / max(|a|, |n|, 1e-3)` for analytic `a` and numeric `n`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{align_stage, hffb_forward, AlignStage, Hffb};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{rrdb_forward, Rrdb};
use crate::nn::{Bindings, Layers, ParamStore};
use crate::nonlocal::{nonlocal_forward, NonLocal};
use crate::tensor::Tensor;
use crate::train::sub_seed;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
/// Coordinates probed per input tensor of a composite block.
const COMPOSITE_SAMPLES: usize = 16;

pub const SUITES: &[&str] = &[
    "elementwise",
    "reductions",
    "shape",
    "conv2d",
    "pixel_shuffle",
    "softmax",
    "bilinear",
    "deform",
    "hffb",
    "align",
    "nonlocal",
    "rrdb",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

struct Checker<'a> {
    name: String,
    inputs: Vec<Tensor>,
    build: Box<Build<'a>>,
    tolerance: f64,
    /// Per-tensor coordinate budget; `None` probes everything.
    samples: Option<usize>,
}

impl<'a> Checker<'a> {
    fn new(name: impl Into<String>, inputs: Vec<Tensor>, tolerance: f64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a) -> Self {
        Checker { name: name.into(), inputs, build: Box::new(build), tolerance, samples: None }
    }

    fn sampled(mut self, n: usize) -> Self {
        self.samples = Some(n);
        self
    }

    fn objective(&self, tape: &mut Tape, vars: &[Var], weights: &Tensor) -> Result<Var> {
        let y = (self.build)(tape, vars)?;
        let r = tape.constant(weights.clone());
        let prod = tape.mul(y, r)?;
        Ok(tape.sum(prod))
    }

    fn loss(&self, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = self.objective(&mut tape, &vars, weights)?;
        Ok(tape.value(l).item())
    }

    fn numeric(&self, inputs: &mut [Tensor], k: usize, i: usize, eps: f64, weights: &Tensor) -> Result<f64> {
        let x0 = inputs[k].data()[i];
        inputs[k].data_mut()[i] = x0 + eps;
        let plus = self.loss(inputs, weights);
        inputs[k].data_mut()[i] = x0 - eps;
        let minus = self.loss(inputs, weights);
        inputs[k].data_mut()[i] = x0;
        Ok((plus? - minus?) / (2.0 * eps))
    }

    fn run(self, rng: &mut impl Rng) -> Result<CheckResult> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let shape = {
            let mut probe = Tape::new();
            let pv: Vec<Var> = self.inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let y = (self.build)(&mut probe, &pv)?;
            probe.shape(y).to_vec()
        };
        let weights = Tensor::uniform(&shape, -1.0, 1.0, rng);
        let loss = self.objective(&mut tape, &vars, &weights)?;
        let grads = tape.backward(loss)?;

        let mut inputs = self.inputs.clone();
        let (mut worst, mut checked) = (0.0f64, 0);
        for (k, v) in vars.iter().enumerate() {
            let n = inputs[k].numel();
            let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let coords: Vec<usize> = match self.samples {
                Some(s) if s < n => sample(rng, n, s).into_vec(),
                _ => (0..n).collect(),
            };
            for i in coords {
                let a = analytic[i];
                let rel = |num: f64| (a - num).abs() / a.abs().max(num.abs()).max(FLOOR);
                let mut err = rel(self.numeric(&mut inputs, k, i, EPS, &weights)?);
                if err > self.tolerance {
                    // a kink of a piecewise-linear activation inside the
                    // stencil; a narrower stencil steps off it
                    err = err.min(rel(self.numeric(&mut inputs, k, i, EPS / 10.0, &weights)?));
                }
                worst = worst.max(err);
                checked += 1;
            }
        }
        Ok(CheckResult { name: self.name, max_rel_err: worst, tolerance: self.tolerance, checked })
    }
}

/// Normal values pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Values whose fractional part lies in `[0.1, 0.9]`.
fn off_integer(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let whole = Tensor::uniform(shape, lo, hi, rng).map(f64::floor);
    let frac = Tensor::uniform(shape, 0.1, 0.9, rng);
    Tensor::from_fn(shape, |i| whole.data()[i] + frac.data()[i])
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let t = |rng: &mut ChaCha8Rng| Tensor::randn(&[2, 3, 4], 1.0, rng);
    let checks = vec![
        Checker::new("add", vec![t(rng), t(rng)], PRIMITIVE_TOL, |tp, v| tp.add(v[0], v[1])),
        Checker::new("sub", vec![t(rng), t(rng)], PRIMITIVE_TOL, |tp, v| tp.sub(v[0], v[1])),
        Checker::new("mul", vec![t(rng), t(rng)], PRIMITIVE_TOL, |tp, v| tp.mul(v[0], v[1])),
        Checker::new("scale", vec![t(rng)], PRIMITIVE_TOL, |tp, v| Ok(tp.scale(v[0], -1.7))),
        Checker::new("leaky_relu", vec![away_from_zero(&[2, 3, 4], 0.05, rng)], PRIMITIVE_TOL, |tp, v| {
            Ok(tp.leaky_relu(v[0], 0.2))
        }),
        Checker::new("relu", vec![away_from_zero(&[2, 3, 4], 0.05, rng)], PRIMITIVE_TOL, |tp, v| Ok(tp.relu(v[0]))),
        Checker::new("sigmoid", vec![t(rng)], PRIMITIVE_TOL, |tp, v| Ok(tp.sigmoid(v[0]))),
    ];
    checks.into_iter().map(|c| c.run(rng)).collect()
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let t = Tensor::randn(&[3, 5], 1.0, rng);
    let checks = vec![
        Checker::new("sum", vec![t.clone()], PRIMITIVE_TOL, |tp, v| Ok(tp.sum(v[0]))),
        Checker::new("mean", vec![t.clone()], PRIMITIVE_TOL, |tp, v| Ok(tp.mean(v[0]))),
        Checker::new("abs_mean", vec![away_from_zero(&[3, 5], 0.05, rng)], PRIMITIVE_TOL, |tp, v| Ok(tp.abs_mean(v[0]))),
        Checker::new("sq_mean", vec![t], PRIMITIVE_TOL, |tp, v| Ok(tp.sq_mean(v[0]))),
    ];
    checks.into_iter().map(|c| c.run(rng)).collect()
}

fn shape_ops(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let checks = vec![
        Checker::new(
            "concat",
            vec![Tensor::randn(&[2, 3, 3], 1.0, rng), Tensor::randn(&[1, 3, 3], 1.0, rng), Tensor::randn(&[3, 3, 3], 1.0, rng)],
            PRIMITIVE_TOL,
            |tp, v| tp.concat(v),
        ),
        Checker::new("slice", vec![Tensor::randn(&[5, 2, 3], 1.0, rng)], PRIMITIVE_TOL, |tp, v| tp.slice(v[0], 1, 3)),
        Checker::new("reshape", vec![Tensor::randn(&[2, 6], 1.0, rng)], PRIMITIVE_TOL, |tp, v| tp.reshape(v[0], &[3, 4])),
        Checker::new("transpose", vec![Tensor::randn(&[3, 5], 1.0, rng)], PRIMITIVE_TOL, |tp, v| tp.transpose(v[0])),
        Checker::new(
            "matmul",
            vec![Tensor::randn(&[3, 4], 1.0, rng), Tensor::randn(&[4, 5], 1.0, rng)],
            PRIMITIVE_TOL,
            |tp, v| tp.matmul(v[0], v[1]),
        ),
    ];
    checks.into_iter().map(|c| c.run(rng)).collect()
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    [(3, 1), (3, 2), (1, 1), (5, 1)]
        .into_iter()
        .map(|(k, d)| {
            let inputs = vec![
                Tensor::randn(&[2, 5, 6], 1.0, rng),
                Tensor::randn(&[3, 2, k, k], 0.5, rng),
                Tensor::randn(&[3], 0.5, rng),
            ];
            Checker::new(format!("conv2d k{k} d{d}"), inputs, PRIMITIVE_TOL, move |tp, v| tp.conv2d(v[0], v[1], v[2], d))
                .run(rng)
        })
        .collect()
}

fn pixel_shuffle(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let c = Checker::new("pixel_shuffle", vec![Tensor::randn(&[8, 3, 2], 1.0, rng)], PRIMITIVE_TOL, |tp, v| {
        tp.pixel_shuffle(v[0], 2)
    });
    Ok(vec![c.run(rng)?])
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let checks = vec![
        Checker::new("softmax axis 1", vec![Tensor::randn(&[4, 5], 2.0, rng)], PRIMITIVE_TOL, |tp, v| tp.softmax(v[0], 1)),
        Checker::new("softmax axis 0", vec![Tensor::randn(&[4, 5], 2.0, rng)], PRIMITIVE_TOL, |tp, v| tp.softmax(v[0], 0)),
        Checker::new("softmax rank 3", vec![Tensor::randn(&[2, 3, 4], 2.0, rng)], PRIMITIVE_TOL, |tp, v| tp.softmax(v[0], 1)),
    ];
    checks.into_iter().map(|c| c.run(rng)).collect()
}

fn bilinear(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let feat = Tensor::randn(&[2, 4, 5], 1.0, rng);
    // coordinates straddle the border so partially outside samples count
    let coords = off_integer(&[6, 2], -1.0, 5.0, rng);
    let c = Checker::new("bilinear_sample", vec![feat, coords], PRIMITIVE_TOL, |tp, v| {
        let samples = (0..6)
            .map(|i| {
                let row = tp.slice(v[1], i, 1)?;
                let yx = tp.reshape(row, &[2])?;
                tp.bilinear_sample(v[0], yx)
            })
            .collect::<Result<Vec<_>>>()?;
        tp.concat(&samples)
    });
    Ok(vec![c.run(rng)?])
}

fn deform(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    [1usize, 2]
        .into_iter()
        .map(|d| {
            let (c, h, w, o) = (2, 4, 5, 3);
            let inputs = vec![
                Tensor::randn(&[c, h, w], 1.0, rng),
                off_integer(&[18, h, w], -2.0, 2.0, rng),
                Tensor::uniform(&[9, h, w], 0.05, 0.95, rng),
                Tensor::randn(&[o, c, 3, 3], 0.5, rng),
                Tensor::randn(&[o], 0.5, rng),
            ];
            Checker::new(format!("deform_conv d{d}"), inputs, PRIMITIVE_TOL, move |tp, v| {
                tp.deform_conv(v[0], v[1], v[2], v[3], v[4], d)
            })
            .run(rng)
        })
        .collect()
}

/// Inputs `[extra..., params...]` and a builder that rebinds the params.
fn with_params(extra: Vec<Tensor>, store: &ParamStore) -> (Vec<Tensor>, Vec<String>) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    (inputs, names)
}

fn rebind(names: &[String], vars: &[Var]) -> Bindings {
    Bindings::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

fn randomise_biases(layers: &impl Layers, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for c in layers.convs() {
        store.insert(c.bias_name(), Tensor::randn(&[c.out_ch], 0.1, rng));
    }
}

fn hffb(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let block = Hffb::new("h", 2, 1);
    let mut store = ParamStore::new();
    block.init_params(&mut store, rng);
    randomise_biases(&block, &mut store, rng);
    // dilations up to 8 need room
    let (inputs, names) = with_params(vec![Tensor::randn(&[2, 9, 9], 1.0, rng)], &store);
    let c = Checker::new("hffb", inputs, COMPOSITE_TOL, |tp, v| hffb_forward(tp, &rebind(&names, &v[1..]), v[0], &block))
        .sampled(COMPOSITE_SAMPLES);
    Ok(vec![c.run(rng)?])
}

fn align(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for use_hffb in [true, false] {
        let stage = AlignStage::new("a", 2, 1, use_hffb);
        let mut store = ParamStore::new();
        stage.init_params(&mut store, rng);
        randomise_biases(&stage, &mut store, rng);
        // half-pixel offsets with small slopes keep samples off the grid
        let head = stage.head.clone();
        store.insert(head.weight_name(), Tensor::randn(&head.weight_shape(), 0.002, rng));
        let bias = Tensor::from_fn(&[head.out_ch], |i| if i < 18 { 0.5 } else { 0.3 });
        store.insert(head.bias_name(), bias);
        let extra = vec![Tensor::randn(&[2, 5, 5], 1.0, rng), Tensor::randn(&[2, 5, 5], 1.0, rng)];
        let (inputs, names) = with_params(extra, &store);
        let name = if use_hffb { "align stage" } else { "align stage (plain context)" };
        let c = Checker::new(name, inputs, COMPOSITE_TOL, |tp, v| {
            align_stage(tp, &rebind(&names, &v[2..]), v[0], v[1], &stage)
        })
        .sampled(COMPOSITE_SAMPLES);
        out.push(c.run(rng)?);
    }
    Ok(out)
}

fn nonlocal(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let block = NonLocal::new("n", 3, 2);
    let mut store = ParamStore::new();
    block.init_params(&mut store, rng);
    randomise_biases(&block, &mut store, rng);
    let extra = vec![Tensor::randn(&[3, 3, 4], 1.0, rng), Tensor::randn(&[3, 3, 4], 1.0, rng)];
    let (inputs, names) = with_params(extra, &store);
    let c = Checker::new("nonlocal", inputs, COMPOSITE_TOL, |tp, v| {
        nonlocal_forward(tp, &rebind(&names, &v[2..]), v[0], v[1], &block)
    })
    .sampled(COMPOSITE_SAMPLES);
    Ok(vec![c.run(rng)?])
}

fn rrdb(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let block = Rrdb::new("r", 3, 2, 0.2);
    let mut store = ParamStore::new();
    block.init_params(&mut store, rng);
    randomise_biases(&block, &mut store, rng);
    let (inputs, names) = with_params(vec![Tensor::randn(&[3, 4, 4], 1.0, rng)], &store);
    let c = Checker::new("rrdb", inputs, COMPOSITE_TOL, |tp, v| rrdb_forward(tp, &rebind(&names, &v[1..]), v[0], &block))
        .sampled(COMPOSITE_SAMPLES);
    Ok(vec![c.run(rng)?])
}

/// Runs one suite from [`SUITES`], or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckResult>> {
    if name == "all" {
        let mut out = Vec::new();
        for s in SUITES {
            out.extend(run_suite(s, seed)?);
        }
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, name, 0));
    let rng = &mut rng;
    match name {
        "elementwise" => elementwise(rng),
        "reductions" => reductions(rng),
        "shape" => shape_ops(rng),
        "conv2d" => conv2d(rng),
        "pixel_shuffle" => pixel_shuffle(rng),
        "softmax" => softmax(rng),
        "bilinear" => bilinear(rng),
        "deform" => deform(rng),
        "hffb" => hffb(rng),
        "align" => align(rng),
        "nonlocal" => nonlocal(rng),
        "rrdb" => rrdb(rng),
        _ => Err(Error::invalid("gradcheck", format!("unknown suite `{name}` (expected all|{})", SUITES.join("|")))),
    }
}
