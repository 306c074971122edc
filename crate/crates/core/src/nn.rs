//! Named parameters and the convolution layer descriptor every block uses.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvKernel;
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.set_requires_grad(true);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid("ParamStore", format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Pushes every parameter onto `tape` as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect();
        Bindings { vars }
    }

    /// Pushes every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.constant(t.clone()))).collect();
        Bindings { vars }
    }

    /// Adds the gradients of a backward pass into each parameter's slot.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(g) = bindings.vars.get(name).and_then(|v| grads.get(*v)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn conv_kernel(&self, conv: &Conv) -> Result<ConvKernel> {
        ConvKernel::new(
            self.require(&conv.weight_name())?.clone(),
            self.require(&conv.bias_name())?.clone(),
            conv.dilation,
        )
    }

    pub fn set_conv_kernel(&mut self, conv: &Conv, kernel: &ConvKernel) {
        self.insert(conv.weight_name(), kernel.weight.clone());
        self.insert(conv.bias_name(), kernel.bias.clone());
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid("Bindings", format!("unbound parameter `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)` times the given factor.
    FanIn(f64),
    Zero,
}

/// A named same-padded convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
    pub init: Init,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv { name: name.into(), in_ch, out_ch, k, dilation: 1, init: Init::FanIn(1.0) }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.k, self.k]
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let shape = self.weight_shape();
        let weight = match self.init {
            Init::FanIn(factor) => {
                let fan_in = (self.in_ch * self.k * self.k) as f64;
                Tensor::randn(&shape, factor * (2.0 / fan_in).sqrt(), rng)
            }
            Init::Zero => Tensor::zeros(&shape),
        };
        store.insert(self.weight_name(), weight);
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, b.get(&self.weight_name())?, b.get(&self.bias_name())?, self.dilation)
    }
}

/// Anything built from named convolutions.
pub trait Layers {
    fn visit(&self, f: &mut dyn FnMut(&Conv));

    fn convs(&self) -> Vec<Conv> {
        let mut out = Vec::new();
        self.visit(&mut |c| out.push(c.clone()));
        out
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng)
    where
        Self: Sized,
    {
        self.visit(&mut |c| c.init_params(store, rng));
    }
}

impl Layers for Conv {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        f(self)
    }
}
