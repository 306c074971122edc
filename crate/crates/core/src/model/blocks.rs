use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Bindings, Conv, Init, Layers};

pub(crate) const SLOPE: f64 = 0.2;
/// Extra init factor for convolutions inside dense blocks.
const DENSE_INIT: f64 = 0.1;

/// `x + conv2(relu(conv1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn new(prefix: &str, channels: usize) -> Self {
        ResidualBlock {
            conv1: Conv::new(format!("{prefix}.conv1"), channels, channels, 3),
            conv2: Conv::new(format!("{prefix}.conv2"), channels, channels, 3),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, b, h)?;
        tape.add(x, h)
    }
}

impl Layers for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        f(&self.conv1);
        f(&self.conv2);
    }
}

/// Five densely connected convolutions; conv `j` (1-based) reads
/// `channels + (j-1)·growth` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub convs: Vec<Conv>,
    pub beta: f64,
}

impl DenseBlock {
    pub fn new(prefix: &str, channels: usize, growth: usize, beta: f64) -> Self {
        let convs = (1..=5)
            .map(|j| {
                let out = if j == 5 { channels } else { growth };
                Conv::new(format!("{prefix}.conv{j}"), channels + (j - 1) * growth, out, 3)
                    .with_init(Init::FanIn(DENSE_INIT))
            })
            .collect();
        DenseBlock { convs, beta }
    }

    /// `u + β·dense(u)`.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, u: Var) -> Result<Var> {
        let mut feats = vec![u];
        for (j, conv) in self.convs.iter().enumerate() {
            let input = if feats.len() == 1 { u } else { tape.concat(&feats)? };
            let y = conv.forward(tape, b, input)?;
            if j + 1 < self.convs.len() {
                feats.push(tape.leaky_relu(y, SLOPE));
            } else {
                let scaled = tape.scale(y, self.beta);
                return tape.add(u, scaled);
            }
        }
        unreachable!("dense block has five convolutions")
    }
}

impl Layers for DenseBlock {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        self.convs.iter().for_each(f);
    }
}

/// Residual-in-residual dense block: `x + β·DB3(DB2(DB1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rrdb {
    pub blocks: Vec<DenseBlock>,
    pub beta: f64,
}

impl Rrdb {
    pub fn new(prefix: &str, channels: usize, growth: usize, beta: f64) -> Self {
        let blocks = (1..=3).map(|k| DenseBlock::new(&format!("{prefix}.db{k}"), channels, growth, beta)).collect();
        Rrdb { blocks, beta }
    }
}

impl Layers for Rrdb {
    fn visit(&self, f: &mut dyn FnMut(&Conv)) {
        for b in &self.blocks {
            b.visit(f);
        }
    }
}

pub fn rrdb_forward(tape: &mut Tape, b: &Bindings, x: Var, p: &Rrdb) -> Result<Var> {
    let mut h = x;
    for block in &p.blocks {
        h = block.forward(tape, b, h)?;
    }
    let scaled = tape.scale(h, p.beta);
    tape.add(x, scaled)
}
