//! Optimisation: losses, Adam, the step-decay schedule, synthetic data and
//! the batch training loop.

mod adam;
mod loss;
mod schedule;
mod synth;

pub use adam::{adam_step, AdamState};
pub use loss::{l1_loss, l2_loss, Loss};
pub use schedule::Schedule;
pub use synth::{synth_dataset, SynthSample, SynthSpec, Texture};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Dnln, ModelConfig};
use crate::nn::ParamStore;
use crate::pipeline::{augment, AugmentOp, FrameSequence};

/// Derives an independent seed for one named consumer of randomness.
pub fn sub_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub loss: Loss,
    pub seed: u64,
    pub schedule: Schedule,
    /// Side of the random low-resolution crop; `None` trains on whole frames.
    pub patch: Option<usize>,
    /// Random flips and quarter turns.
    pub augment: bool,
    /// Stop once this many steps have run in total.
    pub max_steps: Option<u64>,
    /// Save `out_dir/checkpoint` every this many steps.
    pub checkpoint_every: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch: 8,
            loss: Loss::L1,
            seed: 0,
            schedule: Schedule::default(),
            patch: None,
            augment: true,
            max_steps: None,
            checkpoint_every: None,
            out_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const TRACE_HEADER: &str = "step,epoch,lr,loss";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:e},{:?}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// Writes (or appends to) a `step,epoch,lr,loss` file.
pub fn write_trace(path: &Path, rows: &[TraceRow], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(TRACE_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct Trainer {
    pub model: Dnln,
    pub params: ParamStore,
    pub adam: AdamState,
    pub opts: TrainOptions,
    /// Steps completed so far, including those before a resume.
    pub step: u64,
    /// Rows produced by this trainer instance.
    pub trace: Vec<TraceRow>,
    resumed: bool,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: ModelConfig, opts: TrainOptions) -> Result<Self> {
        let model = Dnln::new(config)?;
        let params = model.init_params(sub_seed(opts.seed, "init", 0));
        Self::assemble(model, params, AdamState::new(opts.schedule.base_lr), 0, opts, false)
    }

    /// Continues from a checkpoint. The loss may differ from the one the
    /// checkpoint was trained with.
    pub fn from_checkpoint(ck: Checkpoint, opts: TrainOptions) -> Result<Self> {
        let model = Dnln::new(ck.config)?;
        model.check_params(&ck.params)?;
        let step = match ck.state.get("step") {
            Some(s) => s.parse().map_err(|_| Error::invalid("resume", format!("bad step `{s}` in checkpoint")))?,
            None => 0,
        };
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(opts.schedule.base_lr));
        Self::assemble(model, ck.params, adam, step, opts, true)
    }

    fn assemble(model: Dnln, params: ParamStore, adam: AdamState, step: u64, opts: TrainOptions, resumed: bool) -> Result<Self> {
        if opts.batch == 0 {
            return Err(Error::invalid("train", "batch size must be positive"));
        }
        if opts.patch == Some(0) {
            return Err(Error::invalid("train", "patch size must be positive"));
        }
        Ok(Trainer { model, params, adam, opts, step, trace: Vec::new(), resumed, order: None })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.config.clone(), self.params.clone());
        ck.params.zero_grad();
        ck.adam = Some(self.adam.clone());
        ck.state.insert("step".into(), self.step.to_string());
        ck.state.insert("loss".into(), self.opts.loss.to_string());
        ck.state.insert("seed".into(), self.opts.seed.to_string());
        ck
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.opts.batch) as u64
    }

    fn total_steps(&self, n: usize) -> u64 {
        let by_epochs = (self.opts.epochs as u64).saturating_mul(self.batches_per_epoch(n));
        self.opts.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    /// Dataset indices of the batch run at the current step; the last batch
    /// of an epoch is padded from the start of the epoch's order.
    fn batch_indices(&mut self, n: usize) -> (usize, Vec<usize>) {
        let bpe = self.batches_per_epoch(n);
        let epoch = (self.step / bpe) as usize;
        let j = (self.step % bpe) as usize;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.opts.seed, "order", epoch as u64)));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().unwrap().1;
        let b = self.opts.batch;
        (epoch, (0..b).map(|k| perm[(j * b + k) % n]).collect())
    }

    fn prepare(&self, seq: &FrameSequence, slot: u64) -> Result<FrameSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.opts.seed, "augment", self.step * self.opts.batch as u64 + slot));
        let mut ops = Vec::new();
        let (h, w) = seq.lr_size();
        if let Some(p) = self.opts.patch {
            if p < h || p < w {
                let (ph, pw) = (p.min(h), p.min(w));
                ops.push(AugmentOp::Crop { x: rng.random_range(0..=w - pw), y: rng.random_range(0..=h - ph), w: pw, h: ph });
            }
        }
        if self.opts.augment {
            for op in [AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Rot90] {
                if rng.random_bool(0.5) {
                    ops.push(op);
                }
            }
        }
        augment(seq, &ops)
    }

    /// Runs one optimisation step; parameters are untouched on error.
    pub fn train_step(&mut self, data: &[FrameSequence]) -> Result<TraceRow> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let (epoch, indices) = self.batch_indices(data.len());
        let lr = self.opts.schedule.lr_at(epoch);
        let inv_b = 1.0 / indices.len() as f64;
        let mut grads = self.params.clone();
        grads.zero_grad();
        let mut total = 0.0;
        for (slot, &i) in indices.iter().enumerate() {
            let seq = self.prepare(&data[i], slot as u64)?;
            let target = seq
                .hr_target
                .as_ref()
                .ok_or_else(|| Error::invalid("train", format!("sample {i} has no target frame")))?;
            let mut tape = Tape::new();
            let b = grads.bind(&mut tape);
            let frames: Vec<Var> = seq.lr_frames.iter().map(|f| tape.constant(f.pixels().clone())).collect();
            let out = self.model.forward(&mut tape, &b, &frames)?;
            let t = tape.constant(target.pixels().clone());
            let loss = self.opts.loss.on_tape(&mut tape, out, t)?;
            let loss = tape.scale(loss, inv_b);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss of sample {i}")));
            }
            total += value;
            let g = tape.backward(loss)?;
            grads.accumulate(&b, &g);
        }
        self.adam.lr = lr;
        adam_step(&mut grads, &mut self.adam)?;
        grads.zero_grad();
        self.params = grads;
        self.step += 1;
        let row = TraceRow { step: self.step, epoch, lr, loss: total };
        self.trace.push(row);
        Ok(row)
    }

    /// Trains until the epoch budget or `max_steps` is reached. With an
    /// output directory, checkpoints land in `out/checkpoint` and the trace
    /// in `out/loss.csv`.
    pub fn run(&mut self, data: &[FrameSequence]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let total = self.total_steps(data.len());
        let first_row = self.trace.len();
        while self.step < total {
            if let Err(e) = self.train_step(data) {
                return Err(self.diverged(e, first_row));
            }
            if let (Some(k), Some(out)) = (self.opts.checkpoint_every, &self.opts.out_dir) {
                if k > 0 && self.step % k == 0 {
                    self.checkpoint().save(&out.join("checkpoint"))?;
                }
            }
        }
        if let Some(out) = &self.opts.out_dir {
            self.checkpoint().save(&out.join("checkpoint"))?;
            write_trace(&out.join("loss.csv"), &self.trace[first_row..], self.resumed)?;
        }
        Ok(())
    }

    fn diverged(&self, cause: Error, first_row: usize) -> Error {
        if !matches!(cause, Error::NonFinite(_)) {
            return cause;
        }
        let mut last_good = "none".to_string();
        if let Some(out) = &self.opts.out_dir {
            let dir = out.join("last_good");
            if self.checkpoint().save(&dir).is_ok() {
                last_good = dir.display().to_string();
            }
            let _ = write_trace(&out.join("loss.csv"), &self.trace[first_row..], self.resumed);
        }
        Error::Diverged { step: self.step as usize + 1, last_good }
    }
}

/// Reads a `step,epoch,lr,loss` file back.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::format(path, "missing trace header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(path, format!("bad trace row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                loss: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.channels = 4;
        c.growth = 4;
        c.hffb_channels = 2;
        c.embed_channels = 2;
        c.n_rrdb = 1;
        c.n_dconv = 1;
        c
    }

    fn tiny_data(n: usize) -> Vec<FrameSequence> {
        let spec = SynthSpec { count: n, shift_range: 2, seed: 4, lr_height: 6, lr_width: 6, radius: 1, scale: 4 };
        synth_dataset(&spec).unwrap().into_iter().map(|s| s.seq).collect()
    }

    fn opts(seed: u64) -> TrainOptions {
        TrainOptions { batch: 2, seed, schedule: Schedule { base_lr: 1e-3, ..Schedule::default() }, ..TrainOptions::default() }
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, "a", 0), sub_seed(1, "b", 0));
        assert_ne!(sub_seed(1, "a", 0), sub_seed(1, "a", 1));
        assert_ne!(sub_seed(1, "a", 0), sub_seed(2, "a", 0));
        assert_eq!(sub_seed(7, "x", 3), sub_seed(7, "x", 3));
    }

    #[test]
    fn padded_batches_cover_the_epoch() {
        let mut t = Trainer::new(tiny_config(), TrainOptions { batch: 4, ..opts(1) }).unwrap();
        assert_eq!(t.batches_per_epoch(5), 2);
        let (_, a) = t.batch_indices(5);
        t.step = 1;
        let (e, b) = t.batch_indices(5);
        assert_eq!(e, 0);
        let mut seen: Vec<usize> = a.iter().chain(&b[..1]).copied().collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        // padding repeats the head of the permutation
        assert_eq!(&b[1..], &a[..3]);
    }

    #[test]
    fn deterministic_and_lr_zero_is_constant() {
        let data = tiny_data(3);
        let run = |o: TrainOptions| {
            let mut t = Trainer::new(tiny_config(), TrainOptions { max_steps: Some(4), epochs: 10, ..o }).unwrap();
            t.run(&data).unwrap();
            t.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(opts(5)), run(opts(5)));
        let frozen = TrainOptions { augment: false, batch: 3, schedule: Schedule { base_lr: 0.0, ..Schedule::default() }, ..opts(5) };
        let trace: Vec<f64> = run(frozen).into_iter().map(f64::from_bits).collect();
        // the shuffled order changes only the summation order
        assert!(trace.iter().all(|&l| (l - trace[0]).abs() <= 1e-12 * trace[0]));
    }

    #[test]
    fn resume_and_switch_loss() {
        let data = tiny_data(2);
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions { max_steps: Some(2), epochs: 5, out_dir: Some(dir.path().into()), ..opts(8) };
        let mut t = Trainer::new(tiny_config(), o.clone()).unwrap();
        t.run(&data).unwrap();
        let ck = Checkpoint::load(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(ck.params, t.params);
        assert_eq!(ck.state["step"], "2");

        let mut l2 = Trainer::from_checkpoint(ck, TrainOptions { loss: Loss::L2, max_steps: Some(3), ..o }).unwrap();
        assert_eq!(l2.params, t.params);
        assert_eq!(l2.adam, t.adam);
        l2.run(&data).unwrap();
        assert_eq!(l2.step, 3);
        let rows = read_trace(&dir.path().join("loss.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let data = tiny_data(2);
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions { max_steps: Some(3), epochs: 5, out_dir: Some(dir.path().into()), ..opts(2) };
        let mut t = Trainer::new(tiny_config(), o).unwrap();
        t.train_step(&data).unwrap();
        t.params.get_mut("head.bias").unwrap().data_mut()[0] = f64::NAN;
        let poisoned = t.params.clone();
        let err = t.run(&data).unwrap_err();
        match err {
            Error::Diverged { step, last_good } => {
                assert_eq!(step, 2);
                assert!(last_good.ends_with("last_good"));
            }
            other => panic!("unexpected {other}"),
        }
        // the failed step did not touch the parameters
        assert_eq!(t.params.get("fusion.weight"), poisoned.get("fusion.weight"));
        assert_ne!(t.params.get("fusion.weight"), None);
    }
}
