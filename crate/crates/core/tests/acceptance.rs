//! Acceptance suite: one line per criterion, `PASS`, `FAIL` or `NOT RUN`.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 4`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnln::align::{hffb_forward, Hffb};
use dnln::checkpoint::Checkpoint;
use dnln::eval::{eval_dataset, psnr_y, ssim_y, DegradeMode, EvalProtocol, Upscaler};
use dnln::gradcheck::run_suite;
use dnln::model::{ModelConfig, TrunkKind};
use dnln::nn::{Layers, ParamStore};
use dnln::nonlocal::{nonlocal_forward, NonLocal};
use dnln::ops::{self, ConvKernel, SamplingField};
use dnln::pipeline::{cubic_resize, Frame};
use dnln::train::{synth_dataset, Schedule, SynthSpec, TrainOptions, Trainer};
use dnln::{Tape, Tensor};

// Pinned tolerances.
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_SEEDS: u64 = 20;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_TOL: f64 = 1e-12;
const REDUCTION_CASES: u64 = 50;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const PSNR_FIXTURE: f64 = 28.13;
const PSNR_FIXTURE_TOL: f64 = 0.01;
const VID4_BICUBIC_PSNR: f64 = 23.79;
const VID4_BICUBIC_SSIM: f64 = 0.6347;
const VID4_PSNR_TOL: f64 = 0.15;
const VID4_SSIM_TOL: f64 = 0.005;
const LEARN_STEPS: u64 = 2000;
const LEARN_SAMPLES: usize = 64;
const LEARN_MARGIN_DB: f64 = 0.5;
const LEARN_BUDGET: Duration = Duration::from_secs(30 * 60);
const DETERMINISM_STEPS: u64 = 200;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rand_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=3), rng.random_range(1..=7), rng.random_range(1..=7))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 6];
    let names = ["conv2d", "bilinear_sample", "deform_conv", "hffb", "nonlocal_forward", "pixel_shuffle"];
    for seed in 0..ORACLE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (c, h, w) = rand_shape(&mut rng);
        let o = rng.random_range(1..=3);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let d = rng.random_range(1..=3);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let kernel = ConvKernel::new(Tensor::randn(&[o, c, k, k], 1.0, &mut rng), Tensor::randn(&[o], 1.0, &mut rng), d).unwrap();

        let got = ops::conv2d(&x, &kernel).unwrap();
        worst[0] = worst[0].max(got.max_abs_diff(&common::conv2d(&x, &kernel.weight, &kernel.bias, d)));

        for _ in 0..10 {
            let py = rng.random_range(-1.5..h as f64 + 0.5);
            let px = rng.random_range(-1.5..w as f64 + 0.5);
            let s = ops::bilinear_sample(&x, py, px).unwrap();
            for ch in 0..c {
                worst[1] = worst[1].max((s.data()[ch] - common::bilinear(&x, ch, py, px)).abs());
            }
        }

        let taps = k * k;
        let field = SamplingField {
            offsets: Tensor::randn(&[2 * taps, h, w], 1.5, &mut rng),
            modulation: Tensor::uniform(&[taps, h, w], 0.0, 1.0, &mut rng),
        };
        let got = ops::deform_conv(&x, &field, &kernel).unwrap();
        let want = common::deform_conv(&x, &field.offsets, &field.modulation, &kernel.weight, &kernel.bias, d);
        worst[2] = worst[2].max(got.max_abs_diff(&want));

        let (hc, hh, hw) = (rng.random_range(1..=3), rng.random_range(3..=9), rng.random_range(3..=9));
        let block = Hffb::new("h", hc, rng.random_range(1..=2));
        let mut store = ParamStore::new();
        block.init_params(&mut store, &mut rng);
        for conv in block.convs() {
            store.insert(conv.bias_name(), Tensor::randn(&[conv.out_ch], 0.3, &mut rng));
        }
        let hx = Tensor::randn(&[hc, hh, hw], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let xv = tape.constant(hx.clone());
        let y = hffb_forward(&mut tape, &b, xv, &block).unwrap();
        let kern = |conv: &dnln::nn::Conv| store.conv_kernel(conv).unwrap();
        let branches: Vec<(Tensor, Tensor)> = block.branches.iter().map(|cv| (kern(cv).weight, kern(cv).bias)).collect();
        let fuse = kern(&block.fuse);
        worst[3] = worst[3].max(tape.value(y).max_abs_diff(&common::hffb(&hx, &branches, &fuse.weight, &fuse.bias)));

        let nl = NonLocal::new("n", c, rng.random_range(1..=3));
        let mut store = ParamStore::new();
        nl.init_params(&mut store, &mut rng);
        for conv in nl.convs() {
            store.insert(conv.bias_name(), Tensor::randn(&[conv.out_ch], 0.3, &mut rng));
        }
        let ny = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(ny.clone());
        let z = nonlocal_forward(&mut tape, &b, xv, yv, &nl).unwrap();
        let kp = |conv: &dnln::nn::Conv| store.conv_kernel(conv).unwrap();
        let (u, v, g, zz) = (kp(&nl.u), kp(&nl.v), kp(&nl.g), kp(&nl.z));
        let want = common::nonlocal(
            &x,
            &ny,
            (&u.weight, &u.bias),
            (&v.weight, &v.bias),
            (&g.weight, &g.bias),
            (&zz.weight, &zz.bias),
        );
        worst[4] = worst[4].max(tape.value(z).max_abs_diff(&want));

        let r = rng.random_range(2..=3);
        let px = Tensor::randn(&[c * r * r, h, w], 1.0, &mut rng);
        worst[5] = worst[5].max(ops::pixel_shuffle(&px, r).unwrap().max_abs_diff(&common::pixel_shuffle(&px, r)));
    }
    let elapsed = start.elapsed();
    let detail = names.iter().zip(worst).map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        worst.iter().all(|&e| e <= ORACLE_TOL) && elapsed < ORACLE_BUDGET,
        format!("{ORACLE_SEEDS} seeds, max abs err: {detail} (tol {ORACLE_TOL:e}); {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..REDUCTION_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (c, h, w) = rand_shape(&mut rng);
        let o = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let d = rng.random_range(1..=2);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let kernel = ConvKernel::new(Tensor::randn(&[o, c, k, k], 1.0, &mut rng), Tensor::randn(&[o], 1.0, &mut rng), d).unwrap();
        let field = SamplingField::uniform(k * k, h, w, 1.0);
        let a = ops::deform_conv(&x, &field, &kernel).unwrap();
        let b = ops::conv2d(&x, &kernel).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    verdict(worst <= REDUCTION_TOL, format!("{REDUCTION_CASES} cases, max abs diff {worst:.1e} (tol {REDUCTION_TOL:e})"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let results = match run_suite("all", 3) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let elapsed = start.elapsed();
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.1e}", r.name, r.max_rel_err)).collect();
    let worst = results.iter().map(|r| r.max_rel_err / r.tolerance).fold(0.0, f64::max);
    let detail = format!(
        "{} checks, {} coordinates, worst error/tolerance {worst:.2}; {:.1}s{}",
        results.len(),
        results.iter().map(|r| r.checked).sum::<usize>(),
        elapsed.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    verdict(failed.is_empty() && elapsed < GRADCHECK_BUDGET, detail)
}

fn criterion_4() -> Outcome {
    let proto = EvalProtocol::default();
    let a = Frame::constant(32, 32, [0.4; 3]);
    // grey moves luma by 219 per unit
    let b = Frame::constant(32, 32, [0.4 + 10.0 / 219.0; 3]);
    let p = psnr_y(&a, &b, &proto).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tex = Frame::rgb(Tensor::uniform(&[3, 40, 36], 0.0, 1.0, &mut rng)).unwrap();
    let s = ssim_y(&tex, &tex, &proto).unwrap();
    verdict(
        (p - PSNR_FIXTURE).abs() <= PSNR_FIXTURE_TOL && s == 1.0,
        format!("uniform luma difference 10: {p:.4} dB (want {PSNR_FIXTURE} ± {PSNR_FIXTURE_TOL}); identical SSIM {s}"),
    )
}

fn criterion_5() -> Outcome {
    let Some(root) = std::env::var_os("DNLN_VID4").map(PathBuf::from) else {
        return Outcome::NotRun("needs the Vid4 ground truth; set DNLN_VID4=<dir with calendar/city/foliage/walk>".into());
    };
    let up = Upscaler::Bicubic { scale: 4 };
    match eval_dataset(&up, &root, DegradeMode::On, &EvalProtocol::default()) {
        Ok(r) => {
            let (p, s) = (r.psnr(), r.ssim());
            verdict(
                (p - VID4_BICUBIC_PSNR).abs() <= VID4_PSNR_TOL && (s - VID4_BICUBIC_SSIM).abs() <= VID4_SSIM_TOL,
                format!(
                    "bicubic average {p:.2} dB / {s:.4} (want {VID4_BICUBIC_PSNR} ± {VID4_PSNR_TOL} / {VID4_BICUBIC_SSIM} ± {VID4_SSIM_TOL})"
                ),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

/// Training recipe of the learning-signal run.
fn learn_options() -> TrainOptions {
    TrainOptions {
        epochs: usize::MAX,
        batch: 16,
        seed: 7,
        // 4 steps per epoch: constant until step 1000, then halving every 200
        schedule: Schedule { base_lr: 8e-3, drop_start: 250, half_every: 50 },
        patch: Some(16),
        max_steps: Some(LEARN_STEPS),
        ..TrainOptions::default()
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let train: Vec<_> = synth_dataset(&SynthSpec::new(LEARN_SAMPLES, 1)).unwrap().into_iter().map(|s| s.seq).collect();
    let held: Vec<_> = synth_dataset(&SynthSpec::new(16, 2)).unwrap().into_iter().map(|s| s.seq).collect();
    let mut trainer = Trainer::new(ModelConfig::desk(), learn_options()).unwrap();
    if let Err(e) = trainer.run(&train) {
        return Outcome::Fail(format!("training failed: {e}"));
    }
    let up = Upscaler::Model { model: trainer.model.clone(), params: trainer.params.clone() };
    let proto = EvalProtocol { exclude_boundary_frames: 0, border_crop: 0 };
    let (mut model_db, mut bicubic_db) = (0.0, 0.0);
    for seq in &held {
        let gt = seq.hr_target.as_ref().unwrap();
        model_db += psnr_y(&up.upscale(seq).unwrap(), gt, &proto).unwrap();
        bicubic_db += psnr_y(&cubic_resize(seq.reference(), 4.0).unwrap(), gt, &proto).unwrap();
    }
    model_db /= held.len() as f64;
    bicubic_db /= held.len() as f64;
    let elapsed = start.elapsed();
    let gain = model_db - bicubic_db;
    verdict(
        gain >= LEARN_MARGIN_DB && elapsed <= LEARN_BUDGET,
        format!(
            "held-out Y-PSNR {model_db:.2} dB vs bicubic {bicubic_db:.2} dB, gain {gain:+.2} dB (need {LEARN_MARGIN_DB:+}); \
             final loss {:.4}; {:.0}s",
            trainer.trace.last().map_or(f64::NAN, |r| r.loss),
            elapsed.as_secs_f64()
        ),
    )
}

fn tiny_options(seed: u64, steps: u64) -> TrainOptions {
    TrainOptions { epochs: usize::MAX, batch: 4, seed, patch: Some(8), max_steps: Some(steps), ..TrainOptions::default() }
}

fn small_data(radius: usize, count: usize) -> Vec<dnln::FrameSequence> {
    let spec = SynthSpec { count, shift_range: 2, seed: 7, lr_height: 12, lr_width: 12, radius, scale: 4 };
    synth_dataset(&spec).unwrap().into_iter().map(|s| s.seq).collect()
}

fn round_trip_identical(ck: &Checkpoint) -> Result<(), String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    ck.save(a.path()).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(a.path()).map_err(|e| e.to_string())?;
    if &loaded != ck {
        return Err("reloaded checkpoint differs".into());
    }
    loaded.save(b.path()).map_err(|e| e.to_string())?;
    for f in ["manifest.txt", "tensors.bin"] {
        if std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() {
            return Err(format!("{f} changed on re-save"));
        }
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let mut variants: Vec<(String, ModelConfig)> = Vec::new();
    for d in 1..=5 {
        for hffb in [true, false] {
            let mut c = ModelConfig::desk();
            c.n_dconv = d;
            c.use_hffb = hffb;
            variants.push((format!("D={d}{}", if hffb { "" } else { " no-HFFB" }), c));
        }
    }
    for radius in 1..=3 {
        let mut c = ModelConfig::desk();
        c.radius = radius;
        variants.push((format!("{} frames", 2 * radius + 1), c));
    }
    let mut c = ModelConfig::desk();
    c.use_align = false;
    c.use_nonlocal = false;
    c.trunk = TrunkKind::Residual;
    variants.push(("no-align/no-nonlocal/residual trunk".into(), c));

    let mut failures = Vec::new();
    for (name, cfg) in &variants {
        let data = small_data(cfg.radius, 2);
        let result = Trainer::new(cfg.clone(), tiny_options(1, 1))
            .and_then(|mut t| t.run(&data).map(|_| t))
            .map_err(|e| e.to_string())
            .and_then(|t| {
                let ck = t.checkpoint();
                round_trip_identical(&ck)?;
                let resumed = Trainer::from_checkpoint(ck, tiny_options(1, 1)).map_err(|e| e.to_string())?;
                if resumed.params != t.params || resumed.step != 1 {
                    return Err("resumed trainer differs".into());
                }
                Ok(())
            });
        if let Err(e) = result {
            failures.push(format!("{name}: {e}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} configurations built, trained one step and reloaded losslessly", variants.len())
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_8() -> Outcome {
    let data = small_data(1, 8);
    let run = || -> dnln::Result<Trainer> {
        let mut t = Trainer::new(ModelConfig::desk(), tiny_options(11, DETERMINISM_STEPS))?;
        t.run(&data)?;
        Ok(t)
    };
    let (a, b) = match (run(), run()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
    };
    let bits = |t: &Trainer| t.trace.iter().map(|r| (r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
    let same_trace = a.trace.len() == DETERMINISM_STEPS as usize && bits(&a) == bits(&b);
    let same_params = a.params == b.params;
    let round_trip = round_trip_identical(&a.checkpoint());
    verdict(
        same_trace && same_params && round_trip.is_ok(),
        format!(
            "{DETERMINISM_STEPS}-step traces identical: {same_trace}; parameters identical: {same_params}; checkpoint round trip: {}",
            round_trip.err().unwrap_or_else(|| "byte-identical".into())
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "operator oracles", criterion_1),
        (2, "deformable reduces to standard convolution", criterion_2),
        (3, "gradient checks", criterion_3),
        (4, "metric fixtures", criterion_4),
        (5, "bicubic baseline on Vid4", criterion_5),
        (6, "desk-scale learning signal", criterion_6),
        (7, "ablation configurations", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = false;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        match f() {
            Outcome::Pass(d) => println!("criterion {n} ({name}): PASS - {d}"),
            Outcome::Fail(d) => {
                failed = true;
                println!("criterion {n} ({name}): FAIL - {d}");
            }
            Outcome::NotRun(d) => println!("criterion {n} ({name}): NOT RUN - {d}"),
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
