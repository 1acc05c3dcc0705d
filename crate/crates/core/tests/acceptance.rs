//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use csattn_core::ablation::{cost_table, row_config};
use csattn_core::block::{channel_attention, AttentionBlock, CsAttnConfig};
use csattn_core::checkpoint::{self, Checkpoint};
use csattn_core::config::TrainConfig;
use csattn_core::gradsuite::{self, Module};
use csattn_core::infer::restore;
use csattn_core::loss::{dft2_direct, dft2_fft, frequency_loss};
use csattn_core::metrics::{psnr, ssim};
use csattn_core::net::{block_cost, count_flops, Net, NetConfig};
use csattn_core::nn::{pixel_shuffle, pixel_unshuffle};
use csattn_core::optim::{cosine_lr, AdamW, AdamWConfig};
use csattn_core::params::{ParamBuilder, ParamStore};
use csattn_core::train::{train_on, TrainOutcome};
use csattn_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run(Module::All).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let mut shapes: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in &results {
        *shapes.entry((r.module, r.name.as_str())).or_default() += 1;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.report.passed())
        .map(|r| r.to_string())
        .collect();
    ensure(failed.is_empty(), || {
        format!("{} failing checks, first: {}", failed.len(), failed[0])
    })?;
    let thin: Vec<_> = shapes.iter().filter(|(_, &n)| n < 3).map(|(k, _)| k.1).collect();
    ensure(thin.is_empty(), || format!("fewer than 3 shapes for {thin:?}"))?;
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    for m in ["block", "net"] {
        ensure(shapes.keys().any(|k| k.0 == m), || format!("no {m} checks"))?;
    }
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "{} checks over {} operations, max rel err {worst:.2e} <= 1e-4, {secs:.1} s",
        results.len(),
        shapes.len()
    ))
}

fn structural_invariants() -> Outcome {
    // softmax rows, in the training precision
    let mut tape = Tape::<f32>::new();
    let x = random(&[3, 5, 7, 33], 1, 30.0).cast::<f32>();
    let xv = tape.constant(&x);
    let s = tape.softmax_last(xv).map_err(err)?;
    let worst_row = tape
        .value(s)
        .chunks(33)
        .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst_row <= 1e-6, || format!("softmax row sum off by {worst_row:e}"))?;

    // pixel shuffle round trips
    for (shape, r) in [([2, 3, 8, 12], 2), ([1, 2, 16, 8], 4), ([1, 4, 3, 5], 1)] {
        let x = random(&shape, 2, 1.0).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(&x);
        let down = pixel_unshuffle(&mut tape, xv, r).map_err(err)?;
        let up = pixel_shuffle(&mut tape, down, r).map_err(err)?;
        ensure(tape.value(up) == x.data(), || {
            format!("shuffle round trip differs for {shape:?}, r={r}")
        })?;
    }

    // block shape over every toggle combination and attention count
    let mut combos = 0;
    for mask in 0..64u8 {
        for count in 1..=3 {
            let cfg = CsAttnConfig {
                channels: 8,
                base_heads: 2,
                use_nonlinear_activation: mask & 1 != 0,
                use_value_nta: mask & 2 != 0,
                use_aggregation: mask & 4 != 0,
                progressive_heads: mask & 8 != 0,
                intra_residual: mask & 16 != 0,
                use_spatial_scaling: mask & 32 != 0,
                attention_count: count,
                ..Default::default()
            };
            let mut store = ParamStore::<f32>::new();
            let block = AttentionBlock::new(&mut ParamBuilder::new(&mut store, mask as u64), "b", &cfg).map_err(err)?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(&random(&[2, 8, 8, 16], 3, 1.0).cast::<f32>());
            let y = block.forward(&mut tape, &p, xv).map_err(err)?;
            ensure(tape.shape(y) == [2, 8, 8, 16], || {
                format!("{cfg:?} gave {:?}", tape.shape(y))
            })?;
            combos += 1;
        }
    }

    // one channel per head: every score map is 1×1, so attention passes V through
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(&random(&[2, 6, 4, 4], 4, 1.0));
    let k = tape.constant(&random(&[2, 6, 4, 4], 5, 1.0));
    let v = tape.constant(&random(&[2, 6, 4, 4], 6, 1.0));
    let alpha = tape.constant(&Tensor::full(vec![6], 3.7));
    let (out, _) = channel_attention(&mut tape, q, k, v, 6, alpha, false).map_err(err)?;
    ensure(tape.value(out) == tape.value(v), || {
        "d=1 attention is not identity on V".into()
    })?;

    Ok(format!(
        "softmax rows within {worst_row:.1e}; shuffle round trips bitwise; {combos} block configs keep shape; d=1 identity exact"
    ))
}

fn cost_model() -> Outcome {
    let start = Instant::now();
    let base = NetConfig::default();
    let rows: Vec<String> = ["a", "b", "c", "f", "relu", "leaky_relu", "silu"]
        .map(String::from)
        .to_vec();
    let table = cost_table(&base, &rows, 32, 32).map_err(err)?;
    let row = |k: &str| table.iter().find(|r| r.key == k).unwrap();
    let full = row("f");
    for k in ["b", "c"] {
        ensure(full.params > row(k).params, || {
            format!("full {} <= row {k} {}", full.params, row(k).params)
        })?;
    }
    for k in ["a", "relu", "leaky_relu", "silu"] {
        ensure(row(k).flops == full.flops, || {
            format!("row {k} FLOPs {} != {}", row(k).flops, full.flops)
        })?;
    }

    let scaled = CsAttnConfig {
        channels: 8,
        ..Default::default()
    };
    let unscaled = CsAttnConfig {
        use_spatial_scaling: false,
        ..scaled.clone()
    };
    let (s, u) = (
        block_cost(&scaled, 32, 32).map_err(err)?,
        block_cost(&unscaled, 32, 32).map_err(err)?,
    );
    let (s2, u2) = (s.attention_score_macs(2), u.attention_score_macs(2));
    let (s3, u3) = (s.attention_score_macs(3), u.attention_score_macs(3));
    ensure(s2 > 0 && u2 == 4 * s2, || format!("stage-2 score MACs {u2} vs {s2}"))?;
    ensure(s3 > 0 && u3 == 16 * s3, || format!("stage-3 score MACs {u3} vs {s3}"))?;
    ensure(s.peak_activation_bytes < u.peak_activation_bytes, || {
        format!(
            "activation bytes {} (scaled) vs {} (unscaled)",
            s.peak_activation_bytes, u.peak_activation_bytes
        )
    })?;

    let net_s = count_flops(&base, 32, 32).map_err(err)?;
    let net_u = count_flops(&row_config(&base, "noscale").map_err(err)?, 32, 32).map_err(err)?;
    ensure(net_s.peak_activation_bytes < net_u.peak_activation_bytes, || {
        "network activation memory".into()
    })?;

    Ok(format!(
        "params full {} > w/o NTA {} and w/o aggregation {}; activation rows FLOPs equal ({}); score MACs ratio {}:1 (r=2), {}:1 (r=4); activations {} < {} bytes; {:.2} s",
        full.params,
        row("b").params,
        row("c").params,
        full.flops,
        u2 / s2,
        u3 / s3,
        s.peak_activation_bytes,
        u.peak_activation_bytes,
        start.elapsed().as_secs_f64()
    ))
}

fn optimizer_schedule() -> Outcome {
    let (first, last) = (
        cosine_lr(0, 2000, 5e-4, 1e-7).map_err(err)?,
        cosine_lr(2000, 2000, 5e-4, 1e-7).map_err(err)?,
    );
    ensure(first == 5e-4 && last == 1e-7, || {
        format!("endpoints {first:e}, {last:e}")
    })?;

    let mut store = ParamStore::<f64>::new();
    store.add("theta", Tensor::zeros(vec![1]));
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &[&[1.0]], 1e-3).map_err(err)?;
    let theta = store.tensors()[0].data()[0];
    let expected = -1e-3 * (1.0 / (1.0f64.sqrt() + 1e-8));
    ensure((theta - expected).abs() <= 1e-12, || {
        format!("first step {theta:e} vs {expected:e}")
    })?;

    let mut cfg = TrainConfig {
        total_steps: 10,
        seed: 5,
        flip: true,
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    let data = cfg.data.load(cfg.patch).map_err(err)?;
    let bits = |cfg: &TrainConfig| -> Result<Vec<u64>, String> {
        Ok(train_on(cfg, &data)
            .map_err(err)?
            .logs
            .iter()
            .map(|l| l.loss.to_bits())
            .collect())
    };
    let (a, b) = (bits(&cfg)?, bits(&cfg)?);
    ensure(a.len() == 10 && a == b, || "10-step loss sequences differ".into())?;
    cfg.seed = 6;
    ensure(bits(&cfg)? != a, || "a different seed gave the same losses".into())?;
    Ok(format!(
        "lr endpoints {first:e} / {last:e} exact; first AdamW step {theta:.9e}; 10-step losses bitwise equal"
    ))
}

struct SeedRun {
    seed: u64,
    psnr: f64,
    full: f64,
    att1: f64,
    stacked: f64,
}

impl SeedRun {
    fn holds(&self) -> bool {
        self.psnr >= 35.0 && self.att1 > self.full && self.stacked >= self.full
    }
}

fn desk_run(seed: u64) -> Result<SeedRun, String> {
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let data = cfg.data.load(cfg.patch).map_err(err)?;
    let run = |key: &str| -> Result<TrainOutcome, String> {
        let mut c = cfg.clone();
        c.net = row_config(&cfg.net, key).map_err(err)?;
        train_on(&c, &data).map_err(err)
    };
    let full = run("f")?;
    let att1 = run("att1")?;
    let stacked = run("stacked")?;
    Ok(SeedRun {
        seed,
        psnr: full.eval.metrics.psnr,
        full: full.eval.loss,
        att1: att1.eval.loss,
        stacked: stacked.eval.loss,
    })
}

fn desk_learning() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let mut runs = Vec::new();
    for seed in 1..=3 {
        let r = desk_run(seed)?;
        println!(
            "    seed {}: train PSNR {:.2} dB, final loss full {:.5}, att1 {:.5}, stacked {:.5} -> {}",
            r.seed,
            r.psnr,
            r.full,
            r.att1,
            r.stacked,
            if r.holds() { "holds" } else { "does not hold" }
        );
        runs.push(r);
        let good = runs.iter().filter(|r| r.holds()).count();
        if good >= 2 || runs.len() - good >= 2 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let good = runs.iter().filter(|r| r.holds()).count();
    let summary = format!(
        "C={}, blocks {:?}, {} steps, batch {}: {good} of {} seeds satisfy PSNR >= 35 dB and both orderings, {:.0} s",
        cfg.net.base_channels,
        cfg.net.blocks_per_level,
        cfg.total_steps,
        cfg.batch,
        runs.len(),
        secs
    );
    ensure(good >= 2, || summary.clone())?;
    ensure(secs <= 900.0, || format!("{summary}; over the 15 min budget"))?;
    Ok(summary)
}

fn metric_correctness() -> Outcome {
    let a = Tensor::from_fn(vec![1, 3, 16, 16], |i| (i % 200) as f64 / 250.0);
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b, 1.0).map_err(err)?;
    ensure((p - 20.0).abs() < 1e-10, || format!("PSNR {p}"))?;
    let s = ssim(&a, &a).map_err(err)?;
    ensure((s - 1.0).abs() <= 1e-9, || format!("SSIM {s}"))?;

    let x = random(&[2, 3, 12, 10], 7, 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, gv) = (tape.constant(&x), tape.constant(&x));
    let same = frequency_loss(&mut tape, xv, gv).map_err(err)?;
    let mut y = x.clone();
    y.data_mut()[77] += 1e-3;
    let yv = tape.constant(&y);
    let diff = frequency_loss(&mut tape, yv, gv).map_err(err)?;
    let (same, diff) = (tape.value(same)[0], tape.value(diff)[0]);
    ensure(same == 0.0 && diff > 0.0, || {
        format!("frequency loss {same:e} (identical), {diff:e} (perturbed)")
    })?;

    let mut worst = 0.0f64;
    for (h, w, seed) in [(8, 8, 1), (12, 10, 2), (7, 9, 3), (16, 5, 4)] {
        let plane = random(&[h * w], seed, 1.0);
        let (d, f) = (dft2_direct(plane.data(), h, w), dft2_fft(plane.data(), h, w));
        worst = d.iter().zip(&f).map(|(a, b)| (a - b).norm()).fold(worst, f64::max);
    }
    ensure(worst <= 1e-6, || format!("DFT vs FFT differ by {worst:e}"))?;
    Ok(format!(
        "PSNR {p:.12} dB; SSIM(identical) {s:.12}; frequency loss 0 / {diff:.3e}; DFT vs FFT max diff {worst:.1e}"
    ))
}

fn persistence() -> Outcome {
    let cfg = NetConfig::default();
    let (net, store) = Net::build::<f32>(&cfg, 9).map_err(err)?;
    let bytes = checkpoint::encode(&store, Some(&cfg)).map_err(err)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    ensure(back.config.as_ref() == Some(&cfg), || {
        "config differs after round trip".into()
    })?;
    let bitwise = store.iter().zip(back.params.iter()).all(|((na, a), (nb, b))| {
        na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(bitwise && store.len() == back.params.len(), || {
        "parameters differ after round trip".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut positions: Vec<usize> = (0..64).chain(bytes.len() - 64..bytes.len()).collect();
    positions.extend((0..400).map(|_| rng.gen_range(0..bytes.len())));
    for &i in &positions {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << rng.gen_range(0..8);
        ensure(Checkpoint::from_bytes(&bad).is_err(), || {
            format!("corruption at byte {i} accepted")
        })?;
    }
    ensure(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err(), || {
        "truncation accepted".into()
    })?;

    let sizes = [(37, 41), (16, 16), (1, 1), (17, 50), (33, 9)];
    for (h, w) in sizes {
        let img = Tensor::from_fn(vec![1, 3, h, w], |i| (i % 23) as f32 / 22.0);
        let out = restore(&net, &store, &img).map_err(err)?;
        ensure(out.shape() == [1, 3, h, w], || {
            format!("{h}x{w} came back as {:?}", out.shape())
        })?;
    }
    Ok(format!(
        "{} tensors round-trip bitwise; {} corrupted copies rejected; infer keeps sizes {sizes:?}",
        store.len(),
        positions.len()
    ))
}

fn informational() -> String {
    let cfg = NetConfig {
        base_channels: 32,
        blocks_per_level: [3, 6, 8],
        csattn: CsAttnConfig {
            channels: 32,
            ..Default::default()
        },
    };
    match count_flops(&cfg, 256, 256) {
        Ok(r) => format!(
            "paper-scale configuration (C=32, blocks [3,6,8], 256x256): {:.3} M params, {:.3} G multiply-adds; not compared",
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9
        ),
        Err(e) => format!("paper-scale count failed: {e}"),
    }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or test filters are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("structural invariants", structural_invariants),
        ("cost model", cost_model),
        ("optimizer and schedule", optimizer_schedule),
        ("desk-scale learning", desk_learning),
        ("metric correctness", metric_correctness),
        ("persistence", persistence),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += usize::from(outcome.is_err());
        println!("{tag} criterion {} ({name}): {detail}", i + 1);
    }
    println!("INFO criterion 8: {}", informational());
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    } else {
        println!("all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    }
}
