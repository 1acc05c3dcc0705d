//! Finite-difference gradient checks over every differentiable operation,
//! the attention block and the whole network, each on three random shapes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{channel_attention, AttentionBlock, CsAttnConfig};
use crate::error::{Error, Result};
use crate::loss::{frequency_loss, l1_loss};
use crate::net::{area_downsample, Net, NetConfig};
use crate::nn::{self, Activation};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ReduceKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    All,
    Tensor,
    Nn,
    Block,
    Net,
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "tensor" => Ok(Self::Tensor),
            "nn" => Ok(Self::Nn),
            "block" => Ok(Self::Block),
            "net" => Ok(Self::Net),
            _ => Err(Error::Config(format!(
                "unknown gradcheck module {s:?} (all|tensor|nn|block|net)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub shape: Vec<usize>,
    pub report: GradCheckReport,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<6} {:<28} {:<16} max_rel_err {:.3e} ({} coords)",
            if self.report.passed() { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            format!("{:?}", self.shape),
            self.report.max_rel_err,
            self.report.coords_checked
        )
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in ±[lo, 1], away from zero.
fn away_from_zero(shape: &[usize], seed: u64, lo: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(lo..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element gets a
/// distinct weight.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(&random(t.shape(y), seed ^ 0x5eed));
    let p = t.mul(y, r)?;
    t.sum_all(p)
}

struct Suite {
    opts: GradCheckOptions,
    out: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, module: &'static str, name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let shape = inputs[0].shape().to_vec();
        // Output at the unperturbed point; weighting `y − y₀` keeps the
        // objective near zero so summation round-off stays small.
        let baseline = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x)).collect();
            let y = f(&mut t, &vars)?;
            t.tensor(y)
        };
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                let y0 = t.constant(&baseline);
                let d = t.sub(y, y0)?;
                if baseline.numel() == 1 {
                    Ok(d)
                } else {
                    weighted_sum(t, d, seed)
                }
            },
            &inputs,
            &self.opts,
        )?;
        self.out.push(CheckResult {
            module,
            name: name.to_string(),
            shape,
            report,
        });
        Ok(())
    }
}

fn tensor_ops(s: &mut Suite) -> Result<()> {
    const M: &str = "tensor";
    let shapes: [&[usize]; 3] = [&[5], &[2, 3], &[2, 3, 4]];
    for (i, &sh) in shapes.iter().enumerate() {
        let seed = 100 + i as u64;
        let ab = || vec![random(sh, seed), random(sh, seed + 1)];
        s.check(M, "add", ab(), seed, |t, v| t.add(v[0], v[1]))?;
        s.check(M, "sub", ab(), seed, |t, v| t.sub(v[0], v[1]))?;
        s.check(M, "mul", ab(), seed, |t, v| t.mul(v[0], v[1]))?;
        s.check(M, "scale", vec![random(sh, seed)], seed, |t, v| t.scale(v[0], 0.7))?;
        s.check(M, "recip", vec![away_from_zero(sh, seed, 0.5)], seed, |t, v| {
            t.recip(v[0])
        })?;
        s.check(M, "square", vec![random(sh, seed)], seed, |t, v| t.square(v[0]))?;
        s.check(M, "sum_all", vec![random(sh, seed)], seed, |t, v| {
            let y = t.square(v[0])?;
            t.sum_all(y)
        })?;
        s.check(M, "mean_all", vec![random(sh, seed)], seed, |t, v| {
            let y = t.square(v[0])?;
            t.mean_all(y)
        })?;
    }

    let axis_cases: [(&[usize], usize); 3] = [(&[4, 5], 0), (&[2, 3, 4], 1), (&[2, 2, 3, 2], 3)];
    for (i, &(sh, axis)) in axis_cases.iter().enumerate() {
        let seed = 110 + i as u64;
        s.check(
            M,
            "scale_along_axis",
            vec![random(sh, seed), random(&[sh[axis]], seed + 1)],
            seed,
            move |t, v| t.scale_along_axis(v[0], v[1], axis),
        )?;
        s.check(M, "reduce_sum", vec![random(sh, seed)], seed, move |t, v| {
            t.reduce(ReduceKind::Sum, v[0], &[axis])
        })?;
        s.check(M, "reduce_mean", vec![random(sh, seed)], seed, move |t, v| {
            t.reduce(ReduceKind::Mean, v[0], &[0, axis.max(1)])
        })?;
    }

    let mm: [([usize; 3], usize); 3] = [([1, 2, 3], 4), ([2, 3, 5], 2), ([3, 4, 4], 3)];
    for (i, &([b, m, k], n)) in mm.iter().enumerate() {
        let seed = 120 + i as u64;
        s.check(
            M,
            "matmul",
            vec![random(&[b, m, k], seed), random(&[b, k, n], seed + 1)],
            seed,
            |t, v| t.matmul(v[0], v[1]),
        )?;
        s.check(
            M,
            "matmul_transposed_b",
            vec![random(&[b, m, k], seed), random(&[b, n, k], seed + 1)],
            seed,
            |t, v| t.matmul_transposed_b(v[0], v[1]),
        )?;
        s.check(M, "softmax_last", vec![random(&[b, m, k], seed)], seed, |t, v| {
            t.softmax_last(v[0])
        })?;
        s.check(M, "reshape", vec![random(&[b, m, k], seed)], seed, move |t, v| {
            t.reshape(v[0], &[m, b * k])
        })?;
        s.check(M, "permute", vec![random(&[b, m, k], seed)], seed, |t, v| {
            t.permute(v[0], &[2, 0, 1])
        })?;
    }

    let chans: [[usize; 4]; 3] = [[1, 2, 3, 3], [2, 3, 2, 4], [1, 5, 4, 2]];
    for (i, &[n, c, h, w]) in chans.iter().enumerate() {
        let seed = 130 + i as u64;
        s.check(
            M,
            "concat_channels",
            vec![random(&[n, c, h, w], seed), random(&[n, c + 1, h, w], seed + 1)],
            seed,
            |t, v| t.concat_channels(&[v[0], v[1]]),
        )?;
        s.check(
            M,
            "split_channels",
            vec![random(&[n, c + 2, h, w], seed)],
            seed,
            move |t, v| {
                let parts = t.split_channels(v[0], &[c, 2])?;
                let a = weighted_sum(t, parts[0], seed)?;
                let b = weighted_sum(t, parts[1], seed + 7)?;
                let b = t.scale(b, 3.0)?;
                t.add(a, b)
            },
        )?;
    }
    Ok(())
}

fn nn_ops(s: &mut Suite) -> Result<()> {
    const M: &str = "nn";
    let shapes: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 5, 3], [1, 4, 6, 8]];
    for (i, &sh) in shapes.iter().enumerate() {
        let [n, c, h, w] = sh;
        let seed = 200 + i as u64;
        for kind in [
            Activation::Gelu,
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Silu,
        ] {
            s.check(
                M,
                &format!("activation_{kind:?}").to_lowercase(),
                vec![away_from_zero(&sh, seed, 0.05)],
                seed,
                move |t, v| nn::activation(t, kind, v[0]),
            )?;
        }
        let cout = c + 1;
        s.check(
            M,
            "pointwise_conv",
            vec![
                random(&sh, seed),
                random(&[cout, c, 1, 1], seed + 1),
                random(&[cout], seed + 2),
            ],
            seed,
            |t, v| nn::pointwise_conv(t, v[0], v[1], Some(v[2])),
        )?;
        s.check(
            M,
            "depthwise_conv3x3",
            vec![
                random(&sh, seed),
                random(&[c, 1, 3, 3], seed + 1),
                random(&[c], seed + 2),
            ],
            seed,
            |t, v| nn::depthwise_conv3x3(t, v[0], v[1], Some(v[2])),
        )?;
        for stride in [1, 2] {
            s.check(
                M,
                &format!("conv3x3_stride{stride}"),
                vec![
                    random(&sh, seed),
                    random(&[cout, c, 3, 3], seed + 1),
                    random(&[cout], seed + 2),
                ],
                seed,
                move |t, v| nn::conv3x3(t, v[0], v[1], Some(v[2]), stride),
            )?;
        }
        s.check(
            M,
            "layer_norm_channel",
            vec![random(&sh, seed), random(&[c], seed + 1), random(&[c], seed + 2)],
            seed,
            |t, v| nn::layer_norm_channel(t, v[0], v[1], v[2], 1e-6),
        )?;
        s.check(M, "l2_normalize_last", vec![random(&sh, seed)], seed, |t, v| {
            nn::l2_normalize_last(t, v[0], 1e-12)
        })?;
        s.check(
            M,
            "l1_loss",
            vec![random(&sh, seed), random(&sh, seed + 1)],
            seed,
            |t, v| l1_loss(t, v[0], v[1]),
        )?;
        let ps = [n, c * 4, h, w];
        s.check(M, "pixel_shuffle", vec![random(&ps, seed)], seed, |t, v| {
            nn::pixel_shuffle(t, v[0], 2)
        })?;
        let us = [n, c, 2 * h, 2 * w];
        s.check(M, "pixel_unshuffle", vec![random(&us, seed)], seed, |t, v| {
            nn::pixel_unshuffle(t, v[0], 2)
        })?;
        s.check(M, "area_downsample", vec![random(&us, seed)], seed, |t, v| {
            area_downsample(t, v[0], 2)
        })?;
    }

    // Odd extents keep every frequency-domain term away from exact cancellation.
    let odd: [[usize; 4]; 3] = [[1, 1, 5, 3], [2, 3, 7, 5], [1, 2, 5, 5]];
    for (i, &sh) in odd.iter().enumerate() {
        let seed = 210 + i as u64;
        s.check(
            M,
            "frequency_loss",
            vec![random(&sh, seed), random(&sh, seed + 1)],
            seed,
            |t, v| frequency_loss(t, v[0], v[1]),
        )?;
    }

    let attn: [([usize; 4], [usize; 2], usize); 3] = [
        ([1, 4, 4, 4], [4, 4], 1),
        ([2, 4, 4, 4], [2, 2], 2),
        ([1, 6, 4, 2], [2, 2], 3),
    ];
    for (i, &(vs, qhw, heads)) in attn.iter().enumerate() {
        let seed = 220 + i as u64;
        let qs = [vs[0], vs[1], qhw[0], qhw[1]];
        s.check(
            M,
            "channel_attention",
            vec![
                random(&vs, seed),
                random(&qs, seed + 1),
                random(&qs, seed + 2),
                random(&[heads], seed + 3),
            ],
            seed,
            move |t, v| Ok(channel_attention(t, v[1], v[2], v[0], heads, v[3], false)?.0),
        )?;
    }
    Ok(())
}

fn block(s: &mut Suite) -> Result<()> {
    let configs = [
        (
            "csattn_block",
            CsAttnConfig {
                channels: 4,
                ..Default::default()
            },
        ),
        (
            "csattn_block_2heads_silu",
            CsAttnConfig {
                channels: 8,
                base_heads: 2,
                activation: Activation::Silu,
                ..Default::default()
            },
        ),
        (
            "stacked_attention",
            CsAttnConfig {
                channels: 4,
                baseline_stacked: true,
                ..Default::default()
            },
        ),
    ];
    for (i, (name, cfg)) in configs.into_iter().enumerate() {
        let c = cfg.channels;
        for (j, shape) in [[1, c, 8, 8], [2, c, 4, 8], [1, c, 12, 4]].into_iter().enumerate() {
            let seed = 300 + 10 * i as u64 + j as u64;
            let mut store = ParamStore::<f64>::new();
            let blk = AttentionBlock::new(&mut ParamBuilder::new(&mut store, seed), "block", &cfg)?;
            let mut inputs = vec![random(&shape, seed)];
            inputs.extend(perturbed(&store, seed));
            s.check("block", name, inputs, seed, |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                blk.forward(t, &p, v[0])
            })?;
        }
    }
    Ok(())
}

/// Store tensors with small random offsets, so unit gains, zero offsets and
/// zero heads do not hide gradient paths.
fn perturbed(store: &ParamStore<f64>, seed: u64) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let noise = random(t.shape(), seed * 1000 + i as u64);
            Tensor::from_fn(t.shape().to_vec(), |j| t.data()[j] + 0.1 * noise.data()[j])
        })
        .collect()
}

/// The network configuration used by the whole-network check.
pub fn net_check_config() -> NetConfig {
    let mut cfg = NetConfig {
        base_channels: 4,
        blocks_per_level: [1, 1, 1],
        ..Default::default()
    };
    cfg.csattn.channels = 4;
    cfg
}

fn network(s: &mut Suite) -> Result<()> {
    let cfg = net_check_config();
    let shapes: [[usize; 4]; 3] = [[1, 3, 16, 16], [2, 3, 16, 16], [1, 3, 16, 32]];
    let saved = s.opts.max_coords_per_input;
    s.opts.max_coords_per_input = Some(3);
    for (i, shape) in shapes.into_iter().enumerate() {
        let seed = 400 + i as u64;
        let (net, store) = Net::build::<f64>(&cfg, seed)?;
        let mut inputs = vec![random(&shape, seed).map(|v| 0.5 + 0.4 * v)];
        inputs.extend(perturbed(&store, seed));
        let weights: Vec<Tensor<f64>> = [1, 2, 4]
            .iter()
            .map(|f| random(&[shape[0], 3, shape[2] / f, shape[3] / f], seed + *f as u64))
            .collect();
        let baselines = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x)).collect();
            let out = net.forward_multiscale(&mut t, &Bound::from_vars(vars[1..].to_vec()), vars[0])?;
            out.outputs.map(|y| t.tensor(y))
        };
        s.check("net", "net_multiscale", inputs, seed, |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let out = net.forward_multiscale(t, &p, v[0])?;
            let mut total = None;
            for ((y, w), y0) in out.outputs.iter().zip(&weights).zip(&baselines) {
                let (w, y0) = (t.constant(w), t.constant(y0));
                let d = t.sub(*y, y0)?;
                let prod = t.mul(d, w)?;
                let term = t.sum_all(prod)?;
                total = Some(match total {
                    Some(acc) => t.add(acc, term)?,
                    None => term,
                });
            }
            Ok(total.expect("three outputs"))
        })?;
    }
    s.opts.max_coords_per_input = saved;
    Ok(())
}

/// Runs the checks of `module` with central differences (step 1e-5) and a
/// 1e-4 relative-error threshold.
pub fn run(module: Module) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        opts: GradCheckOptions {
            max_coords_per_input: Some(48),
            ..Default::default()
        },
        out: Vec::new(),
    };
    if matches!(module, Module::All | Module::Tensor) {
        tensor_ops(&mut s)?;
    }
    if matches!(module, Module::All | Module::Nn) {
        nn_ops(&mut s)?;
    }
    if matches!(module, Module::All | Module::Block) {
        block(&mut s)?;
    }
    if matches!(module, Module::All | Module::Net) {
        network(&mut s)?;
    }
    Ok(s.out)
}
