//! Continuous scaling attention block.
//!
//! Three chained channel attentions with no feed-forward network. The first
//! stage is plain transposed (channel) attention. Stages two and three take
//! queries and keys from a spatially shuffled-down projection of the
//! previous stage's output (factors 2 and 4) and values from extra
//! projections adjusted by a 1×1 conv plus activation. The stage outputs are
//! concatenated, fused by a 1×1 conv and added to the normalised input.
//!
//! Every component can be disabled independently for ablations, and
//! [`StackedAttention`] provides the plain three-times-stacked baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ConvParams, LayerNormParams};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{dims4, Scalar, Tape, Var};

/// Shuffle-down factors for stages two and three.
pub const STAGE_SCALES: [usize; 2] = [2, 4];

/// Epsilon guarding the query/key L2 normalisation.
pub const QK_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsAttnConfig {
    pub channels: usize,
    /// Head count of the first attention stage.
    pub base_heads: usize,
    pub activation: Activation,
    /// Initial value of every per-head temperature.
    pub alpha_init: f64,
    /// Divide the scores by the temperature instead of multiplying.
    pub alpha_divides: bool,
    pub use_nonlinear_activation: bool,
    pub use_value_nta: bool,
    pub use_aggregation: bool,
    pub progressive_heads: bool,
    pub intra_residual: bool,
    pub use_spatial_scaling: bool,
    /// Number of chained attention stages, 1..=3.
    pub attention_count: usize,
    /// Replace the block by three independent single-attention units.
    pub baseline_stacked: bool,
    /// Explicit per-stage head counts; overrides `progressive_heads`.
    pub head_schedule: Option<[usize; 3]>,
    /// Include biases in every convolution.
    pub conv_bias: bool,
}

impl Default for CsAttnConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            base_heads: 1,
            activation: Activation::Gelu,
            alpha_init: 1.0,
            alpha_divides: false,
            use_nonlinear_activation: true,
            use_value_nta: true,
            use_aggregation: true,
            progressive_heads: true,
            intra_residual: true,
            use_spatial_scaling: true,
            attention_count: 3,
            baseline_stacked: false,
            head_schedule: None,
            conv_bias: true,
        }
    }
}

impl CsAttnConfig {
    pub fn with_channels(&self, channels: usize) -> Self {
        Self {
            channels,
            ..self.clone()
        }
    }

    /// Head count of stage `s` (0-based).
    pub fn heads(&self, stage: usize) -> usize {
        if let Some(schedule) = self.head_schedule {
            return schedule[stage];
        }
        match (stage, self.progressive_heads) {
            (0, _) | (_, false) => self.base_heads,
            _ => 2 * self.base_heads,
        }
    }

    /// Activation used inside the value adjustment and scaling paths.
    pub fn inner_activation(&self) -> Activation {
        if self.use_nonlinear_activation {
            self.activation
        } else {
            Activation::Identity
        }
    }

    /// Stage count actually evaluated.
    pub fn stages(&self) -> usize {
        if self.baseline_stacked {
            1
        } else {
            self.attention_count
        }
    }

    /// Spatial divisor required of block inputs.
    pub fn spatial_multiple(&self) -> usize {
        if self.use_spatial_scaling && self.stages() > 1 {
            STAGE_SCALES[self.stages() - 2]
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_heads == 0 {
            return Err(Error::Config("channels and base_heads must be positive".into()));
        }
        if !(1..=3).contains(&self.attention_count) {
            return Err(Error::Config(format!(
                "attention_count must be 1, 2 or 3, got {}",
                self.attention_count
            )));
        }
        for s in 0..self.stages() {
            let h = self.heads(s);
            if h == 0 || self.channels % h != 0 {
                return Err(Error::Config(format!(
                    "{} channels not divisible by {h} heads at stage {}",
                    self.channels,
                    s + 1
                )));
            }
        }
        if self.alpha_divides && self.alpha_init == 0.0 {
            return Err(Error::Config("alpha_init must be nonzero when dividing".into()));
        }
        Ok(())
    }
}

/// Channel attention with per-head temperature.
///
/// `q`, `k`: `[n, c, hq, wq]`; `v`: `[n, c, hv, wv]`. Queries and keys are
/// L2-normalised over tokens; the `d×d` score matrix per head is scaled by
/// the temperature, softmaxed over its last axis and applied to `v`. The
/// token counts of `q`/`k` and `v` may differ.
///
/// Returns the attended values (shape of `v`) and the attention maps
/// `[n, heads, d, d]`.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    alpha: Var,
    alpha_divides: bool,
) -> Result<(Var, Var)> {
    let (n, c, hq, wq) = dims4(tape.shape(q), "channel_attention")?;
    if tape.shape(k) != tape.shape(q) {
        return Err(Error::mismatch("channel_attention", tape.shape(q), tape.shape(k)));
    }
    let (nv, cv, hv, wv) = dims4(tape.shape(v), "channel_attention")?;
    if nv != n || cv != c {
        return Err(Error::mismatch("channel_attention", tape.shape(q), tape.shape(v)));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(
            "channel_attention",
            format!("{c} channels, {heads} heads"),
        ));
    }
    if tape.shape(alpha) != [heads] {
        return Err(Error::mismatch("channel_attention", &[heads], tape.shape(alpha)));
    }
    let d = c / heads;
    let qh = tape.reshape(q, &[n, heads, d, hq * wq])?;
    let kh = tape.reshape(k, &[n, heads, d, hq * wq])?;
    let vh = tape.reshape(v, &[n, heads, d, hv * wv])?;
    let qn = nn::l2_normalize_last(tape, qh, QK_NORM_EPS)?;
    let kn = nn::l2_normalize_last(tape, kh, QK_NORM_EPS)?;
    let scores = tape.matmul_transposed_b(qn, kn)?;
    let temp = if alpha_divides { tape.recip(alpha)? } else { alpha };
    let scaled = tape.scale_along_axis(scores, temp, 1)?;
    let attn = tape.softmax_last(scaled)?;
    let out = tape.matmul(attn, vh)?;
    let out = tape.reshape(out, &[n, c, hv, wv])?;
    Ok((out, attn))
}

/// Query/key generator for stages two and three.
#[derive(Clone, Debug)]
pub struct ScalingPath {
    /// Shuffle-down factor; 1 when spatial scaling is disabled.
    pub factor: usize,
    pub proj_in: ConvParams,
    pub depthwise: ConvParams,
    pub proj_out: ConvParams,
    pub activation: Activation,
}

impl ScalingPath {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, factor: usize, cfg: &CsAttnConfig) -> Self {
        let wide = factor * factor * c;
        pb.push(name);
        let proj_in = ConvParams::pointwise(pb, "proj_in", c, c, cfg.conv_bias);
        let depthwise = ConvParams::depthwise(pb, "depthwise", wide, cfg.conv_bias);
        let proj_out = ConvParams::pointwise(pb, "proj_out", wide, 2 * c, cfg.conv_bias);
        pb.pop();
        Self {
            factor,
            proj_in,
            depthwise,
            proj_out,
            activation: cfg.inner_activation(),
        }
    }

    /// Returns `(q, k)`, each `[n, c, h/factor, w/factor]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let c = self.proj_in.cout;
        let y = self.proj_in.forward(tape, p, x)?;
        let y = if self.factor > 1 {
            nn::pixel_unshuffle(tape, y, self.factor)?
        } else {
            y
        };
        let y = self.depthwise.forward(tape, p, y)?;
        let y = nn::activation(tape, self.activation, y)?;
        let y = self.proj_out.forward(tape, p, y)?;
        let qk = tape.split_channels(y, &[c, c])?;
        Ok((qk[0], qk[1]))
    }
}

/// Value adjustment: 1×1 conv followed by the block activation.
#[derive(Clone, Debug)]
pub struct ValueAdjust {
    pub conv: ConvParams,
    pub activation: Activation,
}

impl ValueAdjust {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, v: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, v)?;
        nn::activation(tape, self.activation, y)
    }
}

/// Applies the optional value adjustment; a disabled adjustment returns `v`.
pub fn value_nta<T: Scalar>(tape: &mut Tape<T>, p: &Bound, adjust: Option<&ValueAdjust>, v: Var) -> Result<Var> {
    match adjust {
        Some(a) => a.forward(tape, p, v),
        None => Ok(v),
    }
}

/// Parameters of one continuous scaling attention block.
#[derive(Clone, Debug)]
pub struct CsAttnBlock {
    pub cfg: CsAttnConfig,
    pub norm: LayerNormParams,
    pub qkv_pointwise: ConvParams,
    pub qkv_depthwise: ConvParams,
    /// Per-stage temperatures, each of shape `[heads(stage)]`.
    pub temperatures: Vec<ParamId>,
    /// Value adjustments for stages two and three (absent when disabled).
    pub value_adjust: Vec<ValueAdjust>,
    pub scaling: Vec<ScalingPath>,
    pub aggregate: Option<ConvParams>,
}

/// Intermediate tensors of one block evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub normalized: Var,
    pub stage_outputs: Vec<Var>,
    pub attention_maps: Vec<Var>,
    pub output: Var,
}

impl CsAttnBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CsAttnConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stages = cfg.attention_count;
        pb.push(name);
        let norm = LayerNormParams::new(pb, "norm", c);
        let width = (2 + stages) * c;
        let qkv_pointwise = ConvParams::pointwise(pb, "qkv_pointwise", c, width, cfg.conv_bias);
        let qkv_depthwise = ConvParams::depthwise(pb, "qkv_depthwise", width, cfg.conv_bias);
        let temperatures = (0..stages)
            .map(|s| pb.constant(&format!("temperature{}", s + 1), &[cfg.heads(s)], cfg.alpha_init))
            .collect();
        let mut value_adjust = Vec::new();
        let mut scaling = Vec::new();
        for s in 1..stages {
            if cfg.use_value_nta {
                value_adjust.push(ValueAdjust {
                    conv: ConvParams::pointwise(pb, &format!("value_adjust{}", s + 1), c, c, cfg.conv_bias),
                    activation: cfg.inner_activation(),
                });
            }
            let factor = if cfg.use_spatial_scaling {
                STAGE_SCALES[s - 1]
            } else {
                1
            };
            scaling.push(ScalingPath::new(pb, &format!("scaling{}", s + 1), c, factor, cfg));
        }
        let aggregate = cfg
            .use_aggregation
            .then(|| ConvParams::pointwise(pb, "aggregate", stages * c, c, cfg.conv_bias));
        pb.pop();
        Ok(Self {
            cfg: cfg.clone(),
            norm,
            qkv_pointwise,
            qkv_depthwise,
            temperatures,
            value_adjust,
            scaling,
            aggregate,
        })
    }

    /// Splits the normalised input into `Q, K, V, V2, V3` (as many values as
    /// there are stages), each with `C` channels.
    pub fn qkv_split<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x_norm: Var) -> Result<Vec<Var>> {
        let c = self.cfg.channels;
        let y = self.qkv_pointwise.forward(tape, p, x_norm)?;
        let y = self.qkv_depthwise.forward(tape, p, y)?;
        tape.split_channels(y, &vec![c; 2 + self.cfg.attention_count])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.output)
    }

    pub fn forward_traced<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<BlockTrace> {
        let cfg = &self.cfg;
        let (_, c, h, w) = dims4(tape.shape(x), "csattn")?;
        if c != cfg.channels {
            return Err(Error::shape(
                "csattn",
                format!("expected {} channels, got {c}", cfg.channels),
            ));
        }
        let m = cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape("csattn", format!("{h}x{w} not divisible by {m}")));
        }

        let x_hat = self.norm.forward(tape, p, x)?;
        tape.push_scope("stage1");
        let parts = self.qkv_split(tape, p, x_hat)?;
        tape.push_scope("attn");
        let (first, map) = channel_attention(
            tape,
            parts[0],
            parts[1],
            parts[2],
            cfg.heads(0),
            p[self.temperatures[0]],
            cfg.alpha_divides,
        )?;
        tape.pop_scope();
        tape.pop_scope();

        let mut outputs = vec![first];
        let mut maps = vec![map];
        for s in 1..cfg.attention_count {
            tape.push_scope(format!("stage{}", s + 1));
            let prev = *outputs.last().expect("stage one output");
            let input = if cfg.intra_residual {
                tape.add(prev, x_hat)?
            } else {
                prev
            };
            let (q, k) = self.scaling[s - 1].forward(tape, p, input)?;
            let v = value_nta(tape, p, self.value_adjust.get(s - 1), parts[2 + s])?;
            tape.push_scope("attn");
            let (out, map) =
                channel_attention(tape, q, k, v, cfg.heads(s), p[self.temperatures[s]], cfg.alpha_divides)?;
            tape.pop_scope();
            tape.pop_scope();
            outputs.push(out);
            maps.push(map);
        }

        let fused = match &self.aggregate {
            Some(conv) => {
                tape.push_scope("aggregate");
                let cat = if outputs.len() == 1 {
                    outputs[0]
                } else {
                    tape.concat_channels(&outputs)?
                };
                let y = conv.forward(tape, p, cat)?;
                tape.pop_scope();
                y
            }
            None => *outputs.last().expect("at least one stage"),
        };
        let output = tape.add(fused, x_hat)?;
        Ok(BlockTrace {
            normalized: x_hat,
            stage_outputs: outputs,
            attention_maps: maps,
            output,
        })
    }
}

/// Baseline: three independent single-attention units (norm, attention,
/// residual) applied in sequence.
#[derive(Clone, Debug)]
pub struct StackedAttention {
    pub units: Vec<CsAttnBlock>,
}

pub const STACKED_UNITS: usize = 3;

impl StackedAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CsAttnConfig) -> Result<Self> {
        let unit_cfg = CsAttnConfig {
            attention_count: 1,
            use_aggregation: false,
            baseline_stacked: false,
            ..cfg.clone()
        };
        pb.push(name);
        let units = (0..STACKED_UNITS)
            .map(|i| CsAttnBlock::new(pb, &format!("unit{}", i + 1), &unit_cfg))
            .collect::<Result<Vec<_>>>();
        pb.pop();
        Ok(Self { units: units? })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, unit) in self.units.iter().enumerate() {
            tape.push_scope(format!("unit{}", i + 1));
            y = unit.forward(tape, p, y)?;
            tape.pop_scope();
        }
        Ok(y)
    }
}

/// Either a continuous scaling attention block or the stacked baseline,
/// chosen by [`CsAttnConfig::baseline_stacked`].
#[derive(Clone, Debug)]
pub enum AttentionBlock {
    Continuous(CsAttnBlock),
    Stacked(StackedAttention),
}

impl AttentionBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &CsAttnConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.baseline_stacked {
            StackedAttention::new(pb, name, cfg).map(Self::Stacked)
        } else {
            CsAttnBlock::new(pb, name, cfg).map(Self::Continuous)
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Self::Continuous(b) => b.forward(tape, p, x),
            Self::Stacked(b) => b.forward(tape, p, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{grad_check, GradCheckOptions, Tensor};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Attention evaluated with explicit scalar loops: rows of Q and K are
    /// normalised over tokens, scores scaled by alpha, softmaxed, applied to V.
    fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
        let norm = |r: &Vec<f64>| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let qn: Vec<_> = q.iter().map(norm).collect();
        let kn: Vec<_> = k.iter().map(norm).collect();
        let d = q.len();
        let mut out = vec![vec![0.0; v[0].len()]; d];
        for i in 0..d {
            let s: Vec<f64> = (0..d)
                .map(|j| alpha * qn[i].iter().zip(&kn[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for t in 0..v[0].len() {
                    out[i][t] += ej / z * v[j][t];
                }
            }
        }
        out
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (_, c, h, w) = t.dims4().unwrap();
        (0..c)
            .map(|ch| t.data()[ch * h * w..(ch + 1) * h * w].to_vec())
            .collect()
    }

    #[test]
    fn attention_hand_example() {
        let mut tape = Tape::new();
        let qk = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let q = tape.constant(&qk);
        let k = tape.constant(&qk);
        let v = tape.constant(&Tensor::new(vec![1, 2, 1, 1], vec![2.0, 4.0]).unwrap());
        let alpha = tape.constant(&Tensor::ones(vec![1]));
        let (out, map) = channel_attention(&mut tape, q, k, v, 1, alpha, false).unwrap();
        let e = std::f64::consts::E;
        let a = tape.value(map);
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((a[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&a[2..], &[0.5, 0.5]);
        let o = tape.value(out);
        assert!((o[0] - (2.0 * e + 4.0) / (e + 1.0)).abs() < 1e-14);
        assert!((o[0] - 2.5379).abs() < 1e-4);
        assert!((o[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_scalar_loops() {
        for (seed, heads, c, hq, hv) in [(0, 1, 4, 2, 4), (1, 2, 4, 4, 4), (2, 4, 8, 1, 2)] {
            let q = rand_tensor(&[1, c, hq, hq], seed);
            let k = rand_tensor(&[1, c, hq, hq], seed + 10);
            let v = rand_tensor(&[1, c, hv, hv], seed + 20);
            let alphas: Vec<f64> = (0..heads).map(|h| 0.5 + h as f64).collect();
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
            let av = tape.constant(&Tensor::new(vec![heads], alphas.clone()).unwrap());
            let (out, _) = channel_attention(&mut tape, qv, kv, vv, heads, av, false).unwrap();
            let got = rows(&tape.tensor(out));
            let d = c / heads;
            let (qr, kr, vr) = (rows(&q), rows(&k), rows(&v));
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let want = attention_oracle(&qr[r.clone()], &kr[r.clone()], &vr[r.clone()], alphas[h]);
                for i in 0..d {
                    for t in 0..hv * hv {
                        assert!((got[h * d + i][t] - want[i][t]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_channel_heads_pass_values_through() {
        let mut tape = Tape::new();
        let q = tape.constant(&rand_tensor(&[2, 4, 4, 4], 1));
        let k = tape.constant(&rand_tensor(&[2, 4, 4, 4], 2));
        let v = tape.constant(&rand_tensor(&[2, 4, 4, 4], 3));
        let alpha = tape.constant(&Tensor::full(vec![4], 7.5));
        let (out, _) = channel_attention(&mut tape, q, k, v, 4, alpha, false).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn attention_rows_and_token_permutation() {
        let q = rand_tensor(&[1, 4, 3, 3], 4);
        let k = rand_tensor(&[1, 4, 3, 3], 5);
        let v = rand_tensor(&[1, 4, 6, 6], 6);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..9).collect();
            p.reverse();
            p.swap(0, 4);
            p
        };
        let permute_tokens = |t: &Tensor<f64>| {
            let data: Vec<f64> = (0..4)
                .flat_map(|c| perm.iter().map(move |&j| t.data()[c * 9 + j]))
                .collect();
            Tensor::new(vec![1, 4, 3, 3], data).unwrap()
        };
        let mut tape = Tape::new();
        let alpha = tape.constant(&Tensor::full(vec![2], 1.3));
        let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let (out, map) = channel_attention(&mut tape, qv, kv, vv, 2, alpha, false).unwrap();
        for row in tape.value(map).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
        let (qp, kp) = (tape.constant(&permute_tokens(&q)), tape.constant(&permute_tokens(&k)));
        let (out_p, _) = channel_attention(&mut tape, qp, kp, vv, 2, alpha, false).unwrap();
        for (a, b) in tape.value(out).iter().zip(tape.value(out_p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_gives_uniform_maps() {
        let mut tape = Tape::new();
        let q = tape.constant(&rand_tensor(&[1, 8, 4, 4], 1));
        let k = tape.constant(&rand_tensor(&[1, 8, 4, 4], 2));
        let v = tape.constant(&rand_tensor(&[1, 8, 4, 4], 3));
        let alpha = tape.constant(&Tensor::zeros(vec![2]));
        let (_, map) = channel_attention(&mut tape, q, k, v, 2, alpha, false).unwrap();
        assert!(tape.value(map).iter().all(|&a| a == 0.25));
    }

    #[test]
    fn divided_temperature_is_reciprocal_of_multiplied() {
        let mut tape = Tape::new();
        let q = tape.constant(&rand_tensor(&[1, 4, 2, 2], 1));
        let k = tape.constant(&rand_tensor(&[1, 4, 2, 2], 2));
        let v = tape.constant(&rand_tensor(&[1, 4, 2, 2], 3));
        let a2 = tape.constant(&Tensor::full(vec![1], 2.0));
        let a_half = tape.constant(&Tensor::full(vec![1], 0.5));
        let (x, _) = channel_attention(&mut tape, q, k, v, 1, a2, true).unwrap();
        let (y, _) = channel_attention(&mut tape, q, k, v, 1, a_half, false).unwrap();
        for (a, b) in tape.value(x).iter().zip(tape.value(y)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn build(cfg: &CsAttnConfig, seed: u64) -> (ParamStore<f64>, CsAttnBlock) {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let block = CsAttnBlock::new(&mut pb, "block", cfg).unwrap();
        (store, block)
    }

    #[test]
    fn qkv_split_with_identity_projections() {
        let cfg = CsAttnConfig {
            channels: 3,
            progressive_heads: false,
            ..Default::default()
        };
        let (mut store, block) = build(&cfg, 1);
        let pw = store.get_mut(block.qkv_pointwise.weight);
        pw.data_mut().fill(0.0);
        for r in 0..15 {
            pw.data_mut()[r * 3 + r % 3] = 1.0;
        }
        let dw = store.get_mut(block.qkv_depthwise.weight);
        dw.data_mut().fill(0.0);
        for r in 0..15 {
            dw.data_mut()[r * 9 + 4] = 1.0;
        }
        for b in [block.qkv_pointwise.bias.unwrap(), block.qkv_depthwise.bias.unwrap()] {
            store.get_mut(b).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = rand_tensor(&[1, 3, 4, 4], 3);
        let xv = tape.constant(&x);
        let parts = block.qkv_split(&mut tape, &p, xv).unwrap();
        assert_eq!(parts.len(), 5);
        for part in parts {
            assert_eq!(tape.shape(part), &[1, 3, 4, 4]);
            assert_eq!(tape.value(part), x.data());
        }
    }

    #[test]
    fn value_adjust_paths() {
        let cfg = CsAttnConfig {
            channels: 4,
            use_value_nta: false,
            ..Default::default()
        };
        let (store, block) = build(&cfg, 2);
        assert!(block.value_adjust.is_empty());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let v = tape.constant(&rand_tensor(&[1, 4, 2, 2], 4));
        assert_eq!(value_nta(&mut tape, &p, None, v).unwrap(), v);

        let cfg = CsAttnConfig {
            channels: 4,
            activation: Activation::Relu,
            ..Default::default()
        };
        let (mut store, block) = build(&cfg, 2);
        let adj = &block.value_adjust[0];
        assert_eq!(adj.conv.numel(), 4 * 4 + 4);
        let w = store.get_mut(adj.conv.weight);
        w.data_mut().fill(0.0);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        store.get_mut(adj.conv.bias.unwrap()).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let neg = tape.constant(&rand_tensor(&[1, 4, 2, 2], 5).map(|x| -x.abs() - 0.1));
        let out = value_nta(&mut tape, &p, Some(adj), neg).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_path_shapes() {
        let cfg = CsAttnConfig {
            channels: 4,
            ..Default::default()
        };
        let (store, block) = build(&cfg, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&rand_tensor(&[1, 4, 8, 12], 6));
        for (path, r) in block.scaling.iter().zip([2, 4]) {
            assert_eq!(path.factor, r);
            let (q, k) = path.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.shape(q), &[1, 4, 8 / r, 12 / r]);
            assert_eq!(tape.shape(k), &[1, 4, 8 / r, 12 / r]);
        }
        let bad = tape.constant(&rand_tensor(&[1, 4, 6, 6], 7));
        assert!(block.scaling[1].forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn block_preserves_shape() {
        let cfg = CsAttnConfig {
            channels: 8,
            base_heads: 2,
            ..Default::default()
        };
        let (store, block) = build(&cfg, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&rand_tensor(&[2, 8, 16, 16], 8));
        let trace = block.forward_traced(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(trace.output), &[2, 8, 16, 16]);
        assert_eq!(tape.shape(trace.attention_maps[0]), &[2, 2, 4, 4]);
        assert_eq!(tape.shape(trace.attention_maps[1]), &[2, 4, 2, 2]);
        assert_eq!(tape.shape(trace.attention_maps[2]), &[2, 4, 2, 2]);
        let odd = tape.constant(&rand_tensor(&[1, 8, 6, 6], 9));
        assert!(block.forward(&mut tape, &p, odd).is_err());
    }

    #[test]
    fn config_validation() {
        let bad_heads = CsAttnConfig {
            channels: 6,
            base_heads: 2,
            ..Default::default()
        };
        assert!(bad_heads.validate().is_err());
        let flat = CsAttnConfig {
            progressive_heads: false,
            ..bad_heads.clone()
        };
        assert!(flat.validate().is_ok());
        let count = CsAttnConfig {
            attention_count: 4,
            ..Default::default()
        };
        assert!(count.validate().is_err());
        let sched = CsAttnConfig {
            head_schedule: Some([1, 2, 4]),
            channels: 8,
            ..Default::default()
        };
        assert_eq!((sched.heads(0), sched.heads(1), sched.heads(2)), (1, 2, 4));
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cases = [
            (8, 1, [1, 8, 8, 8], 11),
            (8, 2, [1, 8, 8, 4], 12),
            (4, 1, [2, 4, 4, 8], 13),
        ];
        for (c, heads, shape, seed) in cases {
            let cfg = CsAttnConfig {
                channels: c,
                base_heads: heads,
                ..Default::default()
            };
            let (store, block) = build(&cfg, seed);
            let weights = rand_tensor(&shape, seed + 100);
            let f = |t: &mut Tape<f64>, v: &[Var]| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = block.forward(t, &p, v[0])?;
                let w = t.constant(&weights);
                let y = t.mul(y, w)?;
                t.sum_all(y)
            };
            let mut inputs = vec![rand_tensor(&shape, seed)];
            inputs.extend(store.tensors().iter().cloned());
            let opts = GradCheckOptions {
                max_coords_per_input: Some(24),
                ..Default::default()
            };
            let report = grad_check(f, &inputs, &opts).unwrap();
            assert!(report.passed(), "{shape:?}: {report:?}");
        }
    }
}
