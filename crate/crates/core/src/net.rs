//! Three-level multi-input/multi-output encoder–decoder built from
//! attention blocks, and its parameter/FLOPs/activation-memory accounting.
//!
//! Level ℓ runs at `C·2^(ℓ-1)` channels and `1/2^(ℓ-1)` resolution. Levels
//! two and three also ingest the area-downsampled input image; every
//! decoder level (and the bottleneck) emits a 3-channel residual added to
//! the input image at its own scale.

use serde::{Deserialize, Serialize};

use crate::block::{AttentionBlock, CsAttnConfig};
use crate::error::{Error, Result};
use crate::nn::{self, ConvParams};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::tape::Cost;
use crate::tensor::{dims4, CostEntry, Scalar, Tape, Tensor, Var};

pub const LEVELS: usize = 3;
pub const IMAGE_CHANNELS: usize = 3;

/// Input extents must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub blocks_per_level: [usize; LEVELS],
    /// Block template; its `channels` field is replaced per level.
    pub csattn: CsAttnConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            blocks_per_level: [1, 1, 2],
            csattn: CsAttnConfig {
                channels: 8,
                ..Default::default()
            },
        }
    }
}

impl NetConfig {
    pub fn level_channels(&self) -> [usize; LEVELS] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn block_config(&self, level: usize) -> CsAttnConfig {
        self.csattn.with_channels(self.level_channels()[level])
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.blocks_per_level.contains(&0) {
            return Err(Error::Config("blocks_per_level entries must be at least 1".into()));
        }
        for level in 0..LEVELS {
            self.block_config(level).validate()?;
        }
        Ok(())
    }
}

/// Restored estimates at scales 1, ½ and ¼.
#[derive(Clone, Copy, Debug)]
pub struct MultiScale {
    pub outputs: [Var; LEVELS],
}

#[derive(Clone, Debug)]
pub struct Net {
    pub cfg: NetConfig,
    pub stem: ConvParams,
    pub encoders: Vec<Vec<AttentionBlock>>,
    /// Stride-2 convs from level ℓ to ℓ+1.
    pub downs: Vec<ConvParams>,
    /// Image embeds for levels two and three.
    pub embeds: Vec<ConvParams>,
    pub fuse_inputs: Vec<ConvParams>,
    /// 1×1 expansions preceding pixel shuffle, from level ℓ+1 to ℓ.
    pub ups: Vec<ConvParams>,
    pub fuse_skips: Vec<ConvParams>,
    pub decoders: Vec<Vec<AttentionBlock>>,
    /// Residual heads, indexed by level.
    pub heads: Vec<ConvParams>,
}

fn blocks<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &CsAttnConfig, count: usize) -> Result<Vec<AttentionBlock>> {
    (0..count)
        .map(|i| AttentionBlock::new(pb, &format!("block{}", i + 1), cfg))
        .collect()
}

impl Net {
    /// Builds the network with seeded fan-in uniform initialisation.
    pub fn build<T: Scalar>(cfg: &NetConfig, seed: u64) -> Result<(Net, ParamStore<T>)> {
        cfg.validate()?;
        let ch = cfg.level_channels();
        let bias = cfg.csattn.conv_bias;
        let mut store = ParamStore::new();
        let pb = &mut ParamBuilder::new(&mut store, seed);

        let stem = ConvParams::full3x3(pb, "stem", IMAGE_CHANNELS, ch[0], 1, bias);
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut embeds = Vec::new();
        let mut fuse_inputs = Vec::new();
        for level in 0..LEVELS {
            pb.push(format!("enc{}", level + 1));
            if level > 0 {
                downs.push(ConvParams::full3x3(pb, "down", ch[level - 1], ch[level], 2, bias));
                embeds.push(ConvParams::full3x3(pb, "embed", IMAGE_CHANNELS, ch[level], 1, bias));
                fuse_inputs.push(ConvParams::pointwise(pb, "fuse", 2 * ch[level], ch[level], bias));
            }
            encoders.push(blocks(pb, &cfg.block_config(level), cfg.blocks_per_level[level])?);
            pb.pop();
        }

        let mut ups = Vec::new();
        let mut fuse_skips = Vec::new();
        let mut decoders = Vec::new();
        for level in 0..LEVELS - 1 {
            pb.push(format!("dec{}", level + 1));
            ups.push(ConvParams::pointwise(pb, "up", ch[level + 1], 4 * ch[level], bias));
            fuse_skips.push(ConvParams::pointwise(pb, "fuse", 2 * ch[level], ch[level], bias));
            decoders.push(blocks(pb, &cfg.block_config(level), cfg.blocks_per_level[level])?);
            pb.pop();
        }

        let heads = (0..LEVELS)
            .map(|level| ConvParams::full3x3(pb, &format!("head{}", level + 1), ch[level], IMAGE_CHANNELS, 1, bias))
            .collect();

        // Heads start at zero so every output begins as its input image.
        for head in &heads {
            let head: &ConvParams = head;
            for id in std::iter::once(head.weight).chain(head.bias) {
                store.get_mut(id).data_mut().fill(T::zero());
            }
        }

        let net = Net {
            cfg: cfg.clone(),
            stem,
            encoders,
            downs,
            embeds,
            fuse_inputs,
            ups,
            fuse_skips,
            decoders,
            heads,
        };
        Ok((net, store))
    }

    /// Weight and bias ids of every residual head.
    pub fn head_params(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| std::iter::once(h.weight).chain(h.bias))
            .collect()
    }

    pub fn forward_multiscale<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<MultiScale> {
        let (_, c, h, w) = dims4(tape.shape(img), "forward_multiscale")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(
                "forward_multiscale",
                format!("expected 3 channels, got {c}"),
            ));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(
                "forward_multiscale",
                format!("{h}x{w} not divisible by {SPATIAL_MULTIPLE}"),
            ));
        }
        let images = [img, area_downsample(tape, img, 2)?, area_downsample(tape, img, 4)?];

        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = self.stem.forward(tape, p, img)?;
        for level in 0..LEVELS {
            tape.push_scope(format!("enc{}", level + 1));
            if level > 0 {
                let down = self.downs[level - 1].forward(tape, p, x)?;
                let embed = self.embeds[level - 1].forward(tape, p, images[level])?;
                let cat = tape.concat_channels(&[down, embed])?;
                x = self.fuse_inputs[level - 1].forward(tape, p, cat)?;
            }
            x = run_blocks(tape, p, &self.encoders[level], x)?;
            tape.pop_scope();
            skips.push(x);
        }

        let mut outputs = [img; LEVELS];
        outputs[LEVELS - 1] = self.head(tape, p, LEVELS - 1, x, images[LEVELS - 1])?;
        for level in (0..LEVELS - 1).rev() {
            tape.push_scope(format!("dec{}", level + 1));
            let up = self.ups[level].forward(tape, p, x)?;
            let up = nn::pixel_shuffle(tape, up, 2)?;
            let cat = tape.concat_channels(&[up, skips[level]])?;
            x = self.fuse_skips[level].forward(tape, p, cat)?;
            x = run_blocks(tape, p, &self.decoders[level], x)?;
            tape.pop_scope();
            outputs[level] = self.head(tape, p, level, x, images[level])?;
        }
        Ok(MultiScale { outputs })
    }

    fn head<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, level: usize, x: Var, image: Var) -> Result<Var> {
        tape.push_scope(format!("head{}", level + 1));
        let residual = self.heads[level].forward(tape, p, x)?;
        let out = tape.add(residual, image);
        tape.pop_scope();
        out
    }

    /// Runs the network on a constant image and returns the three outputs.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<[Tensor<T>; LEVELS]> {
        let mut tape = Tape::new();
        let p = bind_constants(store, &mut tape);
        let x = tape.constant(img);
        let out = self.forward_multiscale(&mut tape, &p, x)?;
        Ok(out.outputs.map(|v| tape.tensor(v)))
    }
}

fn run_blocks<T: Scalar>(tape: &mut Tape<T>, p: &Bound, blocks: &[AttentionBlock], mut x: Var) -> Result<Var> {
    for (i, block) in blocks.iter().enumerate() {
        tape.push_scope(format!("block{}", i + 1));
        x = block.forward(tape, p, x)?;
        tape.pop_scope();
    }
    Ok(x)
}

/// Binds parameters as constants, so no backward rules are recorded.
pub fn bind_constants<T: Scalar>(store: &ParamStore<T>, tape: &mut Tape<T>) -> Bound {
    Bound::from_vars(store.tensors().iter().map(|t| tape.constant(t)).collect())
}

/// Area average over `factor × factor` blocks, recorded on the tape.
pub fn area_downsample<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let (n, c, h, w) = dims4(tape.shape(x), "area_downsample")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "area_downsample",
            format!("{h}x{w} not divisible by {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(x);
    }
    let (oh, ow) = (h / factor, w / factor);
    let planes = n * c;
    let inv = T::one() / T::lit((factor * factor) as f64);
    tape.emit("area_downsample", &[x], vec![n, c, oh, ow], Cost::MOVE, move |t| {
        let src = t.value(x);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc = acc + plane[(i * factor + dy) * w + j * factor + dx];
                        }
                    }
                    out[(p * oh + i) * ow + j] = acc * inv;
                }
            }
        }
        Ok((
            out,
            Some(Box::new(move |ctx, sink| {
                let g = ctx.grad();
                let slot = sink.slot(x);
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = (p * oh + y / factor) * ow + xx / factor;
                            let s = &mut slot[(p * h + y) * w + xx];
                            *s = *s + g[o] * inv;
                        }
                    }
                }
            })),
        ))
    })
}

/// Area-average downsampling of an image tensor.
pub fn downsample_image<T: Scalar>(img: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(img);
    let y = area_downsample(&mut tape, x, factor)?;
    Ok(tape.tensor(y))
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.numel()
}

/// Parameter, multiply-add and activation-memory totals of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub params: usize,
    pub height: usize,
    pub width: usize,
    /// Multiply-adds of convolutions and matrix products; linear in H·W.
    pub flops: u64,
    /// Softmax work, `heads·d²` per attention, independent of H·W.
    pub softmax_ops: u64,
    /// Bytes of every activation a training step keeps for the backward pass.
    pub peak_activation_bytes: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    fn from_tape<T: Scalar>(params: usize, height: usize, width: usize, tape: &Tape<T>) -> Self {
        let entries = tape.costs().to_vec();
        let is_softmax = |e: &CostEntry| e.op == "softmax_last";
        let flops = entries.iter().filter(|e| !is_softmax(e)).map(|e| e.macs).sum();
        let softmax_ops = entries.iter().filter(|e| is_softmax(e)).map(|e| e.macs).sum();
        let elems: u64 = entries.iter().map(|e| e.activation_elems).sum();
        Self {
            params,
            height,
            width,
            flops,
            softmax_ops,
            peak_activation_bytes: elems * std::mem::size_of::<f32>() as u64,
            breakdown: entries,
        }
    }

    /// Multiply-adds of `op` over all entries whose scope ends with `scope`.
    pub fn scoped_macs(&self, scope: &str, op: &str) -> u64 {
        self.breakdown
            .iter()
            .filter(|e| e.op == op && (e.scope == scope || e.scope.ends_with(&format!("/{scope}"))))
            .map(|e| e.macs)
            .sum()
    }

    /// Score (`Q·Kᵀ`) multiply-adds of the given attention stage (1-based).
    pub fn attention_score_macs(&self, stage: usize) -> u64 {
        self.scoped_macs(&format!("stage{stage}/attn"), "matmul_transposed_b")
    }

    /// Value-application (`A·V`) multiply-adds of the given attention stage.
    pub fn attention_apply_macs(&self, stage: usize) -> u64 {
        self.scoped_macs(&format!("stage{stage}/attn"), "matmul")
    }

    pub fn to_text(&self) -> String {
        format!(
            "input: {}x{}\nparams: {}\nflops (multiply-adds): {}\nsoftmax ops: {}\npeak activation bytes: {}\n",
            self.height, self.width, self.params, self.flops, self.softmax_ops, self.peak_activation_bytes
        )
    }

    /// Per-operation breakdown.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,op,macs,activation_elems\n");
        for e in &self.breakdown {
            out.push_str(&format!("{},{},{},{}\n", e.scope, e.op, e.macs, e.activation_elems));
        }
        out
    }
}

/// Cost of one network forward pass on a single `3×H×W` image.
pub fn count_flops(cfg: &NetConfig, height: usize, width: usize) -> Result<CostReport> {
    let (net, store) = Net::build::<f32>(cfg, 0)?;
    let mut tape = Tape::shape_only();
    let p = store.bind(&mut tape);
    let img = tape.placeholder(&[1, IMAGE_CHANNELS, height, width], false);
    net.forward_multiscale(&mut tape, &p, img)?;
    Ok(CostReport::from_tape(store.numel(), height, width, &tape))
}

/// Cost of one attention block on a single `C×H×W` input.
pub fn block_cost(cfg: &CsAttnConfig, height: usize, width: usize) -> Result<CostReport> {
    let mut store = ParamStore::<f32>::new();
    let block = AttentionBlock::new(&mut ParamBuilder::new(&mut store, 0), "block", cfg)?;
    let mut tape = Tape::shape_only();
    let p = store.bind(&mut tape);
    let x = tape.placeholder(&[1, cfg.channels, height, width], false);
    block.forward(&mut tape, &p, x)?;
    Ok(CostReport::from_tape(store.numel(), height, width, &tape))
}
