//! Deterministic training loop: AdamW under a cosine schedule with
//! per-step CSV logging and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::infer::pad_reflect;
use crate::loss::{multiscale_loss, LossTerms, LossWeights};
use crate::metrics::{self, Metrics};
use crate::net::{bind_constants, downsample_image, Net, SPATIAL_MULTIPLE};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Batches kept in flight between the sampler thread and the optimiser.
const QUEUE_DEPTH: usize = 4;
pub const LOG_FILE: &str = "train_log.csv";
pub const CSV_HEADER: &str = "step,lr,loss,l1,freq,psnr";

/// One optimisation step as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub freq: f64,
    /// PSNR of the full-scale output on the step's batch.
    pub psnr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        // Shortest round-trip formatting: the file reproduces the values exactly.
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.l1, self.freq, self.psnr
        )
    }
}

/// Loss and image metrics averaged over whole training images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
}

pub struct TrainOutcome {
    pub net: Net,
    pub params: ParamStore<f32>,
    pub logs: Vec<StepLog>,
    pub eval: Evaluation,
    pub seconds: f64,
}

/// Seeded epoch-shuffled crop sampler. The same seed yields the same
/// batch sequence regardless of which thread draws it.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    patch: usize,
    flip: bool,
}

impl BatchSampler {
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            rng,
            order: (0..dataset_len).collect(),
            pos: dataset_len,
            batch: cfg.batch,
            patch: cfg.patch,
            flip: cfg.flip,
        }
    }

    pub fn next_batch(&mut self, data: &PairDataset) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut indices = Vec::with_capacity(self.batch);
        while indices.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            indices.push(self.order[self.pos]);
            self.pos += 1;
        }
        data.batch(&indices, self.patch, self.flip, &mut self.rng)
    }
}

/// Records the multiscale loss of `net` on one batch; returns the loss terms
/// and the full-scale prediction.
pub fn forward_loss<T: Scalar>(
    net: &Net,
    tape: &mut Tape<T>,
    p: &Bound,
    degraded: &Tensor<T>,
    clean: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(LossTerms, Var)> {
    let x = tape.constant(degraded);
    let out = net.forward_multiscale(tape, p, x)?;
    let gts = [
        tape.constant(clean),
        tape.constant(&downsample_image(clean, 2)?),
        tape.constant(&downsample_image(clean, 4)?),
    ];
    let terms = multiscale_loss(tape, &out.outputs, &gts, weights)?;
    Ok((terms, out.outputs[0]))
}

/// Loss value of a fixed parameter set on one batch.
pub fn batch_loss<T: Scalar>(
    net: &Net,
    store: &ParamStore<T>,
    degraded: &Tensor<T>,
    clean: &Tensor<T>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = bind_constants(store, &mut tape);
    let (terms, _) = forward_loss(net, &mut tape, &p, degraded, clean, weights)?;
    Ok(tape.item(terms.total).as_f64())
}

/// Averages loss and metrics over every image of `data`, one image at a time.
/// Images whose sides are not multiples of 16 are reflect-padded for the
/// forward pass; metrics use the unpadded window.
pub fn evaluate(
    net: &Net,
    store: &ParamStore<f32>,
    data: &PairDataset,
    weights: &LossWeights,
    y_channel: bool,
) -> Result<Evaluation> {
    let (mut loss, mut psnr, mut ssim, mut mae) = (0.0, 0.0, 0.0, 0.0);
    for (degraded, clean) in data.degraded.iter().zip(&data.clean) {
        let (_, _, h, w) = degraded.dims4()?;
        let padded = pad_reflect(degraded, SPATIAL_MULTIPLE)?;
        let padded_gt = pad_reflect(clean, SPATIAL_MULTIPLE)?;
        let mut tape = Tape::new();
        let p = bind_constants(store, &mut tape);
        let (terms, full) = forward_loss(net, &mut tape, &p, &padded, &padded_gt, weights)?;
        loss += tape.item(terms.total) as f64;
        let pred = crate::infer::crop(&tape.tensor(full), h, w)?;
        let m = Metrics::evaluate(&pred, clean, y_channel)?;
        psnr += m.psnr;
        ssim += m.ssim;
        mae += m.mae;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        metrics: Metrics {
            psnr: psnr / n,
            ssim: ssim / n,
            mae: mae / n,
        },
    })
}

fn checkpoint_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.csat"))
}

fn save_checkpoint(dir: Option<&Path>, tag: &str, store: &ParamStore<f32>, cfg: &TrainConfig) -> Result<()> {
    match dir {
        Some(d) => checkpoint::save(&checkpoint_path(d, tag), store, Some(&cfg.net)),
        None => Ok(()),
    }
}

/// Trains from the configuration's own data source.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.data.load(cfg.patch)?;
    train_on(cfg, &data)
}

/// Trains on an already loaded dataset.
///
/// Batches are produced by a sampler thread through a bounded queue; the
/// sampler is the only consumer of its RNG, so the sequence is seeded and
/// independent of timing.
pub fn train_on(cfg: &TrainConfig, data: &PairDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let start = Instant::now();
    let (net, mut store) = Net::build::<f32>(&cfg.net, cfg.seed)?;
    let out_dir = cfg.output_dir.as_deref();
    let mut csv = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join(LOG_FILE);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    save_checkpoint(out_dir, "initial", &store, cfg)?;

    let mut opt = AdamW::new(cfg.optimizer(), &store);
    let mut logs = Vec::with_capacity(cfg.total_steps);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel(QUEUE_DEPTH);
        let mut sampler = BatchSampler::new(cfg, data.len());
        scope.spawn(move || {
            for _ in 0..cfg.total_steps {
                if tx.send(sampler.next_batch(data)).is_err() {
                    break;
                }
            }
        });

        for step in 0..cfg.total_steps {
            let (degraded, clean) = rx
                .recv()
                .map_err(|_| Error::Dataset("batch sampler stopped".into()))??;
            let lr = cosine_lr(step, cfg.total_steps, cfg.lr_init, cfg.lr_final)?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let diverged = |what: &'static str| -> Result<()> {
                save_checkpoint(out_dir, "last_good", &store, cfg)?;
                Err(Error::Diverged { step, what })
            };
            let (terms, full) = match forward_loss(&net, &mut tape, &p, &degraded, &clean, &cfg.loss) {
                Err(Error::NonFinite { op }) => return diverged(op),
                r => r?,
            };
            let loss = tape.item(terms.total) as f64;
            if !loss.is_finite() {
                return diverged("loss");
            }
            let grads = tape.backward(terms.total)?;
            let zeros: Vec<Vec<f32>> = p
                .vars()
                .iter()
                .map(|&v| vec![0.0; tape.shape(v).iter().product()])
                .collect();
            let slices: Vec<&[f32]> = p
                .vars()
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| grads.get(v).unwrap_or(z))
                .collect();
            if slices.iter().any(|g| !g.iter().all(|v| v.is_finite())) {
                return diverged("gradient");
            }
            let record = StepLog {
                step,
                lr,
                loss,
                l1: tape.item(terms.l1) as f64,
                freq: tape.item(terms.freq) as f64,
                psnr: metrics::psnr(&tape.tensor(full), &clean, 1.0)?,
            };
            opt.step(&mut store, &slices, lr)?;
            drop(tape);

            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if step % 100 == 0 || step + 1 == cfg.total_steps {
                log::info!("step {step:>6}  lr {lr:.3e}  loss {loss:.5}  psnr {:.2}", record.psnr);
            }
            logs.push(record);
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
                save_checkpoint(out_dir, &format!("step_{done:06}"), &store, cfg)?;
            }
        }
        Ok(())
    })?;
    if let Some((mut f, path)) = csv {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    save_checkpoint(out_dir, "final", &store, cfg)?;

    let eval = evaluate(&net, &store, data, &cfg.loss, cfg.y_channel)?;
    Ok(TrainOutcome {
        net,
        params: store,
        logs,
        eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}
