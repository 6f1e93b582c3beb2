//! Optimization loop: patches, per-image interventions, the five-pass forward,
//! the composite loss and Adam, with per-epoch validation and checkpoints.
//!
//! The gradient path always runs on one thread in a fixed order, so two runs
//! with the same config and seed write byte-identical logs and checkpoints.
//! `deterministic` is recorded in the config echo but does not change
//! execution.

mod adam;
mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use adam::{clip_global_norm, global_norm, Adam};
pub use checkpoint::{Checkpoint, TrainState, FORMAT_VERSION, MAGIC};
pub use config::{TrainConfig, KEYS};

use crate::autograd::Tape;
use crate::data::{Dataset, PatchSampler};
use crate::error::{Error, Result};
use crate::interventions::make_intervention_set;
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_model, MetricReport};
use crate::model::FusionNet;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss.log";
pub const VAL_CSV: &str = "val_metrics.csv";
pub const CLIP_LOG: &str = "clip.log";
pub const CONFIG_ECHO: &str = "config.txt";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub best_val_psnr: f64,
    pub steps: u64,
    pub history: Vec<StepReport>,
    pub last_report: Option<MetricReport>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    net: FusionNet<f32>,
    state: TrainState,
    train: &'a Dataset,
    val: &'a Dataset,
    sampler: PatchSampler,
}

impl<'a> Trainer<'a> {
    /// Fresh run, or a resumed one when `config.resume` names a checkpoint.
    pub fn new(config: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset(format!("training set {} is empty", train.name())));
        }
        if val.is_empty() {
            return Err(Error::Dataset(format!("validation set {} is empty", val.name())));
        }
        let (net, state) = match &config.resume {
            Some(path) => {
                let ckpt = Checkpoint::load(path)?;
                if ckpt.config.model_config() != config.model_config() {
                    return Err(Error::config(format!(
                        "checkpoint {} was trained with a different architecture",
                        path.display()
                    )));
                }
                let net = ckpt.model()?;
                let mut state = ckpt.state.ok_or_else(|| {
                    Error::Format(format!("{} holds no training state", path.display()))
                })?;
                state.adam.lr = config.learning_rate;
                (net, state)
            }
            None => {
                let mut init = seeded(derive_seed(config.seed, 0, 0));
                let net = FusionNet::new(config.model_config(), &mut init)?;
                let state = TrainState {
                    step: 0,
                    epoch: 0,
                    best_val_psnr: None,
                    adam: Adam::new(config.learning_rate),
                    rng: seeded(derive_seed(config.seed, 1, 0)),
                    order: Vec::new(),
                    cursor: 0,
                };
                (net, state)
            }
        };
        let sampler = PatchSampler::new(config.patch);
        Ok(Trainer {
            config,
            net,
            state,
            train,
            val,
            sampler,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &FusionNet<f32> {
        &self.net
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch as u64
        } else {
            self.train.len().div_ceil(self.config.batch_size) as u64
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.net.params().clone(),
            state: Some(self.state.clone()),
        }
    }

    /// Next `batch_size` training indices; reshuffles after each full pass.
    fn next_indices(&mut self) -> Vec<usize> {
        let n = self.train.len();
        (0..self.config.batch_size)
            .map(|_| {
                if self.state.cursor >= self.state.order.len() {
                    self.state.order = (0..n as u32).collect();
                    self.state.order.shuffle(&mut self.state.rng);
                    self.state.cursor = 0;
                }
                self.state.cursor += 1;
                self.state.order[self.state.cursor - 1] as usize
            })
            .collect()
    }

    /// One optimization step. A non-finite loss or gradient aborts with a
    /// `Numeric` error carrying the step's loss breakdown.
    pub fn step(&mut self) -> Result<StepReport> {
        let p = self.config.patch;
        let masks = self.config.mask_config();
        let mut vis = Vec::with_capacity(self.config.batch_size);
        let mut irs = Vec::with_capacity(self.config.batch_size);
        let mut sets = Vec::with_capacity(self.config.batch_size);
        for i in self.next_indices() {
            let patch = self.sampler.sample(self.train.get(i), &mut self.state.rng)?;
            sets.push(make_intervention_set(p, p, &masks, &mut self.state.rng)?);
            vis.push(patch.visible_luma);
            irs.push(patch.infrared);
        }
        let n = vis.len();
        let stack = |xs: &[Tensor<f32>]| -> Result<Tensor<f32>> {
            Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?.reshape(vec![n, 1, p, p])
        };
        let (vi, ir) = (stack(&vis)?, stack(&irs)?);

        let weights = self.config.loss_weights();
        let mut tape = Tape::new();
        let params = self.net.bind(&mut tape, true);
        let bundle = self
            .net
            .forward_with_interventions_vars(&mut tape, &params, &vi, &ir, &sets)?;
        let viv = tape.constant(vi);
        let irv = tape.constant(ir);
        let lv = total_loss(&mut tape, &bundle, viv, irv, &weights)?;
        let loss = lv.breakdown(&tape, &weights);
        let step = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}: {loss}")));
        }
        let grads = tape.backward(lv.total);
        let mut g: BTreeMap<String, Tensor<f32>> = params
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, tape.shape(v))))
            .collect();
        if let Some((name, _)) = g.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at step {step}: {loss}"
            )));
        }
        let (grad_norm, clipped) = clip_global_norm(&mut g, self.config.clip_norm);
        if clipped {
            log::warn!(
                "step {step}: gradient norm {grad_norm:.4} clipped to {}",
                self.config.clip_norm
            );
        }
        self.state.adam.step(self.net.params_mut(), &g)?;
        self.state.step = step;
        Ok(StepReport {
            step,
            loss,
            grad_norm,
            clipped,
        })
    }

    /// Trains until `epochs * steps_per_epoch` steps, writing logs and
    /// checkpoints under `out_dir`.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_file(&out.join(CONFIG_ECHO), &self.config.to_string())?;
        let resuming = self.state.step > 0;
        let mut loss_log = open_log(&out.join(LOSS_LOG), resuming, LossBreakdown::LOG_HEADER)?;
        let mut clip_log = open_log(&out.join(CLIP_LOG), resuming, "step grad_norm clip_norm")?;
        let mut val_csv = open_log(&out.join(VAL_CSV), resuming, "epoch,step,AG,SF,PSNR,CC,Qabf")?;

        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let mut history = Vec::new();
        let mut last_report = None;
        while self.state.step < total {
            let r = self.step()?;
            writeln!(loss_log, "{}", r.loss.log_line(r.step as usize)).map_err(|e| Error::io(out.join(LOSS_LOG), e))?;
            if r.clipped {
                writeln!(clip_log, "{} {} {}", r.step, r.grad_norm, self.config.clip_norm)
                    .map_err(|e| Error::io(out.join(CLIP_LOG), e))?;
            }
            history.push(r);
            if r.step % spe == 0 {
                self.state.epoch += 1;
                let epoch = self.state.epoch;
                let name = epoch_checkpoint_name(epoch);
                let report = evaluate_model(&self.net, self.val, Some(name.clone()))?;
                let m = &report.mean;
                writeln!(
                    val_csv,
                    "{epoch},{},{},{},{},{},{}",
                    r.step, m.ag, m.sf, m.psnr, m.cc, m.qabf
                )
                .map_err(|e| Error::io(out.join(VAL_CSV), e))?;
                log::info!("epoch {epoch} step {}: {} | val PSNR {:.3}", r.step, r.loss, m.psnr);
                let improved = self.state.best_val_psnr.is_none_or(|b| m.psnr > b);
                if improved {
                    self.state.best_val_psnr = Some(m.psnr);
                }
                for f in [&mut loss_log, &mut clip_log, &mut val_csv] {
                    f.flush().map_err(|e| Error::io(&out, e))?;
                }
                let ckpt = self.checkpoint();
                ckpt.save(&out.join(&name))?;
                ckpt.save(&out.join(LAST))?;
                if improved {
                    ckpt.save(&out.join(BEST))?;
                }
                last_report = Some(report);
            }
        }
        for f in [&mut loss_log, &mut clip_log, &mut val_csv] {
            f.flush().map_err(|e| Error::io(&out, e))?;
        }
        Ok(TrainOutcome {
            best: out.join(BEST),
            last: out.join(LAST),
            best_val_psnr: self.state.best_val_psnr.unwrap_or(f64::NAN),
            steps: self.state.step,
            history,
            last_report,
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, append: bool, header: &str) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains on `train_set`, validating on `val_set` after every epoch.
pub fn train(config: TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config, train_set, val_set)?.run()
}

/// Metrics of a checkpoint's model on `val_set`.
pub fn validate(checkpoint: &Path, val_set: &Dataset) -> Result<MetricReport> {
    let net = Checkpoint::load(checkpoint)?.model()?;
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned());
    evaluate_model(&net, val_set, name)
}

/// Parses a loss log back into `(step, fidelity, inv, nec, reg, total)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, [f64; 5])>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LossBreakdown::LOG_HEADER) {
        return Err(Error::Format(format!("{}: missing loss log header", path.display())));
    }
    lines
        .map(|l| {
            let bad = || Error::Format(format!("{}: bad loss line {l:?}", path.display()));
            let mut it = l.split_whitespace();
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let mut vals = [0.0; 5];
            for v in &mut vals {
                *v = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            }
            Ok((step, vals))
        })
        .collect()
}
