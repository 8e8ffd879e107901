//! SGD with momentum, the poly schedule, evaluation and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{BinaryMap, Sample};
use crate::error::{Error, Result};
use crate::losses::{scalar_of, total_loss};
use crate::metrics::{aggregate, evaluate, AggregateReport, MetricReport};
use crate::nn::{Gradients, Graph, ModuleParams};
use crate::pbe::PbeNet;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many iterations (and after the last one).
    pub eval_every: usize,
    /// Side length images are resized to when loaded from disk.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            weight_decay: 0.0001,
            momentum: 0.9,
            power: 0.9,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            eval_every: 100,
            image_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.power >= 0.0) {
            return bad("weight_decay and power must be ≥ 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad("image_size must be a positive multiple of 16");
        }
        Ok(())
    }

    pub fn max_iter(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// `lr0·(1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = (iter.min(max_iter) as f64) / max_iter.max(1) as f64;
    cfg.lr0 * (1.0 - frac).powf(cfg.power)
}

/// Weight decay applies to convolution kernels, the ECA kernel and BN
/// scales; biases and BN shifts are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".gamma")
}

/// Momentum buffers, one per learnable parameter in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Velocity<T> {
    pub fn zeros(params: &ModuleParams<T>) -> Self {
        Self {
            entries: params
                .learnable()
                .map(|e| (e.name.clone(), Tensor::zeros(e.tensor.shape()).expect("valid shape")))
                .collect(),
        }
    }
}

/// `g' = g + wd·w` (decayed parameters only), `v ← μv + g'`, `w ← w − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModuleParams<T>,
    grads: &Gradients<T>,
    velocity: &mut Velocity<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(cfg.momentum),
        T::from_f64_lossy(cfg.weight_decay),
    );
    let mut vel = velocity.entries.iter_mut();
    for e in params.entries_mut().iter_mut().filter(|e| e.learnable) {
        let g = grads.get(&e.name).ok_or_else(|| Error::MissingGrad(e.name.clone()))?;
        let (vname, v) = vel.next().ok_or_else(|| Error::UnknownParam(e.name.clone()))?;
        if *vname != e.name {
            return Err(Error::UnknownParam(vname.clone()));
        }
        let decay = decays(&e.name);
        for ((w, &g), v) in e.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = if decay { g + wd * *w } else { g };
            *v = mu * *v + g;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub report: AggregateReport,
}

/// Stacks the images, masks and boundary targets of a batch.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let pick = |f: fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| f(s)).collect();
        Tensor::stack_batch(&parts)
    };
    Ok((pick(|s| &s.image)?, pick(|s| &s.mask)?, pick(|s| &s.boundary)?))
}

/// Eval-mode forward pass. Returns the mask probabilities and the stage
/// boundary maps.
pub fn predict(
    net: &PbeNet,
    params: &mut ModuleParams<f32>,
    images: Tensor<f32>,
) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let mut g = Graph::new(params, false);
    let x = g.input(images);
    let out = net.forward(&mut g, x)?;
    let mask = g.tape.value(out.mask_prob).clone();
    let maps = out.boundary_probs.iter().map(|&b| g.tape.value(b).clone()).collect();
    Ok((mask, maps))
}

/// Per-sample metrics of the thresholded eval-mode prediction.
pub fn evaluate_samples(
    net: &PbeNet,
    params: &mut ModuleParams<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _, _) = stack(&refs)?;
        let (prob, _) = predict(net, params, images)?;
        for (i, s) in chunk.iter().enumerate() {
            let pred = BinaryMap::from_tensor(&prob.batch_item(i)?)?;
            let gt = BinaryMap::from_tensor(&s.mask)?;
            let mut rep = evaluate(&pred, &gt)?;
            rep.id = Some(s.id.clone());
            reports.push(rep);
        }
    }
    Ok(reports)
}

/// What happened during a run.
#[derive(Debug, Clone)]
pub enum Progress<'a> {
    Step(&'a HistoryEntry),
    Eval(&'a EvalRecord),
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<HistoryEntry>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub best_params: Option<ModuleParams<f32>>,
    pub params: ModuleParams<f32>,
    pub velocity: Velocity<f32>,
    pub iterations: usize,
}

pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    put("iter,loss,lr".into())?;
    for h in history {
        put(format!("{},{},{}", h.iter, h.loss, h.lr))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialization seeded by `cfg.train.seed`.
///
/// With `out_dir` set, writes `best.ckpt` whenever validation Dice improves,
/// and `last.ckpt` plus `history.csv` at the end.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tc = &cfg.train;
    let net = PbeNet::new(cfg.model.clone())?;
    let mut params: ModuleParams<f32> = net.init_params(tc.seed)?;
    let mut velocity = Velocity::zeros(&params);
    let max_iter = tc.max_iter(train_set.len());
    let mut rng = SplitMix64::for_name(tc.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(max_iter);
    let mut evals = Vec::new();
    let mut best: Option<EvalRecord> = None;
    let mut best_params = None;
    let mut iter = 0;
    for _ in 0..tc.epochs {
        rng.shuffle(&mut order);
        for idx in order.chunks(tc.batch_size) {
            let lr = poly_lr(iter, max_iter, tc);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (images, masks, bounds) = stack(&batch)?;
            let mut g = Graph::new(&mut params, true);
            let x = g.input(images);
            let out = net.forward(&mut g, x)?;
            let parts = total_loss(&mut g.tape, &out, &masks, &bounds, &cfg.loss)?;
            let loss = scalar_of(&g.tape, parts.total);
            if !loss.is_finite() {
                let first = g.tape.first_non_finite().unwrap_or_else(|| "none".into());
                return Err(Error::NonFinite(format!(
                    "loss at iteration {iter} (first non-finite tensor: {first})"
                )));
            }
            let grads = g.backward(parts.total)?;
            sgd_step(&mut params, &grads, &mut velocity, lr, tc)?;
            history.push(HistoryEntry { iter, loss, lr });
            progress(Progress::Step(history.last().expect("just pushed")));
            iter += 1;

            if !val_set.is_empty() && (iter % tc.eval_every == 0 || iter == max_iter) {
                let reports = evaluate_samples(&net, &mut params, val_set, tc.batch_size)?;
                let record = EvalRecord {
                    iter,
                    report: aggregate(&reports),
                };
                progress(Progress::Eval(&record));
                if best.as_ref().is_none_or(|b| record.report.dice > b.report.dice) {
                    if let Some(dir) = out_dir {
                        Checkpoint::new(cfg.clone(), iter as u64, params.clone(), Some(velocity.clone()))
                            .save(&dir.join("best.ckpt"))?;
                    }
                    best = Some(record.clone());
                    best_params = Some(params.clone());
                }
                evals.push(record);
            }
        }
    }
    if let Some(dir) = out_dir {
        Checkpoint::new(cfg.clone(), iter as u64, params.clone(), Some(velocity.clone()))
            .save(&dir.join("last.ckpt"))?;
        write_history(&dir.join("history.csv"), &history)?;
    }
    Ok(TrainReport {
        history,
        evals,
        best,
        best_params,
        params,
        velocity,
        iterations: iter,
    })
}
