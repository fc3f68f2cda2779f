//! Splitting, optimization, metrics and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ModalSample;
use crate::error::{Error, Result};
use crate::fusion::{self, Evidence, LearnedFusionWeights};
use crate::model::{cross_entropy, Model};
use crate::params::{Bound, GradStore, ParamStore};
use crate::preprocess::NUM_CLASSES;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    /// Hash of the run configuration, copied into checkpoint metadata.
    #[serde(default)]
    pub config_hash: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            lr: 1e-3,
            plateau_patience: 5,
            plateau_factor: 0.5,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            config_hash: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch_size, epochs and plateau_patience must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr {} must be positive and plateau_factor {} inside (0, 1)",
                self.lr, self.plateau_factor
            )));
        }
        check_ratios(&self.split)
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Index sets of a dataset split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class `(train, val, test)` sizes: validation and test take
/// `⌈ratio·n⌉` each, training keeps the rest.
pub fn split_counts(n: usize, ratios: &[f64; 3]) -> (usize, usize, usize) {
    let take = |r: f64| ((r * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let (v, t) = (take(ratios[1]), take(ratios[2]));
    (n - v - t, v, t)
}

/// Stratified split, shuffled per class by `seed`. Each index list is
/// returned sorted.
pub fn split_dataset(labels: &[usize], ratios: &[f64; 3], seed: u64) -> Result<Split> {
    check_ratios(ratios)?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::Config(format!("class {c} has {} samples, at least 3 are needed", idx.len())));
        }
        Rng::derived(seed, 0x5911 + c as u64).shuffle(&mut idx);
        let (_, nv, nt) = split_counts(idx.len(), ratios);
        split.val.extend_from_slice(&idx[..nv]);
        split.test.extend_from_slice(&idx[nv..nv + nt]);
        split.train.extend_from_slice(&idx[nv + nt..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match the parameter store".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let Some(g) = grads.get(i) else { continue };
            let p = store.by_index_mut(i);
            if g.shape() != p.shape() {
                return Err(crate::error::dim_err("adam", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, name) in params.names().enumerate() {
            s.insert(format!("m.{name}"), self.m[i].clone());
            s.insert(format!("v.{name}"), self.v[i].clone());
        }
        s
    }

    fn from_store(state: &ParamStore, params: &ParamStore, t: u64) -> Result<Self> {
        let mut adam = Adam::new(params);
        for (i, name) in params.names().enumerate() {
            let get = |k: String| {
                state
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Malformed(format!("optimizer state lacks `{k}`")))
            };
            adam.m[i] = get(format!("m.{name}"))?;
            adam.v[i] = get(format!("v.{name}"))?;
        }
        adam.t = t;
        Ok(adam)
    }
}

/// Halves (by `factor`) the learning rate once validation accuracy has not
/// improved on its best for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub wait: usize,
    pub patience: usize,
    pub factor: f64,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            best: None,
            wait: 0,
            patience,
            factor,
        }
    }

    pub fn step(&mut self, val_acc: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| val_acc > b) {
            self.best = Some(val_acc);
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Learning rate after replaying a validation-accuracy history.
pub fn lr_schedule(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut p = Plateau::new(patience, factor);
    history.iter().fold(lr, |lr, &a| p.step(a, lr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion matrix (rows actual, columns predicted) and percentages.
/// Precision and recall are macro averages; F1 is their harmonic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let n = confusion.len();
    if n == 0 || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("confusion matrix must be square and non-empty, got {n} rows")));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    let mut per_class = Vec::with_capacity(n);
    for k in 0..n {
        let tp = confusion[k][k];
        let fn_ = confusion[k].iter().sum::<u64>() - tp;
        let fp = (0..n).map(|r| confusion[r][k]).sum::<u64>() - tp;
        per_class.push(ClassMetrics {
            tp,
            fp,
            fn_,
            tn: total - tp - fp - fn_,
            precision: 100.0 * ratio(tp, tp + fp),
            recall: 100.0 * ratio(tp, tp + fn_),
        });
    }
    let precision = per_class.iter().map(|c| c.precision).sum::<f64>() / n as f64;
    let recall = per_class.iter().map(|c| c.recall).sum::<f64>() / n as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let trace: u64 = (0..n).map(|k| confusion[k][k]).sum();
    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        accuracy: 100.0 * ratio(trace, total),
        precision,
        recall,
        f1,
        per_class,
    })
}

pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0; classes]; classes];
    for (&a, &p) in labels.iter().zip(predicted) {
        c[a][p] += 1;
    }
    c
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "accuracy {:6.2}%  precision {:6.2}%  recall {:6.2}%  f1 {:6.2}%",
            self.accuracy, self.precision, self.recall, self.f1
        );
        let _ = writeln!(s, "confusion (rows actual, cols predicted):");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:6}")).collect();
            let _ = writeln!(s, "  {}", cells.join(" "));
        }
        s
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.4},{:.9},{:.4}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

/// Predictions and loss over a subset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<crate::model::Prediction>,
    pub labels: Vec<usize>,
    pub loss: f64,
    pub metrics: MetricsReport,
}

pub fn evaluate(model: &Model, data: &[ModalSample], idx: &[usize]) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::Empty("evaluation subset is empty".into()));
    }
    let mut predictions = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    let mut loss = 0.0;
    for &i in idx {
        let s = &data[i];
        let p = model.predict(s)?;
        loss += cross_entropy(&p.joint, s.label);
        if p.evidences.len() > 1 {
            loss += p.evidences.iter().map(|e| cross_entropy(&e.p, s.label)).sum::<f64>();
        }
        labels.push(s.label);
        predictions.push(p);
    }
    let decided: Vec<usize> = predictions.iter().map(|p| p.decision()).collect();
    let metrics = compute_metrics(&confusion_matrix(&labels, &decided, NUM_CLASSES))?;
    Ok(Evaluation {
        predictions,
        labels,
        loss: loss / idx.len() as f64,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Block name of a parameter: everything before its last segment.
fn block_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(b, _)| b)
}

fn meta_f64(meta: &serde_json::Value, key: &str) -> Result<f64> {
    meta[key]
        .as_u64()
        .map(f64::from_bits)
        .ok_or_else(|| Error::Malformed(format!("checkpoint metadata lacks `{key}`")))
}

/// Trains `model` in place. With an output directory, writes `epochs.csv`
/// and the `best` and `last` checkpoints after every epoch; `resume`
/// continues from `last`. The best-validation parameters are loaded back
/// into `model` at the end.
pub fn train(
    model: &mut Model,
    data: &[ModalSample],
    split: &Split,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Empty("training and validation subsets must be non-empty".into()));
    }
    let mut adam = Adam::new(&model.params);
    let mut lr = cfg.lr;
    let mut plateau = Plateau::new(cfg.plateau_patience, cfg.plateau_factor);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut best_params = model.params.clone();
    let mut start = 1;

    if resume {
        let dir = out.ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        let (params, meta) = ParamStore::load(dir, "last")?;
        let (state, _) = ParamStore::load(dir, "last.adam")?;
        let t = meta["adam_t"].as_u64().ok_or_else(|| Error::Malformed("checkpoint lacks `adam_t`".into()))?;
        adam = Adam::from_store(&state, &params, t)?;
        model.params = params;
        lr = meta_f64(&meta, "lr_bits")?;
        plateau = serde_json::from_value(meta["plateau"].clone())?;
        best = (
            meta["best_epoch"].as_u64().unwrap_or(0) as usize,
            meta_f64(&meta, "best_val_acc_bits")?,
        );
        best_params = ParamStore::load(dir, "best")?.0;
        let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        for row in meta["log"].as_array().into_iter().flatten() {
            let v: Vec<f64> = row
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|x| x.as_u64().map(f64::from_bits))
                .collect();
            if v.len() != 6 {
                return Err(Error::Malformed("checkpoint log row must have 6 values".into()));
            }
            log.push(EpochLog {
                epoch: v[0] as usize,
                lr: v[1],
                train_loss: v[2],
                train_acc: v[3],
                val_loss: v[4],
                val_acc: v[5],
            });
        }
        start = epoch + 1;
    }

    for epoch in start..=cfg.epochs {
        let mut order = split.train.clone();
        Rng::derived(cfg.seed, 0xe90c_0000 + epoch as u64).shuffle(&mut order);
        let epoch_lr = lr;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = GradStore::new(&model.params);
            for &i in batch {
                let s = &data[i];
                let mut tape = Tape::new();
                let mut bound = Bound::new(&model.params);
                let out = model.forward(&mut tape, &mut bound, s)?;
                let loss = model.loss(&mut tape, &out, s.label)?;
                let lv = tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                if !lv.is_finite() {
                    let mut worst = ("", f64::NEG_INFINITY);
                    for (name, _) in model.params.iter() {
                        if let Some(g) = bound.var(name).and_then(|v| grads.get(v)) {
                            let m = g.data().iter().fold(0.0f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
                            if m > worst.1 {
                                worst = (name, m);
                            }
                        }
                    }
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        block: block_of(worst.0).to_string(),
                    });
                }
                loss_sum += lv;
                if fusion::decide(tape.value(out.joint).data()) == s.label {
                    correct += 1;
                }
                bound.accumulate(&grads, &mut acc);
            }
            acc.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &acc, lr)?;
        }
        let val = evaluate(model, data, &split.val)?;
        let row = EpochLog {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / order.len() as f64,
            train_acc: 100.0 * correct as f64 / order.len() as f64,
            val_loss: val.loss,
            val_acc: val.metrics.accuracy,
        };
        if row.val_acc > best.1 {
            best = (epoch, row.val_acc);
            best_params = model.params.clone();
        }
        lr = plateau.step(row.val_acc, lr);
        on_epoch(&row);
        log.push(row);

        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            let mut csv = String::from(LOG_HEADER);
            csv.push('\n');
            for r in &log {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            fs::write(dir.join("epochs.csv"), csv)?;
            let rows: Vec<serde_json::Value> = log
                .iter()
                .map(|r| {
                    serde_json::json!([
                        (r.epoch as f64).to_bits(),
                        r.lr.to_bits(),
                        r.train_loss.to_bits(),
                        r.train_acc.to_bits(),
                        r.val_loss.to_bits(),
                        r.val_acc.to_bits()
                    ])
                })
                .collect();
            let meta = serde_json::json!({
                "epoch": epoch,
                "lr_bits": lr.to_bits(),
                "plateau": plateau,
                "best_epoch": best.0,
                "best_val_acc_bits": best.1.to_bits(),
                "adam_t": adam.t,
                "model": model.cfg,
                "train": cfg,
                "log": rows,
            });
            model.params.save(dir, "last", meta)?;
            adam.to_store(&model.params).save(dir, "last.adam", serde_json::json!({}))?;
            if best.0 == epoch {
                best_params.save(
                    dir,
                    "best",
                    serde_json::json!({ "epoch": epoch, "model": model.cfg, "train": cfg }),
                )?;
            }
        }
    }
    model.params = best_params;
    Ok(TrainSummary {
        log,
        best_epoch: best.0,
        best_val_acc: best.1,
    })
}

/// Fits the learned-fusion layer on frozen evidences by full-batch Adam.
pub fn fit_learned_fusion(
    evidences: &[Vec<Evidence>],
    labels: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<LearnedFusionWeights> {
    let m = evidences.first().map_or(0, Vec::len);
    if m == 0 || evidences.len() != labels.len() {
        return Err(Error::Empty("learned fusion needs evidences for every label".into()));
    }
    let n = NUM_CLASSES;
    let mut store = ParamStore::new();
    store.init_linear(&mut Rng::derived(seed, 0x1f), "lf", m * n, n);
    let mut adam = Adam::new(&store);
    let inputs: Vec<Tensor> = evidences
        .iter()
        .map(|evs| Tensor::vector(evs.iter().flat_map(|e| e.p.iter().copied()).collect()))
        .collect();
    for _ in 0..steps {
        let mut acc = GradStore::new(&store);
        for (x, &y) in inputs.iter().zip(labels) {
            let mut t = Tape::new();
            let mut b = Bound::new(&store);
            let xv = t.constant(x.clone());
            let (w, bias) = (b.get(&mut t, "lf.w")?, b.get(&mut t, "lf.b")?);
            let logits = t.linear(xv, w, bias)?;
            let p = t.softmax(logits, 0)?;
            let loss = crate::model::cross_entropy_tape(&mut t, p, y)?;
            let g = t.backward(loss)?;
            b.accumulate(&g, &mut acc);
        }
        acc.scale(1.0 / inputs.len() as f64);
        adam.step(&mut store, &acc, lr)?;
    }
    Ok(LearnedFusionWeights {
        w: store.get("lf.w").expect("lf.w").clone(),
        b: store.get("lf.b").expect("lf.b").clone(),
    })
}
