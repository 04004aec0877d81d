//! Loss assembly, task balancing, the optimizer loop, and evaluation.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thermo_core::datastore::FieldStat;
use thermo_core::residual::PhysicsResidual;
use thermo_core::solver::{FieldSample, Problem, FIELD_NAMES};
use thermo_core::{NodeClassField, ResidualScales, ScalarField};

use crate::model::{Mode, ModelConfig, UNet, OUTPUT_FIELDS};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{BatchStats, ParamGrads, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-field z-score statistics in the order `T ux uy sxx syy sxy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl NormStats {
    /// Fits means and standard deviations over every non-hole pixel of the
    /// training set.
    pub fn fit(samples: &[FieldSample], classes: &NodeClassField) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Degenerate("empty training set".into()));
        }
        let solid = classes.solid_mask();
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for f in 0..6 {
            let values = || {
                samples.iter().flat_map(|s| {
                    s.fields()[f]
                        .values()
                        .iter()
                        .zip(&solid)
                        .filter(|(_, &m)| m)
                        .map(|(v, _)| *v)
                })
            };
            let (sum, count, peak) = values().fold((0.0, 0usize, 0.0f64), |(s, c, p), v| (s + v, c + 1, p.max(v.abs())));
            let m = sum / count as f64;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
            let sd = var.sqrt();
            if !(sd > 1e-12 * peak) {
                return Err(Error::Degenerate(format!("field {} has zero variance", FIELD_NAMES[f])));
            }
            mean[f] = m;
            std[f] = sd;
        }
        Ok(Self { mean, std })
    }

    pub fn normalize_value(&self, field: usize, v: f64) -> f64 {
        (v - self.mean[field]) / self.std[field]
    }

    pub fn denormalize_value(&self, field: usize, v: f64) -> f64 {
        v * self.std[field] + self.mean[field]
    }

    pub fn normalize(&self, s: &FieldSample) -> FieldSample {
        self.map(s, Self::normalize_value)
    }

    pub fn denormalize(&self, s: &FieldSample) -> FieldSample {
        self.map(s, Self::denormalize_value)
    }

    fn map(&self, s: &FieldSample, f: fn(&Self, usize, f64) -> f64) -> FieldSample {
        let mut out = s.clone();
        for (k, field) in out.fields_mut().into_iter().enumerate() {
            field.values_mut().iter_mut().for_each(|v| *v = f(self, k, *v));
        }
        out
    }

    pub fn to_field_stats(&self) -> Vec<FieldStat> {
        (0..6)
            .map(|k| FieldStat {
                name: FIELD_NAMES[k].to_string(),
                mean: self.mean[k],
                std: self.std[k],
            })
            .collect()
    }

    pub fn from_field_stats(stats: &[FieldStat]) -> Result<Self> {
        if stats.len() != 6 || stats.iter().zip(FIELD_NAMES).any(|(s, n)| s.name != n) {
            return Err(Error::Config("normalization statistics must list T ux uy sxx syy sxy".into()));
        }
        Ok(Self {
            mean: std::array::from_fn(|k| stats[k].mean),
            std: std::array::from_fn(|k| stats[k].std),
        })
    }
}

pub fn fit_norm_stats(train: &[FieldSample], classes: &NodeClassField) -> Result<NormStats> {
    NormStats::fit(train, classes)
}

/// Mean squared error over every element, or over the pixels where `mask`
/// is true (the mask covers one `H x W` plane and repeats over batch and
/// channels).
pub fn data_loss(pred: &Tensor, label: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    Ok(data_loss_grad(pred, label, mask)?.0)
}

/// Data loss and its gradient with respect to `pred`.
pub fn data_loss_grad(pred: &Tensor, label: &Tensor, mask: Option<&[bool]>) -> Result<(f64, Tensor)> {
    if pred.shape() != label.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), label.shape())));
    }
    let plane = match mask {
        Some(m) => {
            if pred.len() % m.len() != 0 {
                return Err(Error::Shape("mask does not tile the prediction".into()));
            }
            m.len()
        }
        None => pred.len().max(1),
    };
    let active = |i: usize| mask.is_none_or(|m| m[i % plane]);
    let count = (0..pred.len()).filter(|&i| active(i)).count().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if active(i) {
            let d = pred.data()[i] - label.data()[i];
            loss += d * d;
            grad.data_mut()[i] = 2.0 * d / count;
        }
    }
    Ok((loss / count, grad))
}

/// `sum_k w_k L_k + w_pde L_pde`; `weights` has one entry per task plus
/// the physics weight last.
pub fn total_loss_fixed(task_losses: &[f64], pde_loss: f64, weights: &[f64]) -> Result<f64> {
    if weights.len() != task_losses.len() + 1 {
        return Err(Error::Config(format!(
            "{} task losses need {} weights, got {}",
            task_losses.len(),
            task_losses.len() + 1,
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Config(format!("loss weights must be nonnegative, got {w}")));
    }
    let w_pde = weights[task_losses.len()];
    let pde = if w_pde == 0.0 { 0.0 } else { w_pde * pde_loss };
    Ok(task_losses.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() + pde)
}

/// `sum_k (exp(-s_k)/2 L_k + s_k)`, plus `exp(-s_pde)/2 L_pde + s_pde`
/// when a physics loss is given. `log_vars` holds one entry per task and
/// the physics entry last.
pub fn total_loss_uncertainty(task_losses: &[f64], pde_loss: Option<f64>, log_vars: &[f64]) -> f64 {
    uncertainty_terms(task_losses, pde_loss, log_vars).0
}

/// Uncertainty-weighted total with its partial derivatives with respect
/// to each loss and each log-variance.
pub fn uncertainty_terms(task_losses: &[f64], pde_loss: Option<f64>, log_vars: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let k = task_losses.len();
    assert!(log_vars.len() > k || (pde_loss.is_none() && log_vars.len() == k));
    let mut losses = task_losses.to_vec();
    let mut s: Vec<f64> = log_vars[..k].to_vec();
    if let Some(p) = pde_loss {
        losses.push(p);
        s.push(log_vars[k]);
    }
    let mut total = 0.0;
    let mut d_loss = Vec::with_capacity(losses.len());
    let mut d_s = Vec::with_capacity(losses.len());
    for (l, s) in losses.iter().zip(&s) {
        let w = (-s).exp() / 2.0;
        total += w * l + s;
        d_loss.push(w);
        d_s.push(1.0 - w * l);
    }
    (total, d_loss, d_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Balance {
    /// One weight per task and the physics weight last.
    Fixed { weights: Vec<f64> },
    /// Learnable log-variances, initialized to zero.
    Uncertainty,
}

impl Balance {
    /// Equal task weights `1/K` and physics weight 1.
    pub fn fixed_default(tasks: usize) -> Self {
        let mut weights = vec![1.0 / tasks as f64; tasks];
        weights.push(1.0);
        Self::Fixed { weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MtaUnet,
    StlUnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub physics: bool,
    /// `None` selects uncertainty balancing for the multi-task model.
    pub balance: Option<Balance>,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (0 disables validation).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            optimizer: OptimizerKind::default(),
            physics: true,
            balance: None,
            seed: 0,
            max_steps: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A labelled set sharing one board, grid, and material.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    pub problem: &'a Problem,
    pub samples: &'a [FieldSample],
}

impl<'a> Dataset<'a> {
    pub fn new(problem: &'a Problem, samples: &'a [FieldSample]) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.grid() != problem.grid()) {
            return Err(Error::Shape(format!(
                "sample grid {} x {} differs from problem grid",
                s.grid().nx,
                s.grid().ny
            )));
        }
        Ok(Self { problem, samples })
    }
}

/// Trained networks with the statistics needed to use them.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub kind: ModelKind,
    /// One multi-task network, or five single-field networks in output order.
    pub nets: Vec<UNet>,
    pub stats: NormStats,
    /// Largest |T| over the training set; sets the physics residual scales.
    pub t_char: f64,
}

impl Surrogate {
    /// Freshly initialized networks (what `train` starts from).
    pub fn init(kind: ModelKind, cfg: ModelConfig, stats: NormStats, t_char: f64) -> Result<Self> {
        let nets = match kind {
            ModelKind::MtaUnet => vec![UNet::mta(cfg)?],
            ModelKind::StlUnet => (0..OUTPUT_FIELDS.len())
                .map(|f| {
                    UNet::single(
                        ModelConfig {
                            seed: cfg.seed.wrapping_add(f as u64),
                            ..cfg
                        },
                        f,
                    )
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            kind,
            nets,
            stats,
            t_char,
        })
    }

    /// Physical-scale predictions in eval mode; hole-interior outputs are
    /// zeroed and `T` is copied from the input.
    pub fn predict(&self, problem: &Problem, inputs: &[FieldSample]) -> Result<Vec<FieldSample>> {
        let (preds, covered) = predict_with(&self.nets.iter().collect::<Vec<_>>(), &self.stats, problem, inputs)?;
        if let Some(f) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!("no network predicts {}", OUTPUT_FIELDS[f])));
        }
        Ok(preds)
    }
}

/// Predictions of `nets` combined; fields no network covers stay zero and
/// are flagged `false` in the returned coverage.
fn predict_with(
    nets: &[&UNet],
    stats: &NormStats,
    problem: &Problem,
    inputs: &[FieldSample],
) -> Result<(Vec<FieldSample>, [bool; 5])> {
    let grid = *problem.grid();
    let hw = grid.len();
    let mut covered = [false; 5];
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(16) {
        let x = input_tensor(chunk.iter(), stats, grid.ny, grid.nx);
        let mut fields: [Option<Tensor>; 5] = Default::default();
        for net in nets {
            for (f, t) in net.predict_fields(&x, Mode::Eval)?.into_iter().enumerate() {
                if t.is_some() {
                    fields[f] = t;
                    covered[f] = true;
                }
            }
        }
        for (b, s) in chunk.iter().enumerate() {
            let mut pred = FieldSample::zeros(grid);
            pred.t = s.t.clone();
            for (f, dst) in pred.fields_mut().into_iter().skip(1).enumerate() {
                let Some(t) = fields[f].as_ref() else { continue };
                for (k, v) in dst.values_mut().iter_mut().enumerate() {
                    *v = stats.denormalize_value(f + 1, t.data()[b * hw + k]);
                }
            }
            pred.zero_hole_interior(problem.classes());
            out.push(pred);
        }
    }
    Ok((out, covered))
}

fn input_tensor<'s>(samples: impl Iterator<Item = &'s FieldSample>, stats: &NormStats, h: usize, w: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        data.extend(s.t.values().iter().map(|&v| stats.normalize_value(0, v)));
        n += 1;
    }
    Tensor::new(&[n, 1, h, w], data).unwrap()
}

/// Physics loss of a batch of normalized predictions, averaged over the
/// batch, and its gradient with respect to each normalized field
/// (`b x 1 x H x W` per output field).
pub fn physics_loss_normalized(
    problem: &Problem,
    stats: &NormStats,
    scales: &ResidualScales,
    inputs: &[&FieldSample],
    fields: &[Tensor; 5],
) -> Result<(f64, [Tensor; 5])> {
    let grid = *problem.grid();
    let hw = grid.len();
    let b = inputs.len();
    let residual = PhysicsResidual::new(problem);
    let mut grads: [Tensor; 5] = std::array::from_fn(|_| Tensor::zeros(&[b, 1, grid.ny, grid.nx]));
    let mut total = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut pred = FieldSample::zeros(grid);
        pred.t = input.t.clone();
        for (f, dst) in pred.fields_mut().into_iter().skip(1).enumerate() {
            let src = &fields[f].data()[i * hw..(i + 1) * hw];
            dst.values_mut()
                .iter_mut()
                .zip(src)
                .for_each(|(d, &v)| *d = stats.denormalize_value(f + 1, v));
        }
        let (loss, g) = residual.loss_and_grad(&pred, scales);
        total += loss / b as f64;
        for (f, gf) in g.as_array().into_iter().enumerate() {
            let scale = stats.std[f + 1] / b as f64;
            let dst = &mut grads[f].data_mut()[i * hw..(i + 1) * hw];
            dst.iter_mut().zip(gf).for_each(|(d, &v)| *d = v * scale);
        }
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    pub field: String,
    pub mae: f64,
    pub mae_std: f64,
    /// Safeguarded mean relative error, percent.
    pub mre: f64,
    pub mre_std: f64,
    /// Unsafeguarded form dividing by |prediction|; `None` when some
    /// prediction is exactly zero.
    pub mre_raw: Option<f64>,
    pub mre_raw_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub fields: Vec<FieldMetrics>,
}

impl Metrics {
    pub fn field(&self, name: &str) -> Option<&FieldMetrics> {
        self.fields.iter().find(|f| f.field == name)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-field MAE and MRE of `preds` against `labels` over non-hole pixels.
/// Relative errors divide by `max(|prediction|, 1e-3 * max |label|)`.
pub fn metrics_from_predictions(
    classes: &NodeClassField,
    labels: &[FieldSample],
    preds: &[FieldSample],
) -> Result<Metrics> {
    if labels.is_empty() || labels.len() != preds.len() {
        return Err(Error::Config("evaluation needs matching nonempty label and prediction sets".into()));
    }
    let solid = classes.solid_mask();
    let mut fields = Vec::new();
    for f in 0..5 {
        let pick = |s: &FieldSample| -> ScalarField { s.outputs()[f].clone() };
        let peak = labels
            .iter()
            .map(|s| pick(s).masked(&solid).max_abs())
            .fold(0.0, f64::max);
        let delta = 1e-3 * peak;
        let (mut maes, mut mres, mut raws) = (Vec::new(), Vec::new(), Vec::new());
        let mut raw_ok = true;
        for (y, yh) in labels.iter().zip(preds) {
            let (y, yh) = (pick(y), pick(yh));
            let (mut ae, mut re, mut raw, mut n) = (0.0, 0.0, 0.0, 0usize);
            for ((a, b), &m) in y.values().iter().zip(yh.values()).zip(&solid) {
                if !m {
                    continue;
                }
                let e = (a - b).abs();
                ae += e;
                re += e / b.abs().max(delta);
                if b.abs() > 0.0 {
                    raw += e / b.abs();
                } else {
                    raw_ok = false;
                }
                n += 1;
            }
            let n = n.max(1) as f64;
            maes.push(ae / n);
            mres.push(100.0 * re / n);
            raws.push(100.0 * raw / n);
        }
        let (mae, mae_std) = mean_std(&maes);
        let (mre, mre_std) = mean_std(&mres);
        let (raw_m, raw_s) = mean_std(&raws);
        let finite = raw_ok && raw_m.is_finite();
        fields.push(FieldMetrics {
            field: OUTPUT_FIELDS[f].to_string(),
            mae,
            mae_std,
            mre,
            mre_std,
            mre_raw: finite.then_some(raw_m),
            mre_raw_std: finite.then_some(raw_s),
        });
    }
    Ok(Metrics {
        samples: labels.len(),
        fields,
    })
}

/// Test-set metrics of a trained surrogate on physical scale.
pub fn evaluate(model: &Surrogate, test: &Dataset) -> Result<Metrics> {
    let preds = model.predict(test.problem, test.samples)?;
    metrics_from_predictions(test.problem.classes(), test.samples, &preds)
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Index of the network being trained (single-task runs train five).
    pub net: usize,
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-task data loss over the epoch's batches.
    pub data: Vec<f64>,
    pub pde: Option<f64>,
    pub total: f64,
    pub log_vars: Option<Vec<f64>>,
    pub val_data: Option<Vec<f64>>,
    /// Validation MAE and safeguarded MRE (percent) per predicted field.
    pub val_mae: Option<BTreeMap<String, f64>>,
    pub val_mre: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Data losses of the very first optimizer step, per network.
    pub first_step_data: Vec<Vec<f64>>,
}

impl History {
    /// One JSON object per epoch, newline separated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

struct Prepared {
    inputs: Vec<Vec<f64>>,
    labels: Vec<[Vec<f64>; 5]>,
    h: usize,
    w: usize,
}

fn prepare(samples: &[FieldSample], stats: &NormStats) -> Prepared {
    let norm = |f: usize, s: &ScalarField| -> Vec<f64> { s.values().iter().map(|&v| stats.normalize_value(f, v)).collect() };
    let (h, w) = samples.first().map_or((0, 0), |s| (s.grid().ny, s.grid().nx));
    Prepared {
        inputs: samples.iter().map(|s| norm(0, &s.t)).collect(),
        labels: samples
            .iter()
            .map(|s| std::array::from_fn(|f| norm(f + 1, s.outputs()[f])))
            .collect(),
        h,
        w,
    }
}

impl Prepared {
    fn batch_input(&self, idx: &[usize]) -> Tensor {
        let mut d = Vec::with_capacity(idx.len() * self.h * self.w);
        idx.iter().for_each(|&i| d.extend_from_slice(&self.inputs[i]));
        Tensor::new(&[idx.len(), 1, self.h, self.w], d).unwrap()
    }

    fn batch_labels(&self, idx: &[usize], group: &[usize]) -> Tensor {
        let mut d = Vec::new();
        for &i in idx {
            for &f in group {
                d.extend_from_slice(&self.labels[i][f]);
            }
        }
        Tensor::new(&[idx.len(), group.len(), self.h, self.w], d).unwrap()
    }

    fn batch<'s>(&self, idx: &[usize], samples: &'s [FieldSample]) -> Batch<'s> {
        Batch {
            input: self.batch_input(idx),
            labels: std::array::from_fn(|f| self.batch_labels(idx, &[f])),
            samples: idx.iter().map(|&i| &samples[i]).collect(),
        }
    }
}

/// Normalized input and labels of one batch, with the physical samples
/// they came from.
pub struct Batch<'s> {
    pub input: Tensor,
    /// One `b x 1 x H x W` tensor per output field.
    pub labels: [Tensor; 5],
    pub samples: Vec<&'s FieldSample>,
}

impl<'s> Batch<'s> {
    pub fn new(samples: &'s [FieldSample], stats: &NormStats) -> Self {
        let idx: Vec<usize> = (0..samples.len()).collect();
        prepare(samples, stats).batch(&idx, samples)
    }

    fn group_labels(&self, group: &[usize]) -> Tensor {
        let (b, _, h, w) = self.labels[0].d4();
        let hw = h * w;
        let mut d = Vec::with_capacity(b * group.len() * hw);
        for s in 0..b {
            for &f in group {
                d.extend_from_slice(&self.labels[f].data()[s * hw..(s + 1) * hw]);
            }
        }
        Tensor::new(&[b, group.len(), h, w], d).unwrap()
    }
}

/// Loss components of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub data: Vec<f64>,
    pub pde: Option<f64>,
    pub total: f64,
}

/// Gradients of the total loss.
pub struct Gradients {
    pub params: ParamGrads,
    /// With respect to each decoder output.
    pub outputs: Vec<Tensor>,
    /// With respect to the log-variances under uncertainty balancing.
    pub log_vars: Option<Vec<f64>>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Data plus optional physics loss, combined by a balancing mode.
pub struct Objective<'a> {
    pub problem: &'a Problem,
    pub stats: NormStats,
    pub scales: ResidualScales,
    pub physics: bool,
    pub balance: Balance,
    mask: Vec<bool>,
}

impl<'a> Objective<'a> {
    pub fn new(problem: &'a Problem, stats: NormStats, t_char: f64, physics: bool, balance: Balance) -> Self {
        Self {
            problem,
            stats,
            scales: ResidualScales::from_temperature(problem.material(), t_char.max(f64::MIN_POSITIVE), problem.grid().h),
            physics,
            balance,
            mask: problem.classes().solid_mask(),
        }
    }

    /// Loss of given decoder outputs and its gradient with respect to them.
    pub fn loss_of_outputs(
        &self,
        groups: &[Vec<usize>],
        outputs: &[Tensor],
        batch: &Batch,
        log_vars: &[f64],
    ) -> Result<(LossBreakdown, Vec<Tensor>, Option<Vec<f64>>)> {
        let mut data = Vec::new();
        let mut grads = Vec::new();
        for (k, group) in groups.iter().enumerate() {
            let (l, g) = data_loss_grad(&outputs[k], &batch.group_labels(group), Some(&self.mask))?;
            data.push(l);
            grads.push(g);
        }
        let pde = if self.physics {
            let mut fields: Vec<Tensor> = Vec::with_capacity(5);
            for f in 0..5 {
                let (k, ch) = locate(groups, f)
                    .ok_or_else(|| Error::Config("the physics loss needs all five output fields".into()))?;
                fields.push(outputs[k].channels(ch, ch + 1));
            }
            let fields: [Tensor; 5] = fields.try_into().unwrap();
            Some(physics_loss_normalized(self.problem, &self.stats, &self.scales, &batch.samples, &fields)?)
        } else {
            None
        };
        let pde_loss = pde.as_ref().map(|p| p.0);
        let (total, coef, coef_pde, d_s) = match &self.balance {
            Balance::Fixed { weights } => {
                let total = total_loss_fixed(&data, pde_loss.unwrap_or(0.0), weights)?;
                (total, weights[..data.len()].to_vec(), weights[data.len()], None)
            }
            Balance::Uncertainty => {
                let (total, d_l, d_s) = uncertainty_terms(&data, pde_loss, log_vars);
                let c_pde = d_l.get(data.len()).copied().unwrap_or(0.0);
                let mut ds = vec![0.0; log_vars.len()];
                ds[..d_s.len()].copy_from_slice(&d_s);
                (total, d_l[..data.len()].to_vec(), c_pde, Some(ds))
            }
        };
        for (k, g) in grads.iter_mut().enumerate() {
            g.data_mut().iter_mut().for_each(|v| *v *= coef[k]);
            if let Some((_, pg)) = &pde {
                let (b, c, h, w) = g.d4();
                let hw = h * w;
                for (ch, &f) in groups[k].iter().enumerate() {
                    for s in 0..b {
                        let dst = &mut g.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        let src = &pg[f].data()[s * hw..(s + 1) * hw];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += coef_pde * v);
                    }
                }
            }
        }
        Ok((LossBreakdown { data, pde: pde_loss, total }, grads, d_s))
    }

    /// Forward, loss, and backward through `net`.
    pub fn loss_and_grad(&self, net: &UNet, batch: &Batch, log_vars: &[f64], mode: Mode) -> Result<(LossBreakdown, Gradients)> {
        let mut tape = Tape::new();
        let fwd = net.forward_tape(&mut tape, &batch.input, mode)?;
        let outputs: Vec<Tensor> = fwd.tasks.iter().map(|&v| tape.value(v).clone()).collect();
        let (loss, out_grads, d_s) = self.loss_of_outputs(net.groups(), &outputs, batch, log_vars)?;
        let seeds: Vec<_> = fwd.tasks.iter().copied().zip(out_grads.iter().cloned()).collect();
        let params = tape.backward(&seeds, net.params().len());
        Ok((
            loss,
            Gradients {
                params,
                outputs: out_grads,
                log_vars: d_s,
                batch_stats: fwd.batch_stats,
            },
        ))
    }

    /// Loss without gradients.
    pub fn loss(&self, net: &UNet, batch: &Batch, log_vars: &[f64], mode: Mode) -> Result<LossBreakdown> {
        let outputs = net.forward(&batch.input, mode)?;
        Ok(self.loss_of_outputs(net.groups(), &outputs, batch, log_vars)?.0)
    }
}

fn optimizer_step(net: &mut UNet, opt: &mut Optimizer, log_vars: &mut [f64], grads: &Gradients) {
    let mut slots: Vec<&mut [f64]> = net.params_mut().tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    let mut g: Vec<Option<&[f64]>> = grads.params.iter().map(|g| g.as_ref().map(|t| t.data())).collect();
    slots.push(log_vars);
    g.push(grads.log_vars.as_deref());
    opt.step(&mut slots, &g);
}

fn locate(groups: &[Vec<usize>], field: usize) -> Option<(usize, usize)> {
    groups
        .iter()
        .enumerate()
        .find_map(|(k, g)| g.iter().position(|&f| f == field).map(|ch| (k, ch)))
}

/// Trains a surrogate. Normalization statistics and the physics scale come
/// from `train_set` only.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    kind: ModelKind,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Surrogate, History)> {
    cfg.validate()?;
    let problem = train_set.problem;
    let samples = train_set.samples;
    let stats = NormStats::fit(samples, problem.classes())?;
    let t_char = samples.iter().map(|s| s.t.max_abs()).fold(0.0, f64::max);
    if cfg.physics && kind == ModelKind::StlUnet {
        return Err(Error::Config(
            "the physics loss couples all five fields; single-task networks train on data only".into(),
        ));
    }
    if cfg.physics && !(t_char > 0.0) {
        return Err(Error::Degenerate("physics scaling needs a nonzero temperature".into()));
    }
    let mut model = Surrogate::init(kind, model_cfg, stats, t_char)?;
    let mask = problem.classes().solid_mask();
    let prep = prepare(samples, &stats);
    let mut history = History::default();
    for net_index in 0..model.nets.len() {
        let net = &mut model.nets[net_index];
        let tasks = net.groups().len();
        let balance = cfg.balance.clone().unwrap_or(if tasks > 1 {
            Balance::Uncertainty
        } else {
            Balance::fixed_default(tasks)
        });
        if let Balance::Fixed { weights } = &balance {
            total_loss_fixed(&vec![0.0; tasks], 0.0, weights)?;
        }
        let objective = Objective::new(problem, stats, t_char, cfg.physics, balance.clone());
        let mut log_vars = vec![0.0; tasks + 1];
        let mut sizes: Vec<usize> = net.params().tensors().iter().map(Tensor::len).collect();
        sizes.push(log_vars.len());
        let mut opt = Optimizer::new(cfg.optimizer, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut steps = 0usize;
        'epochs: for epoch in 0..cfg.epochs {
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut sums = vec![0.0; tasks];
            let (mut pde_sum, mut total_sum, mut batches) = (0.0, 0.0, 0usize);
            for idx in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| steps >= m) {
                    break;
                }
                let batch = prep.batch(idx, samples);
                let (out, grads) = objective.loss_and_grad(net, &batch, &log_vars, Mode::Train)?;
                if !out.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: steps,
                        loss: out.total,
                    });
                }
                optimizer_step(net, &mut opt, &mut log_vars, &grads);
                net.update_running(&grads.batch_stats);
                if steps == 0 {
                    history.first_step_data.push(out.data.clone());
                }
                steps += 1;
                batches += 1;
                sums.iter_mut().zip(&out.data).for_each(|(s, d)| *s += d);
                pde_sum += out.pde.unwrap_or(0.0);
                total_sum += out.total;
            }
            if batches == 0 {
                break 'epochs;
            }
            let nb = batches as f64;
            let mut rec = EpochRecord {
                net: net_index,
                epoch,
                steps,
                data: sums.iter().map(|s| s / nb).collect(),
                pde: cfg.physics.then_some(pde_sum / nb),
                total: total_sum / nb,
                log_vars: matches!(balance, Balance::Uncertainty).then(|| log_vars.clone()),
                val_data: None,
                val_mae: None,
                val_mre: None,
            };
            if let Some(val) = val_set {
                if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 && !val.samples.is_empty() {
                    rec.val_data = Some(validation_losses(net, &stats, val, &mask)?);
                    let (preds, covered) = predict_with(&[&*net], &stats, val.problem, val.samples)?;
                    let m = metrics_from_predictions(val.problem.classes(), val.samples, &preds)?;
                    let pick = |get: fn(&FieldMetrics) -> f64| -> BTreeMap<String, f64> {
                        m.fields
                            .iter()
                            .zip(covered)
                            .filter(|(_, c)| *c)
                            .map(|(f, _)| (f.field.clone(), get(f)))
                            .collect()
                    };
                    rec.val_mae = Some(pick(|f| f.mae));
                    rec.val_mre = Some(pick(|f| f.mre));
                }
            }
            history.epochs.push(rec);
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
    }
    Ok((model, history))
}

/// Eval-mode data loss per decoder over a validation set.
fn validation_losses(net: &UNet, stats: &NormStats, val: &Dataset, mask: &[bool]) -> Result<Vec<f64>> {
    let prep = prepare(val.samples, stats);
    let mut sums = vec![0.0; net.groups().len()];
    let all: Vec<usize> = (0..val.samples.len()).collect();
    for idx in all.chunks(16) {
        let outs = net.forward(&prep.batch_input(idx), Mode::Eval)?;
        for (k, group) in net.groups().iter().enumerate() {
            let l = data_loss(&outs[k], &prep.batch_labels(idx, group), Some(mask))?;
            sums[k] += l * idx.len() as f64;
        }
    }
    Ok(sums.iter().map(|s| s / val.samples.len() as f64).collect())
}
