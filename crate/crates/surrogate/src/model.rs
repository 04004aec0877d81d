//! Multi-task attention U-Net and its single-task baseline.
//!
//! One encoder is shared by every decoder. Each decoder upsamples level by
//! level, gates the matching encoder skip with its own attention gate,
//! concatenates, and applies a double convolution; a 1x1 head maps the last
//! feature to the decoder's output channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{ConvGeom, Tensor};
use crate::{Error, Result};

/// Output fields predicted by the surrogates, in the order `ux uy sxx syy sxy`.
pub const OUTPUT_FIELDS: [&str; 5] = ["ux", "uy", "sxx", "syy", "sxy"];

/// Task grouping of the multi-task model, as indices into [`OUTPUT_FIELDS`]:
/// task 1 `(ux, sxx)`, task 2 `(uy, syy)`, task 3 `(sxy)`.
pub const TASK_GROUPS: [&[usize]; 3] = [&[0, 2], &[1, 3], &[4]];

pub const NORM_MOMENTUM: f64 = 0.1;

const CONV3: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 1,
    pad: 1,
};
const POINT: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 1,
    pad: 0,
};
const POINT_S2: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 2,
    pad: 0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 64,
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(levels: usize, base_channels: usize, seed: u64) -> Self {
        Self {
            levels,
            base_channels,
            in_channels: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.base_channels == 0 || self.in_channels != 1 {
            return Err(Error::Config(format!(
                "model needs at least 2 levels, nonzero width, one input channel; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Encoder widths per level: `base, 2 base, 4 base, ...`.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|m| self.base_channels << m).collect()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.levels - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h} x {w} is not divisible by 2^(D-1) = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |k| &mut self.tensors[k])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Running per-channel statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    w1: usize,
    n1: NormIdx,
    w2: usize,
    n2: NormIdx,
}

#[derive(Debug, Clone, Copy)]
struct GateIdx {
    wf: usize,
    wg: usize,
    bg: usize,
    wpsi: usize,
    bpsi: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up_w: usize,
    up_b: usize,
    gate: GateIdx,
    block: ConvBlock,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// Ordered from the deepest skip to the finest.
    levels: Vec<DecoderLevel>,
    head_w: usize,
    head_b: usize,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub pyramid: Vec<Var>,
    /// One `n x c_k x H x W` output per decoder.
    pub tasks: Vec<Var>,
    /// Attention maps per decoder, finest level last.
    pub gates: Vec<Vec<Var>>,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// A U-Net with a shared encoder and one decoder per output group.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: ModelConfig,
    groups: Vec<Vec<usize>>,
    params: ParamStore,
    running: Vec<RunningNorm>,
    encoder: Vec<ConvBlock>,
    decoders: Vec<Decoder>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: ParamStore,
    running: Vec<RunningNorm>,
}

impl Builder {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.params.push(name, Tensor::new(shape, data).unwrap())
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.params.push(name, Tensor::full(shape, v))
    }

    fn norm(&mut self, name: String, c: usize) -> NormIdx {
        let gamma = self.constant(format!("{name}.gamma"), &[c], 1.0);
        let beta = self.constant(format!("{name}.beta"), &[c], 0.0);
        self.running.push(RunningNorm {
            name,
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        NormIdx {
            gamma,
            beta,
            running: self.running.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> ConvBlock {
        let w1 = self.normal(format!("{name}.conv1.w"), &[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt());
        let n1 = self.norm(format!("{name}.norm1"), cout);
        let w2 = self.normal(format!("{name}.conv2.w"), &[cout, cout, 3, 3], (2.0 / (9 * cout) as f64).sqrt());
        let n2 = self.norm(format!("{name}.norm2"), cout);
        ConvBlock { w1, n1, w2, n2 }
    }
}

impl UNet {
    /// The multi-task model: three decoders with heads `(ux, sxx)`,
    /// `(uy, syy)`, `(sxy)`.
    pub fn mta(cfg: ModelConfig) -> Result<Self> {
        Self::with_groups(cfg, TASK_GROUPS.iter().map(|g| g.to_vec()).collect())
    }

    /// Single-task baseline predicting one output field.
    pub fn single(cfg: ModelConfig, field: usize) -> Result<Self> {
        if field >= OUTPUT_FIELDS.len() {
            return Err(Error::Config(format!("no output field {field}")));
        }
        Self::with_groups(cfg, vec![vec![field]])
    }

    /// Deterministic fan-in-scaled initialization; norm affine is the
    /// identity and gate biases are zero.
    pub fn with_groups(cfg: ModelConfig, groups: Vec<Vec<usize>>) -> Result<Self> {
        cfg.validate()?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("every decoder needs at least one output".into()));
        }
        let widths = cfg.widths();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            params: ParamStore::default(),
            running: Vec::new(),
        };
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for (m, &c) in widths.iter().enumerate() {
            encoder.push(b.block(&format!("enc{m}"), cin, c));
            cin = c;
        }
        let mut decoders = Vec::new();
        for (k, group) in groups.iter().enumerate() {
            let mut levels = Vec::new();
            for m in (0..cfg.levels - 1).rev() {
                let (c, cg) = (widths[m], widths[m + 1]);
                let name = format!("dec{k}.lvl{m}");
                let up_w = b.normal(format!("{name}.up.w"), &[cg, c, 2, 2], (1.0 / cg as f64).sqrt());
                let up_b = b.constant(format!("{name}.up.b"), &[c], 0.0);
                let f_int = (c / 2).max(1);
                let gate = GateIdx {
                    wf: b.normal(format!("{name}.gate.wf"), &[f_int, c, 1, 1], (1.0 / c as f64).sqrt()),
                    wg: b.normal(format!("{name}.gate.wg"), &[f_int, cg, 1, 1], (1.0 / cg as f64).sqrt()),
                    bg: b.constant(format!("{name}.gate.bg"), &[f_int], 0.0),
                    wpsi: b.normal(format!("{name}.gate.wpsi"), &[1, f_int, 1, 1], (1.0 / f_int as f64).sqrt()),
                    bpsi: b.constant(format!("{name}.gate.bpsi"), &[1], 0.0),
                };
                let block = b.block(&name, 2 * c, c);
                levels.push(DecoderLevel {
                    up_w,
                    up_b,
                    gate,
                    block,
                });
            }
            let head_w = b.normal(
                format!("dec{k}.head.w"),
                &[group.len(), widths[0], 1, 1],
                (1.0 / widths[0] as f64).sqrt(),
            );
            let head_b = b.constant(format!("dec{k}.head.b"), &[group.len()], 0.0);
            decoders.push(Decoder { levels, head_w, head_b });
        }
        Ok(Self {
            cfg,
            groups,
            params: b.params,
            running: b.running,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running(&self) -> &[RunningNorm] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningNorm] {
        &mut self.running
    }

    /// Indices of the parameters owned by decoder `k` (its upsamplers,
    /// gates, convolutions, and head).
    pub fn decoder_param_names(&self, k: usize) -> Vec<&str> {
        let prefix = format!("dec{k}.");
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with(&prefix))
            .map(String::as_str)
            .collect()
    }

    pub fn encoder_param_names(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with("enc"))
            .map(String::as_str)
            .collect()
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - NORM_MOMENTUM) * r.mean[c] + NORM_MOMENTUM * s.mean[c];
                r.var[c] = (1.0 - NORM_MOMENTUM) * r.var[c] + NORM_MOMENTUM * s.var[c] * unbias;
            }
        }
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(k, t)| tape.param(k, t))
            .collect()
    }

    fn norm_relu(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        n: NormIdx,
        mode: Mode,
        stats: &mut [Option<BatchStats>],
    ) -> Result<Var> {
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((&self.running[n.running].mean[..], &self.running[n.running].var[..])),
        };
        let (y, s) = tape.norm(x, p[n.gamma], p[n.beta], running)?;
        stats[n.running] = s;
        Ok(tape.relu(y))
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        b: &ConvBlock,
        mode: Mode,
        stats: &mut [Option<BatchStats>],
    ) -> Result<Var> {
        let y = tape.conv(x, p[b.w1], None, CONV3)?;
        let y = self.norm_relu(tape, p, y, b.n1, mode, stats)?;
        let y = tape.conv(y, p[b.w2], None, CONV3)?;
        self.norm_relu(tape, p, y, b.n2, mode, stats)
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Forward> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} input channel(s), got {c}", self.cfg.in_channels)));
        }
        self.cfg.check_input(h, w)?;
        let p = self.leaves(tape);
        let mut stats: Vec<Option<BatchStats>> = vec![None; self.running.len()];
        let mut cur = tape.input(x.clone());
        let mut pyramid = Vec::new();
        for (m, block) in self.encoder.iter().enumerate() {
            if m > 0 {
                cur = tape.maxpool2(cur)?;
            }
            cur = self.block_forward(tape, &p, cur, block, mode, &mut stats)?;
            pyramid.push(cur);
        }
        let mut tasks = Vec::new();
        let mut gates = Vec::new();
        for dec in &self.decoders {
            let mut g = *pyramid.last().unwrap();
            let mut maps = Vec::new();
            for (lvl, m) in dec.levels.iter().zip((0..self.cfg.levels - 1).rev()) {
                let up = tape.conv_transpose2(g, p[lvl.up_w], p[lvl.up_b])?;
                let (gated, alpha) = gate_on_tape(tape, &p, pyramid[m], g, &lvl.gate)?;
                maps.push(alpha);
                let cat = tape.concat(gated, up)?;
                g = self.block_forward(tape, &p, cat, &lvl.block, mode, &mut stats)?;
            }
            tasks.push(tape.conv(g, p[dec.head_w], Some(p[dec.head_b]), POINT)?);
            gates.push(maps);
        }
        Ok(Forward {
            pyramid,
            tasks,
            gates,
            batch_stats: stats,
        })
    }

    /// Per-decoder outputs without recording gradients.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, x, mode)?;
        Ok(f.tasks.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Encoder pyramid `f^1 .. f^D`.
    pub fn encoder_forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, x, mode)?;
        Ok(f.pyramid.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Outputs rearranged into the five fields, each `n x 1 x H x W`.
    /// Fields not predicted by this network are `None`.
    pub fn predict_fields(&self, x: &Tensor, mode: Mode) -> Result<[Option<Tensor>; 5]> {
        let outs = self.forward(x, mode)?;
        let mut fields: [Option<Tensor>; 5] = Default::default();
        for (out, group) in outs.iter().zip(&self.groups) {
            for (ch, &f) in group.iter().enumerate() {
                fields[f] = Some(out.channels(ch, ch + 1));
            }
        }
        Ok(fields)
    }

    pub(crate) fn from_parts(
        cfg: ModelConfig,
        groups: Vec<Vec<usize>>,
        params: Vec<(String, Tensor)>,
        running: Vec<RunningNorm>,
    ) -> Result<Self> {
        let mut net = Self::with_groups(cfg, groups)?;
        if params.len() != net.params.len() || running.len() != net.running.len() {
            return Err(Error::Checkpoint("parameter list does not match the configuration".into()));
        }
        for (k, (name, t)) in params.into_iter().enumerate() {
            if name != net.params.names[k] || t.shape() != net.params.tensors[k].shape() {
                return Err(Error::Checkpoint(format!("unexpected parameter {name} {:?}", t.shape())));
            }
            net.params.tensors[k] = t;
        }
        for (dst, src) in net.running.iter_mut().zip(running) {
            if dst.name != src.name || dst.mean.len() != src.mean.len() || dst.var.len() != src.var.len() {
                return Err(Error::Checkpoint(format!("unexpected norm statistics {}", src.name)));
            }
            *dst = src;
        }
        Ok(net)
    }
}

/// Attention-gate parameters as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `[f_int, c_f, 1, 1]`, applied with stride 2.
    pub wf: Tensor,
    /// `[f_int, c_g, 1, 1]`.
    pub wg: Tensor,
    pub bg: Tensor,
    /// `[1, f_int, 1, 1]`.
    pub wpsi: Tensor,
    pub bpsi: Tensor,
}

impl GateParams {
    pub fn zeros(c_f: usize, c_g: usize, f_int: usize) -> Self {
        Self {
            wf: Tensor::zeros(&[f_int, c_f, 1, 1]),
            wg: Tensor::zeros(&[f_int, c_g, 1, 1]),
            bg: Tensor::zeros(&[f_int]),
            wpsi: Tensor::zeros(&[1, f_int, 1, 1]),
            bpsi: Tensor::zeros(&[1]),
        }
    }
}

fn gate_on_tape(tape: &mut Tape, p: &[Var], f: Var, g: Var, idx: &GateIdx) -> Result<(Var, Var)> {
    gate_vars(tape, f, g, [p[idx.wf], p[idx.wg], p[idx.bg], p[idx.wpsi], p[idx.bpsi]])
}

fn gate_vars(tape: &mut Tape, f: Var, g: Var, [wf, wg, bg, wpsi, bpsi]: [Var; 5]) -> Result<(Var, Var)> {
    let (_, _, hf, wf_) = tape.value(f).dims4()?;
    let (_, _, hg, wg_) = tape.value(g).dims4()?;
    if (hf, wf_) != (2 * hg, 2 * wg_) {
        return Err(Error::Shape(format!(
            "skip feature {hf} x {wf_} must be twice the gating feature {hg} x {wg_}"
        )));
    }
    let theta = tape.conv(f, wf, None, POINT_S2)?;
    let phi = tape.conv(g, wg, Some(bg), POINT)?;
    let sum = tape.add(theta, phi)?;
    let q = tape.relu(sum);
    let psi = tape.conv(q, wpsi, Some(bpsi), POINT)?;
    let a = tape.sigmoid(psi);
    let alpha = tape.upsample2(a);
    Ok((tape.gate(f, alpha)?, alpha))
}

/// Applies one attention gate to skip feature `f` (`n x c_f x 2h x 2w`)
/// with gating feature `g` (`n x c_g x h x w`). Returns the gated feature
/// and the attention map `n x 1 x 2h x 2w`.
pub fn attention_gate(f: &Tensor, g: &Tensor, params: &GateParams) -> Result<(Tensor, Tensor)> {
    let (_, cf, _, _) = f.dims4()?;
    let (_, cg, _, _) = g.dims4()?;
    let (f_int, pcf, _, _) = params.wf.dims4()?;
    let (gi, pcg, _, _) = params.wg.dims4()?;
    if pcf != cf || pcg != cg || gi != f_int || params.wpsi.shape() != [1, f_int, 1, 1] {
        return Err(Error::Shape("attention-gate projections disagree on channel counts".into()));
    }
    let mut tape = Tape::new();
    let (fv, gv) = (tape.input(f.clone()), tape.input(g.clone()));
    let ps = [&params.wf, &params.wg, &params.bg, &params.wpsi, &params.bpsi].map(|t| tape.input(t.clone()));
    let (out, alpha) = gate_vars(&mut tape, fv, gv, ps)?;
    Ok((tape.value(out).clone(), tape.value(alpha).clone()))
}
