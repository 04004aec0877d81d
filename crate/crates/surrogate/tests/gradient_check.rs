mod common;

use thermo_core::BoardGeometry;
use thermo_surrogate::{Balance, Batch, Mode, ModelConfig, NormStats, Objective, Tensor, UNet};

/// Largest elementwise |a - n| / max(|a|, |n|, floor), with the floor a
/// millionth of the largest gradient magnitude.
fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn setup() -> (thermo_core::solver::Problem, Vec<thermo_core::FieldSample>, NormStats) {
    let (problem, samples) = common::samples(&BoardGeometry::plain(0.2), 8, 2, 11);
    let stats = NormStats::fit(&samples, problem.classes()).unwrap();
    (problem, samples, stats)
}

fn perturbed_net(mode: Mode) -> UNet {
    let mut net = UNet::mta(ModelConfig::new(2, 4, 5)).unwrap();
    // nonzero biases and running statistics so every path carries signal
    for (name, t) in net.params().names().to_vec().iter().zip(0..) {
        if name.ends_with(".b") || name.ends_with("bg") || name.ends_with("bpsi") || name.ends_with("beta") {
            let d = net.params_mut().tensors_mut()[t].data_mut();
            d.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i + t) as f64).sin());
        }
    }
    if mode == Mode::Eval {
        for (k, r) in net.running_mut().iter_mut().enumerate() {
            r.mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * ((i + k) as f64).cos());
            r.var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + 0.3 * ((i * 7 + k) as f64).sin().abs());
        }
    }
    net
}

fn check_params(mode: Mode, balance: Balance, log_vars: &[f64]) {
    let (problem, samples, stats) = setup();
    let objective = Objective::new(&problem, stats, 100.0, true, balance);
    let batch = Batch::new(&samples, &stats);
    let mut net = perturbed_net(mode);
    let (_, grads) = objective.loss_and_grad(&net, &batch, log_vars, mode).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let step = 1e-6;
    for p in 0..net.params().len() {
        let g = grads.params[p].clone().unwrap_or_else(|| Tensor::zeros(net.params().tensors()[p].shape()));
        for i in 0..g.len() {
            let orig = net.params().tensors()[p].data()[i];
            net.params_mut().tensors_mut()[p].data_mut()[i] = orig + step;
            let plus = objective.loss(&net, &batch, log_vars, mode).unwrap().total;
            net.params_mut().tensors_mut()[p].data_mut()[i] = orig - step;
            let minus = objective.loss(&net, &batch, log_vars, mode).unwrap().total;
            net.params_mut().tensors_mut()[p].data_mut()[i] = orig;
            analytic.push(g.data()[i]);
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    assert_eq!(analytic.len(), net.params().count());
    let worst = worst_relative(&analytic, &numeric);
    assert!(worst <= 1e-4, "{mode:?}: worst relative gradient error {worst:e} over {} parameters", analytic.len());
}

#[test]
fn parameter_gradients_match_finite_differences_in_eval_mode() {
    check_params(Mode::Eval, Balance::Uncertainty, &[0.1, -0.2, 0.3, 0.05]);
}

#[test]
fn parameter_gradients_match_finite_differences_in_train_mode() {
    check_params(Mode::Train, Balance::Fixed { weights: vec![0.5, 0.3, 0.2, 0.7] }, &[0.0; 4]);
}

#[test]
fn output_gradients_match_finite_differences() {
    let (problem, samples, stats) = setup();
    let objective = Objective::new(&problem, stats, 100.0, true, Balance::Uncertainty);
    let batch = Batch::new(&samples, &stats);
    let net = perturbed_net(Mode::Eval);
    let log_vars = [0.2, 0.0, -0.1, 0.4];
    let mut outputs = net.forward(&batch.input, Mode::Eval).unwrap();
    let (_, grads, d_s) = objective.loss_of_outputs(net.groups(), &outputs, &batch, &log_vars).unwrap();
    // the loss is quadratic in the outputs, so a wide step costs no truncation
    let step = 1e-3;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for k in 0..outputs.len() {
        for i in 0..outputs[k].len() {
            let orig = outputs[k].data()[i];
            outputs[k].data_mut()[i] = orig + step;
            let plus = objective.loss_of_outputs(net.groups(), &outputs, &batch, &log_vars).unwrap().0.total;
            outputs[k].data_mut()[i] = orig - step;
            let minus = objective.loss_of_outputs(net.groups(), &outputs, &batch, &log_vars).unwrap().0.total;
            outputs[k].data_mut()[i] = orig;
            analytic.push(grads[k].data()[i]);
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    let worst = worst_relative(&analytic, &numeric);
    assert!(worst <= 1e-4, "worst relative output-gradient error {worst:e}");

    let d_s = d_s.unwrap();
    let step = 1e-6;
    let mut lv = log_vars;
    for j in 0..lv.len() {
        lv[j] = log_vars[j] + step;
        let plus = objective.loss_of_outputs(net.groups(), &outputs, &batch, &lv).unwrap().0.total;
        lv[j] = log_vars[j] - step;
        let minus = objective.loss_of_outputs(net.groups(), &outputs, &batch, &lv).unwrap().0.total;
        lv[j] = log_vars[j];
        let n = (plus - minus) / (2.0 * step);
        assert!((d_s[j] - n).abs() <= 1e-6 * n.abs().max(1.0), "log-variance {j}: {} vs {n}", d_s[j]);
    }
}
