use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thermo_core::datastore::{
    audit_dataset, generate_dataset, read_sample_file, write_atomic, write_sample, DatasetConfig, Manifest,
};
use thermo_core::solver::Problem;
use thermo_core::{build_grid, BoardGeometry, GrfConfig, Hole, MaterialParams, ScalarField};
use thermo_surrogate::checkpoint;
use thermo_surrogate::optim::OptimizerKind;
use thermo_surrogate::training::FieldMetrics;
use thermo_surrogate::{evaluate, train, Balance, Dataset, ModelConfig, ModelKind, TrainConfig};

use crate::args::{
    AuditArgs, BalanceArg, BoardArgs, Command, EvalArgs, GenArgs, ModelArg, OptimizerArg, SolveArgs, SplitArg, Switch,
    TrainArgs,
};
use crate::{export, CliError, Result};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(&a),
        Command::Solve(a) => solve(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Export(a) => export::run(&a),
        Command::Audit(a) => audit(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_holes(spec: &str) -> Result<Vec<Hole>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|h| {
            let v: Vec<f64> = h
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::Input(format!("bad hole `{h}`: expected cx,cy,r")))?;
            match v[..] {
                [cx, cy, radius] => Ok(Hole { cx, cy, radius }),
                _ => Err(CliError::Input(format!("bad hole `{h}`: expected cx,cy,r"))),
            }
        })
        .collect()
}

fn board(args: &BoardArgs, n: usize) -> Result<BoardGeometry> {
    let side = args.side;
    Ok(match args.holes.as_str() {
        "default" => {
            use thermo_core::geometry::{REFERENCE_HOLE_RADIUS, REFERENCE_SIDE};
            let h = side / (n.max(2) - 1) as f64;
            BoardGeometry::four_holes(side, side, (REFERENCE_HOLE_RADIUS * side / REFERENCE_SIDE).max(1.5 * h))
        }
        "none" => BoardGeometry::plain(side),
        spec => BoardGeometry::new(side, side, parse_holes(spec)?)?,
    })
}

fn gen(a: &GenArgs) -> Result<()> {
    let board = board(&a.board, a.grid)?;
    let mut grf = GrfConfig::for_length(board.length);
    if let Some(l) = a.lengthscale {
        grf.length_scale = l;
    }
    grf.t_min = a.tmin;
    grf.t_max = a.tmax;
    let cfg = DatasetConfig {
        board,
        material: MaterialParams::default(),
        nx: a.grid,
        ny: a.grid,
        grf,
        master_seed: a.seed,
        n_train: a.n,
        n_val: a.val,
        n_test: a.test,
    };
    let m = generate_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        m.splits.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CliError::Input(format!("{} row {r}: {e}", path.display())))
        })
        .collect()
}

fn solve(a: &SolveArgs) -> Result<()> {
    let (nx, ny, values) = if a.temp.extension().is_some_and(|e| e == "csv") {
        let rows = read_csv(&a.temp)?;
        let nx = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nx) {
            return Err(CliError::Input(format!("{}: rows differ in length", a.temp.display())));
        }
        (nx, rows.len(), rows.concat())
    } else {
        let f = read_sample_file(&a.temp)?;
        let [t, ..] = f.fields;
        (f.nx, f.ny, t)
    };
    if nx != ny {
        return Err(CliError::Input(format!("temperature must be square, got {nx} x {ny}")));
    }
    let board = board(&a.board, nx)?;
    let (grid, classes) = build_grid(&board, nx, ny)?;
    let problem = Problem::new(classes, MaterialParams::default())?;
    let sample = problem.generate_sample(&ScalarField::new(grid, values)?)?;
    write_sample(&a.out, &sample)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

struct Loaded {
    manifest: Manifest,
    problem: Problem,
}

fn load(dir: &Path) -> Result<Loaded> {
    let manifest = Manifest::load(dir)?;
    let problem = manifest.problem()?;
    Ok(Loaded { manifest, problem })
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load(&a.data)?;
    let samples = data.manifest.read(&a.data, &data.manifest.splits.train)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!("{} has no training samples", a.data.display())));
    }
    let val_source = match &a.val {
        Some(dir) => {
            let v = load(dir)?;
            if v.manifest.grid != data.manifest.grid || v.manifest.board != data.manifest.board {
                return Err(CliError::Input("validation data uses a different board or grid".into()));
            }
            let names = if v.manifest.splits.val.is_empty() {
                v.manifest.splits.all().cloned().collect()
            } else {
                v.manifest.splits.val.clone()
            };
            v.manifest.read(dir, &names)?
        }
        None => data.manifest.read(&a.data, &data.manifest.splits.val)?,
    };
    let kind = match a.model {
        ModelArg::MtaUnet => ModelKind::MtaUnet,
        ModelArg::UnetStl => ModelKind::StlUnet,
    };
    let tasks = match kind {
        ModelKind::MtaUnet => thermo_surrogate::TASK_GROUPS.len(),
        ModelKind::StlUnet => 1,
    };
    let balance = match (a.balance, &a.weights) {
        (Some(BalanceArg::Uncertainty), Some(_)) => {
            return Err(CliError::Input("--weights applies to --balance fixed".into()));
        }
        (Some(BalanceArg::Uncertainty), None) => Some(Balance::Uncertainty),
        (_, Some(w)) => Some(Balance::Fixed { weights: w.clone() }),
        (Some(BalanceArg::Fixed), None) => Some(Balance::fixed_default(tasks)),
        (None, None) => None,
    };
    let optimizer = match a.optimizer {
        OptimizerArg::Adadelta => match (OptimizerKind::adadelta(), a.lr) {
            (OptimizerKind::Adadelta { rho, eps, .. }, Some(lr)) => OptimizerKind::Adadelta { lr, rho, eps },
            (k, _) => k,
        },
        OptimizerArg::Adam => OptimizerKind::adam(a.lr.unwrap_or(1e-3)),
    };
    let cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        optimizer,
        physics: a.physics == Switch::On,
        balance,
        seed: a.seed,
        max_steps: a.max_steps,
        val_every: a.val_every,
    };
    let train_set = Dataset::new(&data.problem, &samples)?;
    let val_set = Dataset::new(&data.problem, &val_source)?;
    let val = (!val_source.is_empty()).then_some(&val_set);
    let (model, history) = train(&train_set, val, kind, ModelConfig::new(a.levels, a.base, a.seed), &cfg)?;
    checkpoint::save(&a.out, &model)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.jsonl");
        p.into()
    });
    write_atomic(&history_path, history.to_json_lines()?.as_bytes())?;

    let mut manifest = data.manifest;
    let stats = model.stats.to_field_stats();
    if manifest.norm_stats.as_ref() != Some(&stats) {
        manifest.norm_stats = Some(stats);
        manifest.write(&a.data)?;
    }
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs ({} steps on the last network); final total loss {:e}",
            last.epoch + 1,
            last.steps,
            last.total
        );
    }
    println!("wrote {} and {}", a.out.display(), history_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ModelReport {
    model: String,
    kind: ModelKind,
    parameters: usize,
    fields: Vec<FieldMetrics>,
}

#[derive(Debug, Serialize)]
struct Report {
    data: String,
    split: String,
    samples: usize,
    models: Vec<ModelReport>,
    /// Per field, the model with the lowest safeguarded MRE.
    lowest_mre: Vec<(String, String)>,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = load(&a.data)?;
    let splits = &data.manifest.splits;
    let (split, names): (&str, Vec<String>) = match a.split {
        SplitArg::Train => ("train", splits.train.clone()),
        SplitArg::Val => ("val", splits.val.clone()),
        SplitArg::Test if splits.test.is_empty() => ("all", splits.all().cloned().collect()),
        SplitArg::Test => ("test", splits.test.clone()),
        SplitArg::All => ("all", splits.all().cloned().collect()),
    };
    let samples = data.manifest.read(&a.data, &names)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!("split {split} of {} is empty", a.data.display())));
    }
    let test = Dataset::new(&data.problem, &samples)?;
    let mut models = Vec::new();
    for path in &a.model {
        let model = checkpoint::load(path)?;
        let metrics = evaluate(&model, &test)?;
        models.push(ModelReport {
            model: path.display().to_string(),
            kind: model.kind,
            parameters: model.nets.iter().map(|n| n.params().count()).sum(),
            fields: metrics.fields,
        });
    }
    let lowest_mre = thermo_surrogate::OUTPUT_FIELDS
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let best = models
                .iter()
                .min_by(|x, y| x.fields[f].mre.total_cmp(&y.fields[f].mre))
                .map(|m| m.model.clone())
                .unwrap_or_default();
            (name.to_string(), best)
        })
        .collect();
    let report = Report {
        data: a.data.display().to_string(),
        split: split.to_string(),
        samples: samples.len(),
        models,
        lowest_mre,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_atomic(&a.report, json.as_bytes())?;
    print!("{}", table(&report));
    Ok(())
}

fn table(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} samples ({} split of {})", r.samples, r.split, r.data);
    for m in &r.models {
        let kind = match m.kind {
            ModelKind::MtaUnet => "MTA-UNet",
            ModelKind::StlUnet => "STL U-Net",
        };
        let _ = writeln!(s, "\n{kind}  {}  ({} parameters)", m.model, m.parameters);
        let _ = writeln!(s, "{:<6}{:>14}{:>14}{:>12}{:>12}", "field", "MAE", "MAE sigma", "MRE %", "MRE sigma");
        for f in &m.fields {
            let _ = writeln!(
                s,
                "{:<6}{:>14.4e}{:>14.4e}{:>12.4}{:>12.4}",
                f.field, f.mae, f.mae_std, f.mre, f.mre_std
            );
        }
    }
    if r.models.len() > 1 {
        let _ = writeln!(s, "\nlowest MRE per field:");
        for (field, model) in &r.lowest_mre {
            let _ = writeln!(s, "  {field:<6}{model}");
        }
    }
    s
}

fn audit(a: &AuditArgs) -> Result<()> {
    let results = audit_dataset(&a.data)?;
    let bad: Vec<&(String, f64)> = results.iter().filter(|(_, l)| !(*l <= a.tol)).collect();
    let worst = results.iter().map(|(_, l)| *l).fold(0.0, f64::max);
    println!("{} samples, worst scaled residual loss {worst:e}", results.len());
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{} sample(s) exceed {:e}: {}",
            bad.len(),
            a.tol,
            bad.iter().map(|(n, l)| format!("{n} ({l:e})")).collect::<Vec<_>>().join(", ")
        )))
    }
}
