use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use focus_core::bench::data::{read_dataset_csv, write_dataset_csv};
use focus_core::bench::eval::{topk_on_uncertain, with_jobs};
use focus_core::bench::{evaluate_config, gen_synthetic, lr_grid, lr_sweep, single_vs_multi, DatasetSpec, EvalOptions, EvalReport, TEST_SEED_OFFSET};
use focus_core::network::{read_checkpoint, train_base, write_checkpoint, TrainConfig};
use focus_core::output::{fmt_num, write_json_line, Record};
use focus_core::theory::{amplification_report, coefficient_curve, toy_grad, write_amplification_csv, write_curve_csv, ToyLoss, ToyModel};
use focus_core::{FocusConfig, LabeledSample, LossKind, MlpSpec, Parameters};

use crate::settings::{ConfigError, Settings};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or settings; exit code 1.
    Config(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<focus_core::Error> for CliError {
    fn from(e: focus_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Core validation failures surfaced before any work starts.
fn invalid(e: focus_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate train.csv and test.csv"),
    ("train", "train the base classifier and write model.ckpt"),
    ("eval", "refine uncertain test samples with one configuration"),
    ("sweep", "compare the loss kinds listed in `losses`"),
    ("lr-sweep", "single-step refinement over a geometric grid of rates"),
    ("topk", "top-k accuracy on uncertain samples for each threshold in `d12_list`"),
    ("single-vs-multi", "t_multi steps at eta against one step at eta * 2^power"),
    ("theory-curve", "entropy and iFo coefficients along the three-class curve"),
    ("theory-grads", "toy-model partials and shared-pathway comparison"),
];

struct Context<'a> {
    command: &'a str,
    settings: &'a Settings,
    echo: std::collections::BTreeMap<String, String>,
    out: PathBuf,
}

impl Context<'_> {
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    fn record<T: Serialize>(&self, out: &mut impl Write, body: &T) -> Result<()> {
        write_json_line(&mut *out, &Record::new(self.command, &self.echo, body))?;
        Ok(())
    }
}

pub fn run(command: &str, settings: &Settings) -> Result<()> {
    let out = PathBuf::from(settings.required("out")?);
    let jobs: usize = settings.get("jobs")?;
    let ctx = Context {
        command,
        settings,
        echo: settings.echo(),
        out,
    };
    // resolve everything up front so bad values fail before any output
    let plan = Plan::resolve(settings)?;
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("resolved_config.txt"), settings.to_file_text())?;
    with_jobs(jobs, || match command {
        "gen-data" => gen_data(&ctx, &plan),
        "train" => train(&ctx, &plan),
        "eval" => eval(&ctx, &plan),
        "sweep" => sweep(&ctx, &plan),
        "lr-sweep" => lr_sweep_cmd(&ctx, &plan),
        "topk" => topk(&ctx, &plan),
        "single-vs-multi" => single_vs_multi_cmd(&ctx, &plan),
        "theory-curve" => theory_curve(&ctx, &plan),
        "theory-grads" => theory_grads(&ctx, &plan),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    })?
}

/// Typed view of the settings.
struct Plan {
    train_data: DatasetSpec,
    test_data: DatasetSpec,
    hidden: Vec<usize>,
    model_seed: u64,
    train: TrainConfig,
    focus: FocusConfig,
    options: EvalOptions,
    losses: Vec<LossKind>,
    lrs: Vec<f64>,
    d12_list: Vec<f64>,
    ks: Vec<usize>,
    t_multi: usize,
    powers: Vec<u32>,
    resolution: usize,
    toy: ToyModel,
}

fn parse_pairs(s: &Settings) -> Result<Vec<(usize, usize)>> {
    s.list::<String>("confusion_pairs")?
        .iter()
        .map(|p| {
            p.split_once('-')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| CliError::Config(format!("invalid pair `{p}` in `confusion_pairs`; expected a-b")))
        })
        .collect()
}

fn fixed<const N: usize>(s: &Settings, name: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = s.list(name)?;
    v.try_into()
        .map_err(|v: Vec<f64>| CliError::Config(format!("`{name}` needs {N} values, got {}", v.len())))
}

impl Plan {
    fn resolve(s: &Settings) -> Result<Self> {
        let data_seed: u64 = s.get("data_seed")?;
        let train_data = DatasetSpec {
            num_classes: s.get("num_classes")?,
            samples_per_class: s.get("samples_per_class")?,
            feature_dim: s.get("feature_dim")?,
            class_separation: s.get("class_separation")?,
            confusion_pairs: parse_pairs(s)?,
            confusion_pull: s.get("confusion_pull")?,
            noise_scale: s.get("noise_scale")?,
            seed: data_seed,
        };
        train_data.validate().map_err(invalid)?;
        let test_data = DatasetSpec {
            samples_per_class: s.get("test_samples_per_class")?,
            seed: data_seed.wrapping_add(TEST_SEED_OFFSET),
            ..train_data.clone()
        };
        test_data.validate().map_err(invalid)?;

        let train = TrainConfig {
            epochs: s.get("epochs")?,
            lr: s.get("train_lr")?,
            batch_size: s.get("batch_size")?,
            clip_norm: s.get("train_clip")?,
            seed: s.get("train_seed")?,
        };
        let focus = FocusConfig {
            eta: s.get("eta")?,
            iterations: s.get("iterations")?,
            n_focus: s.get("n_f")?,
            d12: s.get("d12")?,
            loss: s.get("loss")?,
            weighted: s.get("weighted")?,
            clip_norm: s.get("clip_norm")?,
        };
        // class-count checks wait until the model is loaded
        focus.validate(usize::MAX).map_err(invalid)?;

        let lrs = lr_grid(s.get("base_lr")?, s.get("factor")?, s.get("count")?).map_err(invalid)?;
        let d12_list: Vec<f64> = s.list("d12_list")?;
        if d12_list.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(CliError::Config("`d12_list` values must lie in [0, 1]".into()));
        }
        let t_multi: usize = s.get("t_multi")?;
        if t_multi == 0 {
            return Err(CliError::Config("`t_multi` must be at least 1".into()));
        }
        let toy = ToyModel::new(fixed(s, "toy_c")?, fixed(s, "toy_x")?).map_err(invalid)?;
        Ok(Self {
            train_data,
            test_data,
            hidden: s.list("hidden")?,
            model_seed: s.get("model_seed")?,
            train,
            focus,
            options: EvalOptions {
                max_uncertain: s.get("max_uncertain")?,
            },
            losses: s.list("losses")?,
            lrs,
            d12_list,
            ks: s.list("ks")?,
            t_multi,
            powers: s.list("powers")?,
            resolution: s.get("resolution")?,
            toy,
        })
    }

    fn mlp(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.train_data.feature_dim];
        widths.extend(&self.hidden);
        widths.push(self.train_data.num_classes);
        MlpSpec::new(widths, self.model_seed).map_err(invalid)
    }
}

fn read_data(path: &str) -> Result<Vec<LabeledSample>> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("cannot open {path}: {e}")))?;
    read_dataset_csv(BufReader::new(file)).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

/// `train_data` if set, otherwise generated from the dataset keys.
fn training_set(ctx: &Context, plan: &Plan) -> Result<Vec<LabeledSample>> {
    match ctx.settings.raw("train_data") {
        "" => Ok(gen_synthetic(&plan.train_data)?),
        path => read_data(path),
    }
}

fn test_set(ctx: &Context, plan: &Plan) -> Result<Vec<LabeledSample>> {
    match ctx.settings.raw("test_data") {
        "" => Ok(gen_synthetic(&plan.test_data)?),
        path => read_data(path),
    }
}

/// `checkpoint` if set, otherwise a freshly trained model.
fn model(ctx: &Context, plan: &Plan) -> Result<Parameters> {
    let params = match ctx.settings.raw("checkpoint") {
        "" => train_base(&plan.mlp()?, &training_set(ctx, plan)?, &plan.train)?.0,
        path => {
            let file = File::open(path).map_err(|e| CliError::Runtime(format!("cannot open {path}: {e}")))?;
            read_checkpoint(BufReader::new(file))
                .map_err(|e| CliError::Runtime(format!("{path}: {e}")))?
                .1
        }
    };
    plan.focus.validate(params.num_classes()).map_err(invalid)?;
    Ok(params)
}

fn model_and_test(ctx: &Context, plan: &Plan) -> Result<(Parameters, Vec<LabeledSample>)> {
    let params = model(ctx, plan)?;
    let test = test_set(ctx, plan)?;
    if let Some(s) = test.iter().find(|s| s.features.len() != params.input_width() || s.label >= params.num_classes()) {
        return Err(CliError::Runtime(format!(
            "test data does not fit the model: {} features, label {}, model expects {} features and {} classes",
            s.features.len(),
            s.label,
            params.input_width(),
            params.num_classes()
        )));
    }
    Ok((params, test))
}

fn gen_data(ctx: &Context, plan: &Plan) -> Result<()> {
    #[derive(Serialize)]
    struct Body {
        train_file: &'static str,
        test_file: &'static str,
        n_train: usize,
        n_test: usize,
    }
    let train = gen_synthetic(&plan.train_data)?;
    let test = gen_synthetic(&plan.test_data)?;
    let mut w = ctx.create("train.csv")?;
    write_dataset_csv(&mut w, &train)?;
    w.flush()?;
    let mut w = ctx.create("test.csv")?;
    write_dataset_csv(&mut w, &test)?;
    w.flush()?;
    let mut log = ctx.create("gen_data.jsonl")?;
    ctx.record(
        &mut log,
        &Body {
            train_file: "train.csv",
            test_file: "test.csv",
            n_train: train.len(),
            n_test: test.len(),
        },
    )?;
    Ok(log.flush()?)
}

fn train(ctx: &Context, plan: &Plan) -> Result<()> {
    #[derive(Serialize)]
    struct Body<'a> {
        checkpoint: &'static str,
        widths: &'a [usize],
        n_train: usize,
        #[serde(flatten)]
        report: &'a focus_core::network::TrainReport,
    }
    let mlp = plan.mlp()?;
    let data = training_set(ctx, plan)?;
    let (params, report) = train_base(&mlp, &data, &plan.train)?;
    let mut w = ctx.create("model.ckpt")?;
    write_checkpoint(&mut w, &mlp, &params)?;
    w.flush()?;
    let mut log = ctx.create("train.jsonl")?;
    ctx.record(
        &mut log,
        &Body {
            checkpoint: "model.ckpt",
            widths: &mlp.layer_widths,
            n_train: data.len(),
            report: &report,
        },
    )?;
    Ok(log.flush()?)
}

fn eval(ctx: &Context, plan: &Plan) -> Result<()> {
    let (params, test) = model_and_test(ctx, plan)?;
    let report = evaluate_config(&params, &test, &plan.focus, &plan.options)?;
    let mut log = ctx.create("eval.jsonl")?;
    ctx.record(&mut log, &report.summary())?;
    log.flush()?;
    let mut w = ctx.create("eval_samples.csv")?;
    writeln!(w, "index,label,original,refined,delta12,diverged,verdict")?;
    for o in &report.outcomes {
        let verdict = serde_json::to_value(o.verdict).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            o.index,
            o.label,
            o.original,
            o.refined,
            fmt_num(o.delta12),
            o.diverged,
            verdict.as_str().unwrap_or_default()
        )?;
    }
    Ok(w.flush()?)
}

const REPORT_HEADER: &str = "n_uncertain,n_uncertain_available,fraction_uncertain,acc_base,acc_opt,delta_acc,fixed,broken,swapped,unchanged,diverged";

fn report_columns(r: &EvalReport) -> String {
    let c = &r.counts;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.n_uncertain,
        r.n_uncertain_available,
        fmt_num(r.fraction_uncertain),
        fmt_num(r.acc_base),
        fmt_num(r.acc_opt),
        fmt_num(r.delta_acc),
        c.fixed,
        c.broken,
        c.swapped,
        c.unchanged,
        c.diverged
    )
}

fn sweep(ctx: &Context, plan: &Plan) -> Result<()> {
    #[derive(Serialize)]
    struct Body<'a> {
        loss: LossKind,
        report: &'a EvalReport,
    }
    let (params, test) = model_and_test(ctx, plan)?;
    let mut log = ctx.create("sweep.jsonl")?;
    let mut csv = ctx.create("sweep.csv")?;
    writeln!(csv, "loss,weighted,{REPORT_HEADER}")?;
    for &loss in &plan.losses {
        let config = FocusConfig { loss, ..plan.focus.clone() };
        config.validate(params.num_classes()).map_err(invalid)?;
        let report = evaluate_config(&params, &test, &config, &plan.options)?.summary();
        ctx.record(&mut log, &Body { loss, report: &report })?;
        writeln!(csv, "{loss},{},{}", config.weighted, report_columns(&report))?;
    }
    log.flush()?;
    Ok(csv.flush()?)
}

fn lr_sweep_cmd(ctx: &Context, plan: &Plan) -> Result<()> {
    if plan.focus.iterations != 1 {
        return Err(CliError::Config(format!(
            "`lr-sweep` runs single-step refinement; got iterations = {}",
            plan.focus.iterations
        )));
    }
    let (params, test) = model_and_test(ctx, plan)?;
    let points = lr_sweep(&params, &test, &plan.focus, &plan.lrs, &plan.options)?;
    let mut log = ctx.create("lr_sweep.jsonl")?;
    let mut csv = ctx.create("lr_sweep.csv")?;
    writeln!(csv, "index,lr,{REPORT_HEADER}")?;
    for p in &points {
        let summary = focus_core::bench::sweep::SweepPoint {
            report: p.report.summary(),
            ..p.clone()
        };
        ctx.record(&mut log, &summary)?;
        writeln!(csv, "{},{},{}", p.index, fmt_num(p.lr), report_columns(&p.report))?;
    }
    log.flush()?;
    Ok(csv.flush()?)
}

fn topk(ctx: &Context, plan: &Plan) -> Result<()> {
    let (params, test) = model_and_test(ctx, plan)?;
    let mut log = ctx.create("topk.jsonl")?;
    let mut csv = ctx.create("topk.csv")?;
    let header: Vec<String> = plan.ks.iter().map(|k| format!("top{k}")).collect();
    writeln!(csv, "d12,n_uncertain,{}", header.join(","))?;
    for &d12 in &plan.d12_list {
        let row = topk_on_uncertain(&params, &test, d12, &plan.ks).map_err(invalid)?;
        ctx.record(&mut log, &row)?;
        let accs: Vec<String> = row.accuracies.iter().map(|a| fmt_num(*a)).collect();
        writeln!(csv, "{},{},{}", fmt_num(d12), row.n_uncertain, accs.join(","))?;
    }
    log.flush()?;
    Ok(csv.flush()?)
}

fn single_vs_multi_cmd(ctx: &Context, plan: &Plan) -> Result<()> {
    let (params, test) = model_and_test(ctx, plan)?;
    let r = single_vs_multi(&params, &test, &plan.focus, plan.focus.eta, plan.t_multi, &plan.powers, &plan.options)?;
    let mut log = ctx.create("single_vs_multi.jsonl")?;
    ctx.record(&mut log, &r)?;
    log.flush()?;
    let mut csv = ctx.create("single_vs_multi.csv")?;
    writeln!(csv, "arm,power,lr,iterations,delta_acc")?;
    writeln!(csv, "multi,,{},{},{}", fmt_num(r.eta), r.t_multi, fmt_num(r.multi_delta_acc))?;
    for p in &r.single {
        writeln!(csv, "single,{},{},1,{}", p.power, fmt_num(p.lr), fmt_num(p.delta_acc))?;
    }
    Ok(csv.flush()?)
}

fn theory_curve(ctx: &Context, plan: &Plan) -> Result<()> {
    #[derive(Serialize)]
    struct Body {
        file: &'static str,
        points: usize,
    }
    let rows = coefficient_curve(plan.resolution).map_err(invalid)?;
    let mut csv = ctx.create("theory_curve.csv")?;
    write_curve_csv(&mut csv, &rows)?;
    csv.flush()?;
    let mut log = ctx.create("theory_curve.jsonl")?;
    ctx.record(
        &mut log,
        &Body {
            file: "theory_curve.csv",
            points: rows.len(),
        },
    )?;
    Ok(log.flush()?)
}

fn theory_grads(ctx: &Context, plan: &Plan) -> Result<()> {
    let losses = [
        ToyLoss::IfoUnweighted,
        ToyLoss::Dofo,
        ToyLoss::SingleMinus(0),
        ToyLoss::SingleMinus(1),
        ToyLoss::SinglePlus(2),
        ToyLoss::Entropy,
    ];
    let mut log = ctx.create("theory_grads.jsonl")?;
    let mut csv = ctx.create("theory_grads.csv")?;
    writeln!(csv, "loss,d_c0,d_c1,d_c2,d_c3,d_c4,d_c5,d_c6,shared_pathway")?;
    for loss in losses {
        let g = toy_grad(&plan.toy, loss)?;
        ctx.record(&mut log, &g)?;
        let partials: Vec<String> = g.partials.iter().map(|v| fmt_num(*v)).collect();
        writeln!(csv, "{loss},{},{}", partials.join(","), fmt_num(g.shared_pathway))?;
    }
    csv.flush()?;
    let amp = amplification_report(&plan.toy)?;
    ctx.record(&mut log, &amp)?;
    log.flush()?;
    let mut w = ctx.create("theory_amplification.csv")?;
    write_amplification_csv(&mut w, &[(plan.toy, amp)])?;
    Ok(w.flush()?)
}

/// Reads a config file into `settings`.
pub fn load_config(settings: &mut Settings, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(settings.apply_file(&text, &path.display().to_string())?)
}
