use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::anyhow;
use mrfseg::config::Config;
use mrfseg::data::{self, read_dataset, write_dataset, Dataset, Gray};
use mrfseg::eal::eal_weights;
use mrfseg::mrfm::receptive_field;
use mrfseg::segnet::{MrfmMode, SegModel};
use mrfseg::train::{
    evaluate, history_csv, summary_table, train, train_lite_two_stage, EvalReport,
};
use mrfseg::LabelMap;

use crate::{Cli, Command, EalmapArgs, EvalArgs, GenDataArgs, RfArgs, TrainArgs, TrainLiteArgs};

/// Validation failures exit 1, failures after inputs were accepted exit 2.
pub enum CliError {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Classify<T> {
    fn invalid(self, what: impl FnOnce() -> String) -> CliResult<T>;
    fn runtime(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Invalid(e.into().context(what())))
    }
    fn runtime(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into().context(what())))
    }
}

fn invalid(msg: String) -> CliError {
    CliError::Invalid(anyhow!(msg))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::TrainLite(a) => train_lite(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Ealmap(a) => ealmap(a),
        Command::Rf(a) => rf(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => Config::load(p).invalid(|| "--config".to_string()),
        None => Ok(Config::default()),
    }
}

fn load_data(flag: &str, dir: &Path, classes: usize) -> CliResult<Dataset> {
    let ds = read_dataset(dir).invalid(|| format!("{flag} {}", dir.display()))?;
    if ds.num_classes != classes {
        return Err(invalid(format!(
            "{flag} {}: dataset has {} classes, model expects {classes}",
            dir.display(),
            ds.num_classes
        )));
    }
    Ok(ds)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).invalid(|| format!("--out {}", dir.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).runtime(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs, seed: u64) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.data.seed = seed;
    if a.count == 0 {
        return Err(invalid("--count must be positive".to_string()));
    }
    create_dir(&a.out)?;
    let samples = data::generate(&cfg.data, a.count).runtime(|| "generating scenes".to_string())?;
    let ds = Dataset {
        samples,
        num_classes: cfg.data.num_classes,
        ignore_id: cfg.data.ignore_id,
        height: cfg.data.height,
        width: cfg.data.width,
    };
    write_dataset(&a.out, &ds).runtime(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "wrote {} samples ({}×{}, {} classes) to {}",
        a.count,
        cfg.data.height,
        cfg.data.width,
        cfg.data.num_classes,
        a.out.display()
    );
    Ok(())
}

fn print_final(name: &str, report: Option<&EvalReport>) {
    if let Some(r) = report {
        print!("{}", summary_table(&[(name.to_string(), r)]));
    }
}

fn train_cmd(a: &TrainArgs, seed: u64) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let classes = cfg.net.num_classes;
    let train_ds = load_data("--data", &a.data, classes)?;
    let val = a
        .val
        .as_deref()
        .map(|v| load_data("--val", v, classes))
        .transpose()?;
    let model = SegModel::build(&cfg.net, seed).invalid(|| "[net]".to_string())?;
    if let Some(ckpt) = &a.resume {
        model
            .load_into(ckpt)
            .invalid(|| format!("--resume {}", ckpt.display()))?;
    }
    create_dir(&a.out)?;

    let outcome = train(&model, &train_ds, val.as_ref(), &cfg.train, seed)
        .runtime(|| "training".to_string())?;
    model
        .save(&a.out.join("model.ckpt"))
        .runtime(|| "saving model.ckpt".to_string())?;
    write_file(
        &a.out.join("metrics.csv"),
        history_csv(&outcome.history, classes).as_bytes(),
    )?;
    if let Some((miou, iter, dict)) = &outcome.best {
        let best = SegModel::build(&cfg.net, seed).runtime(|| "[net]".to_string())?;
        best.load_state_dict(dict)
            .runtime(|| "best state".to_string())?;
        best.save(&a.out.join("best.ckpt"))
            .runtime(|| "saving best.ckpt".to_string())?;
        println!("best val mIoU {:.2} at iteration {iter}", 100.0 * miou);
    }
    print_final("final", outcome.final_eval.as_ref());
    Ok(())
}

fn train_lite(a: &TrainLiteArgs, seed: u64) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    if cfg.net.mrfm_mode != MrfmMode::Lite || cfg.net.mrfm_pruned {
        return Err(invalid(
            "--config: [net] mrfm_mode must be lite and mrfm_pruned false".to_string(),
        ));
    }
    let classes = cfg.net.num_classes;
    let train_ds = load_data("--data", &a.data, classes)?;
    let val = a
        .val
        .as_deref()
        .map(|v| load_data("--val", v, classes))
        .transpose()?;
    let mut model = SegModel::build(&cfg.net, seed).invalid(|| "[net]".to_string())?;
    create_dir(&a.out)?;

    let outcome = train_lite_two_stage(&mut model, &train_ds, val.as_ref(), &cfg.train, seed)
        .runtime(|| "two-stage training".to_string())?;
    let stage1 = SegModel::build(&cfg.net, seed).runtime(|| "[net]".to_string())?;
    stage1
        .load_state_dict(&outcome.stage1_state)
        .runtime(|| "stage-1 state".to_string())?;
    stage1
        .save(&a.out.join("stage1.ckpt"))
        .runtime(|| "saving stage1.ckpt".to_string())?;
    model
        .save(&a.out.join("model.ckpt"))
        .runtime(|| "saving model.ckpt".to_string())?;
    write_file(
        &a.out.join("stage1.csv"),
        history_csv(&outcome.stage1.history, classes).as_bytes(),
    )?;
    write_file(
        &a.out.join("stage2.csv"),
        history_csv(&outcome.stage2.history, classes).as_bytes(),
    )?;
    print_final("stage 1", outcome.stage1.final_eval.as_ref());
    print_final("stage 2", outcome.stage2.final_eval.as_ref());
    Ok(())
}

fn parse_scales(s: &str) -> CliResult<Vec<f64>> {
    let scales: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("--scales: cannot parse '{s}'")))?;
    if scales.is_empty() || scales.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid(format!(
            "--scales: every scale must be positive, got '{s}'"
        )));
    }
    Ok(scales)
}

fn eval_csv(report: &EvalReport, classes: usize) -> String {
    let mut out = String::from("scale,miou,boundary_miou");
    for c in 0..classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for s in &report.per_scale {
        let _ = write!(out, "{},{:.17e},{}", s.scale, s.miou, opt(s.boundary_miou));
        for iou in s.confusion.per_class_iou() {
            let _ = write!(out, ",{}", opt(iou));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "std,{:.17e},{}", report.std, ",".repeat(classes));
    out
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let scales = parse_scales(&a.scales)?;
    let model = SegModel::load(&a.ckpt).invalid(|| format!("--ckpt {}", a.ckpt.display()))?;
    let classes = model.config().num_classes;
    let ds = load_data("--data", &a.data, classes)?;
    let report = evaluate(&model, &ds, &scales, a.band).runtime(|| "evaluation".to_string())?;
    write_file(&a.out, eval_csv(&report, classes).as_bytes())?;
    let name = a
        .ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    print!("{}", summary_table(&[(name, &report)]));
    if let Some(b) = report
        .per_scale
        .iter()
        .find(|s| s.scale == 1.0)
        .and_then(|s| s.boundary_miou)
    {
        println!(
            "boundary mIoU (band {} px, scale 1): {:.2}",
            a.band,
            100.0 * b
        );
    }
    Ok(())
}

fn ealmap(a: &EalmapArgs) -> CliResult<()> {
    let cfg = mrfseg::EalConfig::new(a.k, a.m).invalid(|| "--k/--m".to_string())?;
    let gray = data::read_pgm(&a.labels).invalid(|| format!("--labels {}", a.labels.display()))?;
    let labels = LabelMap::new(gray.height, gray.width, gray.pixels, a.ignore)
        .invalid(|| format!("--labels {}", a.labels.display()))?;
    labels.validate(a.classes).invalid(|| {
        format!(
            "--labels {} with --classes {}",
            a.labels.display(),
            a.classes
        )
    })?;
    let weights = eal_weights(std::slice::from_ref(&labels), a.classes, &cfg)
        .runtime(|| "weight map".to_string())?;
    let out = Gray {
        width: labels.width(),
        height: labels.height(),
        pixels: weights[0].to_gray(a.m),
    };
    data::write_pgm(&a.out, &out).runtime(|| format!("--out {}", a.out.display()))?;
    let heavy = weights[0].values().iter().filter(|&&w| w > 1.0).count();
    println!(
        "{}×{} map, {heavy} pixels weighted above 1 (k={}, m={})",
        labels.width(),
        labels.height(),
        a.k,
        a.m
    );
    Ok(())
}

fn rf(a: &RfArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let model = SegModel::build(&cfg.net, 0).invalid(|| "[net]".to_string())?;
    let mut rows: Vec<(String, usize, usize, usize)> = cfg
        .rf
        .iter()
        .map(|(name, spec)| {
            let (rf, jump) = receptive_field(spec);
            (name.clone(), spec.layers().len(), rf, jump)
        })
        .collect();
    let spec = model.bottleneck_layer_spec();
    let (rf, jump) = receptive_field(&spec);
    rows.push(("net.bottleneck".to_string(), spec.layers().len(), rf, jump));

    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    println!("{:<width$} | layers |   rf | jump", "path");
    for (name, n, rf, jump) in rows {
        println!("{name:<width$} | {n:>6} | {rf:>4} | {jump:>4}");
    }
    Ok(())
}
