//! Command-line surface: subcommands, configuration and file formats.

pub mod config;
pub mod io;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aef::ambiguity_map;
use crate::cloudgeom::{synth_scene, PointCloud, SceneKind, SceneSpec};
use crate::error::{invalid, Error, Result};
use crate::margin_contrast::margin_map;
use crate::metrics::{breakdown, confusion, scores, ConfusionMatrix, Scores};
use crate::nettrain::{gradient_suite, train_model, Model};

pub use config::{parse_config, parse_config_over, Config};
use io::{
    ambiguity_csv, decode_checkpoint, encode_checkpoint, fmt_g9, format_cloud, format_ply, parse_cloud,
    read_file, read_text, write_file, Checkpoint,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ambiseg", version, about = "Ambiguity-aware point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: Config) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => parse_config_over(base, &read_text(p)?)?,
            None => base,
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic labeled scene.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SceneKind,
        #[arg(long, default_value_t = 1000)]
        points_per_class: usize,
        /// Gaussian jitter in scene units.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Label-geometry ambiguity and margins of a labeled cloud.
    Ambiguity {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a model to one or more labeled clouds and save a checkpoint.
    Train {
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Scores overall and per ambiguity level.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Labels and predicted ambiguity for a cloud.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every objective on small seeded models.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_kind(s: &str) -> std::result::Result<SceneKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 1 for bad input of any kind, 2 when a valid request failed to run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::Format(_) => EXIT_INVALID,
        Error::Divergence { .. } | Error::File { .. } | Error::Io(_) => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// reports to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    parse_cloud(&read_text(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_model(path: &Path, cfg: &ConfigArgs) -> Result<(Config, Model)> {
    let ckpt = decode_checkpoint(&read_file(path)?)?;
    let config = cfg.resolve(ckpt.config)?;
    let model = Model::from_named(config.model_config(), &ckpt.tensors)?;
    Ok((config, model))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth {
            kind,
            points_per_class,
            noise,
            seed,
            out: path,
            cfg,
        } => {
            cfg.resolve(Config::default())?;
            let cloud = synth_scene(&SceneSpec::new(kind, points_per_class, noise, seed))?;
            write_file(&path, format_cloud(&cloud).as_bytes())?;
            writeln!(
                out,
                "wrote {} points of {kind} to {}",
                cloud.len(),
                path.display()
            )?;
        }
        Command::Ambiguity {
            input,
            out: path,
            ply,
            cfg,
        } => {
            let config = cfg.resolve(Config::default())?;
            let mc = config.model_config();
            let cloud = load_cloud(&input)?;
            let amb = ambiguity_map(&cloud, &mc.aef)?;
            let margins = margin_map(&amb, &mc.margin);
            write_file(
                &path,
                ambiguity_csv(cloud.positions(), &amb.values, &margins.values).as_bytes(),
            )?;
            if let Some(p) = ply {
                write_file(&p, format_ply(cloud.positions(), &amb.values).as_bytes())?;
            }
            let ambiguous = amb.values.iter().filter(|&&a| a > 0.0).count();
            writeln!(
                out,
                "{ambiguous} of {} points ambiguous at K = {}",
                cloud.len(),
                config.k
            )?;
        }
        Command::Train {
            input,
            out: path,
            history,
            cfg,
        } => {
            let config = cfg.resolve(Config::default())?;
            let clouds = input.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>>>()?;
            let classes = clouds.iter().map(|c| c.num_classes()).max().unwrap_or(1);
            let dim = clouds[0].feature_dim();
            if clouds.iter().any(|c| c.feature_dim() != dim) {
                return Err(invalid("training clouds differ in feature count"));
            }
            let model = Model::new(config.model_config(), 3 + dim, classes)?;
            let outcome = train_model(model, &clouds, |_, _| {})?;
            let ckpt = Checkpoint {
                config,
                tensors: outcome.model.named_tensors(),
            };
            write_file(&path, &encode_checkpoint(&ckpt)?)?;
            if let Some(p) = history {
                write_file(&p, history_csv(&outcome.history).as_bytes())?;
            }
            let last = outcome.history.last().map_or(f64::NAN, |r| r.l_total);
            writeln!(
                out,
                "trained {} epochs, final loss {}, saved {}",
                outcome.history.len(),
                fmt_g9(last),
                path.display()
            )?;
        }
        Command::Eval {
            model,
            input,
            out: path,
            cfg,
        } => {
            let (config, model) = load_model(&model, &cfg)?;
            let aef = config.model_config().aef;
            let classes = model.num_classes();
            let mut all = ConfusionMatrix::new(classes);
            let mut bins: Option<Vec<ConfusionMatrix>> = None;
            for p in &input {
                let cloud = load_cloud(p)?;
                let pred = model.predict(&cloud)?;
                all.merge(&confusion(&pred.labels, cloud.labels(), classes)?)?;
                let amb = ambiguity_map(&cloud, &aef)?;
                let rows = breakdown(&pred.labels, cloud.labels(), &amb.values, classes)?;
                match &mut bins {
                    None => bins = Some(rows.into_iter().map(|r| r.matrix).collect()),
                    Some(acc) => {
                        for (a, r) in acc.iter_mut().zip(&rows) {
                            a.merge(&r.matrix)?;
                        }
                    }
                }
            }
            let mut table = vec![("all".to_string(), all.total(), scores(&all))];
            for (bin, m) in crate::metrics::AmbiguityBin::ALL
                .iter()
                .zip(bins.unwrap_or_default())
            {
                table.push((bin.label().to_string(), m.total(), scores(&m)));
            }
            let csv = metrics_csv(&table);
            out.write_all(csv.as_bytes())?;
            if let Some(p) = path {
                write_file(&p, csv.as_bytes())?;
            }
        }
        Command::Predict {
            model,
            input,
            out: path,
            ply,
            cfg,
        } => {
            let (_, model) = load_model(&model, &cfg)?;
            let cloud = load_cloud(&input)?;
            let pred = model.predict(&cloud)?;
            write_file(
                &path,
                prediction_csv(&cloud, &pred.labels, &pred.point_ambiguity).as_bytes(),
            )?;
            if let Some(p) = ply {
                write_file(
                    &p,
                    format_ply(cloud.positions(), &pred.point_ambiguity).as_bytes(),
                )?;
            }
            writeln!(out, "labeled {} points, saved {}", cloud.len(), path.display())?;
        }
        Command::Gradcheck { seed, cfg } => {
            let config = cfg.resolve(Config::default())?;
            let seed = seed.unwrap_or(config.seed);
            let rows = gradient_suite(&config.model_config(), seed)?;
            let mut ok = true;
            for r in &rows {
                ok &= r.passed();
                writeln!(
                    out,
                    "{} params={} max_rel_error={} {}",
                    r.objective,
                    r.params,
                    fmt_g9(r.max_rel_error),
                    if r.passed() { "ok" } else { "FAIL" }
                )?;
            }
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            writeln!(out, "max relative error {}", fmt_g9(worst))?;
            return Ok(if ok { EXIT_OK } else { EXIT_FAILURE });
        }
    }
    Ok(EXIT_OK)
}

fn history_csv(history: &[crate::nettrain::LossReport]) -> String {
    let stages = history.first().map_or(0, |r| r.l_am.len());
    let mut s = String::from("epoch,l_ce");
    for i in 1..=stages {
        write!(s, ",l_am{i}").expect("write to string");
    }
    for i in 1..=stages {
        write!(s, ",l_reg{i}").expect("write to string");
    }
    s.push_str(",l_seg,l_total\n");
    for (e, r) in history.iter().enumerate() {
        write!(s, "{e},{}", fmt_g9(r.l_ce)).expect("write to string");
        for v in r.l_am.iter().chain(&r.l_reg) {
            write!(s, ",{}", fmt_g9(*v)).expect("write to string");
        }
        writeln!(s, ",{},{}", fmt_g9(r.l_seg), fmt_g9(r.l_total)).expect("write to string");
    }
    s
}

fn metrics_csv(rows: &[(String, u64, Scores)]) -> String {
    let mut s = String::from("scope,points,oa,macc,miou\n");
    for (scope, n, sc) in rows {
        writeln!(
            s,
            "{},{n},{},{},{}",
            csv_field(scope),
            fmt_g9(sc.oa),
            fmt_g9(sc.macc),
            fmt_g9(sc.miou)
        )
        .expect("write to string");
    }
    s
}

/// Quotes a field that holds a comma or quote.
fn csv_field(v: &str) -> String {
    if v.contains([',', '"']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn prediction_csv(cloud: &PointCloud, labels: &[usize], ambiguity: &[f64]) -> String {
    let mut s = String::from("index,x,y,z,label,ambiguity\n");
    for (i, (p, (l, a))) in cloud
        .positions()
        .iter()
        .zip(labels.iter().zip(ambiguity))
        .enumerate()
    {
        writeln!(
            s,
            "{i},{},{},{},{l},{}",
            fmt_g9(p[0]),
            fmt_g9(p[1]),
            fmt_g9(p[2]),
            fmt_g9(*a)
        )
        .expect("write to string");
    }
    s
}
