//! `moveact` command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use moveact_core::backbone;
use moveact_core::config::{BackboneKind, CONFIG_ENV};
use moveact_core::evaluation::{
    evaluate_images, evaluate_pipeline, load_dataset, run_ablation, validate_sweep, write_metric_report,
    write_sweep_report, AblationKind, CommandDetector, CommandScorer, ObjectDetector, SaliencyDetector,
    TextImageScorer,
};
use moveact_core::{run_edit, BoundingBox, Config, EditRequest, Error, RgbImage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "moveact", version, about = "Move an object and change its action in one edit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Toy,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    None,
    Saliency,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON config file (default: $MOVEACT_CONFIG, then built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
}

#[derive(Debug, clap::Args)]
pub struct MetricArgs {
    /// Text-image scorer command, run as `<cmd> <image.png> <text>`; prints one number.
    #[arg(long)]
    pub scorer_cmd: Option<String>,
    #[arg(long, value_enum, default_value = "none")]
    pub detector: DetectorArg,
    /// Detector command, run as `<cmd> <image.png> <class>`; prints a JSON list of detections.
    #[arg(long, conflicts_with = "detector")]
    pub detector_cmd: Option<String>,
    /// Exit 1 if any item failed.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edit one image and write its run bundle.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        inv_prompt: String,
        #[arg(long)]
        edit_prompt: String,
        #[arg(long)]
        object: String,
        /// Target box as normalised `x0,y0,x1,y1`.
        #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
        bbox: BoundingBox,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving `<run_id>/` (default: service.artifact_root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config override `section.key=json`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a dataset, either by running the pipeline or from pre-computed images.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score `<dir>/<id>.png` instead of running the pipeline.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "move-act")]
        label: String,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep one hyperparameter over a dataset.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: AblationKind,
        /// Comma-separated values; defaults to the standard sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        metrics: MetricArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long)]
        host: Option<IpAddr>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        artifact_root: Option<PathBuf>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

pub fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    s.parse::<BoundingBox>().map_err(|e| e.to_string())
}

impl ConfigArgs {
    /// Explicit file, else `$MOVEACT_CONFIG`, else defaults; the toy backbone gets its preset.
    pub fn resolve(&self) -> moveact_core::Result<Config> {
        let from_file = self.config.is_some() || std::env::var_os(CONFIG_ENV).is_some_and(|v| !v.is_empty());
        let mut config = if !from_file && self.backbone == Some(BackboneArg::Toy) {
            Config::toy_preset()
        } else {
            Config::resolve(self.config.as_deref())?
        };
        if let Some(b) = self.backbone {
            config.backbone.kind = match b {
                BackboneArg::Toy => BackboneKind::Toy,
                BackboneArg::Real => BackboneKind::Real,
            };
        }
        config.validate()?;
        Ok(config)
    }
}

fn split_command(cmd: &str) -> (String, Vec<String>) {
    let mut parts = cmd.split_whitespace().map(String::from);
    let program = parts.next().unwrap_or_default();
    (program, parts.collect())
}

impl MetricArgs {
    fn scorer(&self) -> Option<Box<dyn TextImageScorer>> {
        self.scorer_cmd.as_deref().map(|c| {
            let (program, args) = split_command(c);
            Box::new(CommandScorer { program, args }) as Box<dyn TextImageScorer>
        })
    }

    fn detector(&self) -> Option<Box<dyn ObjectDetector>> {
        if let Some(c) = &self.detector_cmd {
            let (program, args) = split_command(c);
            return Some(Box::new(CommandDetector { program, args }));
        }
        match self.detector {
            DetectorArg::None => None,
            DetectorArg::Saliency => Some(Box::new(SaliencyDetector::default())),
        }
    }
}

fn apply_overrides(config: Config, overrides: &[String]) -> moveact_core::Result<Config> {
    let mut config = config;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid("set", format!("`{o}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        config = config.with_key(key.trim(), value)?;
    }
    Ok(config)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command) -> moveact_core::Result<i32> {
    match command {
        Command::Edit {
            image,
            inv_prompt,
            edit_prompt,
            object,
            bbox,
            seed,
            out,
            overrides,
            config,
        } => {
            let config = apply_overrides(config.resolve()?, &overrides)?;
            let request = EditRequest::new(RgbImage::load(&image)?, inv_prompt, edit_prompt, object, bbox).with_seed(seed);
            request.validate()?;
            let root = out.unwrap_or_else(|| config.service.artifact_root.clone());
            let mut session = backbone::open(&config.backbone)?;
            let result = run_edit(&request, &config, session.as_mut(), &root)?;
            println!("{}", result.trace_ref.display());
            Ok(EXIT_OK)
        }
        Command::Eval {
            dataset,
            out,
            images,
            label,
            metrics,
            config,
        } => {
            let config = config.resolve()?;
            let pairs = load_dataset(&dataset)?;
            let scorer = metrics.scorer();
            let detector = metrics.detector();
            let report = match images {
                Some(dir) => evaluate_images(&pairs, &dir, scorer.as_deref(), detector.as_deref())?,
                None => {
                    let mut session = backbone::open(&config.backbone)?;
                    let runs = out.join("runs");
                    create_dir(&runs)?;
                    evaluate_pipeline(&pairs, &config, session.as_mut(), &runs, scorer.as_deref(), detector.as_deref())?
                }
            };
            write_metric_report(&out, &label, &report)?;
            println!("{}", out.join("report.json").display());
            Ok(strict_code(metrics.strict, report.failures()))
        }
        Command::Ablate {
            dataset,
            out,
            kind,
            values,
            metrics,
            config,
        } => {
            let config = config.resolve()?;
            let values = if values.is_empty() {
                kind.standard_values().iter().map(|v| v.to_string()).collect()
            } else {
                values
            };
            validate_sweep(kind, &values, &config)?;
            let pairs = load_dataset(&dataset)?;
            let mut session = backbone::open(&config.backbone)?;
            let scorer = metrics.scorer();
            let detector = metrics.detector();
            let sweep = run_ablation(
                kind,
                &values,
                &pairs,
                &config,
                session.as_mut(),
                &out,
                scorer.as_deref(),
                detector.as_deref(),
            )?;
            write_sweep_report(&out, &sweep)?;
            println!("{}", out.join("report.json").display());
            Ok(strict_code(metrics.strict, sweep.failures()))
        }
        Command::Serve {
            host,
            port,
            artifact_root,
            pool_size,
            config,
        } => {
            let mut config = config.resolve()?;
            if let Some(p) = port {
                config.service.port = p;
            }
            if let Some(r) = artifact_root {
                config.service.artifact_root = r;
            }
            if let Some(n) = pool_size {
                config.service.pool_size = n;
            }
            config.validate()?;
            let addr = SocketAddr::new(host.unwrap_or(IpAddr::from([127, 0, 0, 1])), config.service.port);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Error::io("<tokio runtime>", e))?;
            runtime.block_on(crate::http::serve(config, addr))?;
            Ok(EXIT_OK)
        }
    }
}

fn create_dir(dir: &Path) -> moveact_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn strict_code(strict: bool, failures: usize) -> i32 {
    if failures > 0 {
        eprintln!("{failures} item(s) failed");
    }
    if strict && failures > 0 {
        EXIT_FAILURE
    } else {
        EXIT_OK
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_flag_parses() {
        let cli = Cli::try_parse_from([
            "moveact",
            "edit",
            "--image",
            "x.png",
            "--inv-prompt",
            "A photo of cat",
            "--edit-prompt",
            "A running cat",
            "--object",
            "cat",
            "--bbox",
            "0.1,0.1,0.5,0.5",
        ])
        .unwrap();
        match cli.command {
            Command::Edit { bbox, .. } => assert_eq!(bbox, BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn ablate_values_split_on_commas() {
        let cli = Cli::try_parse_from([
            "moveact", "ablate", "--dataset", "d.jsonl", "--out", "o", "--kind", "layer_set", "--values",
            "decoder,encoder,all",
        ])
        .unwrap();
        match cli.command {
            Command::Ablate { kind, values, .. } => {
                assert_eq!(kind, AblationKind::LayerSet);
                assert_eq!(values, ["decoder", "encoder", "all"]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn overrides_accept_json_and_bare_strings() {
        let c = apply_overrides(Config::default(), &["edit.S=20".into(), "edit.layer_set=encoder".into()]).unwrap();
        assert_eq!(c.edit.start_step, 20);
        assert!(apply_overrides(Config::default(), &["edit.S".into()]).is_err());
    }
}
