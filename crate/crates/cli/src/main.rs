use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use safecritic::report;
use safecritic::sim::{self, ExperimentConfig, Mode, Preset, TriggerMode, Variant};
use safecritic::SimError;

/// Simulate online safety-embedded critic learning on the benchmark plant.
#[derive(Parser)]
#[command(name = "safecritic", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and export trajectory.csv + metrics.json.
    Run(RunArgs),
    /// Run an ablation family and export per-run CSVs + comparison.json.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Preset name (obstacle, selftrig) or path to a TOML config file.
    target: Option<String>,

    #[command(flatten)]
    common: CommonArgs,

    /// Controller variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Args)]
struct CompareArgs {
    /// Preset name (obstacle compares variants, selftrig compares modes).
    target: String,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// Preset supplying defaults (alternative to the positional name).
    #[arg(long)]
    preset: Option<String>,

    /// TOML config file overriding preset defaults key by key.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Triggering mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// Integration step (s).
    #[arg(long)]
    dt: Option<f64>,

    /// Simulation horizon (s).
    #[arg(long)]
    horizon: Option<f64>,

    /// RNG seed for replay sampling.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,

    /// Self-triggered decision rule: threshold monitoring or analytic period.
    #[arg(long, value_enum)]
    trigger_mode: Option<TriggerModeArg>,

    /// Identifier filter refresh on saturation.
    #[arg(long, value_enum)]
    refresh: Option<RefreshArg>,

    /// Abort with a nonzero exit when the safety correction was infeasible
    /// at any trigger instant (default: record and continue).
    #[arg(long)]
    strict_infeasibility: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "u1", alias = "u1_baseline_cbf")]
    U1,
    #[value(name = "u2", alias = "u2_rcbf_filter")]
    U2,
    #[value(name = "u3", alias = "u3_rcbf_embedded")]
    U3,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::U1 => Variant::U1BaselineCbf,
            VariantArg::U2 => Variant::U2RcbfFilter,
            VariantArg::U3 => Variant::U3RcbfEmbedded,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "time_triggered", alias = "time", alias = "time-triggered")]
    TimeTriggered,
    #[value(name = "self_triggered", alias = "self", alias = "self-triggered")]
    SelfTriggered,
}

impl From<ModeArg> for Mode {
    fn from(v: ModeArg) -> Mode {
        match v {
            ModeArg::TimeTriggered => Mode::TimeTriggered,
            ModeArg::SelfTriggered => Mode::SelfTriggered,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TriggerModeArg {
    Monitor,
    Period,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefreshArg {
    On,
    Off,
}

/// Process failure carrying its exit code: 2 usage, 3 numeric/divergence,
/// 4 safety infeasibility, 1 anything else (I/O).
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Failure {
        let code = match &e {
            SimError::Config(_) | SimError::ParameterDomain(_) => 2,
            SimError::Divergence { .. }
            | SimError::NumericDomain { .. }
            | SimError::KernelOverflow { .. }
            | SimError::GammaDefiniteness { .. } => 3,
            SimError::Infeasible { .. } | SimError::UnsafeSample { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure {
            code: 1,
            message: format!("i/o error: {e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_preset_name(name: &str) -> Option<Preset> {
    match name {
        "obstacle" => Some(Preset::Obstacle),
        "selftrig" => Some(Preset::Selftrig),
        "custom" => Some(Preset::Custom),
        _ => None,
    }
}

/// Merge `overlay` onto `base` recursively. Tables merge key by key except
/// tagged-enum tables (those carrying a `kind` key), which replace wholesale;
/// scalars and arrays replace.
fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => {
                        let replace_whole = matches!(
                            (&*slot, &v),
                            (toml::Value::Table(_), toml::Value::Table(t)) if t.contains_key("kind")
                        );
                        if replace_whole {
                            *slot = v;
                        } else {
                            merge_toml(slot, v);
                        }
                    }
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolve the experiment configuration from positional target, flags, and
/// optional config file, with precedence flags > file > preset defaults.
fn resolve_config(
    target: Option<&str>,
    common: &CommonArgs,
    variant: Option<VariantArg>,
) -> Result<ExperimentConfig, Failure> {
    // Split the positional into preset name vs config path.
    let mut preset_name: Option<String> = common.preset.clone();
    let mut config_path: Option<PathBuf> = common.config.clone();
    if let Some(t) = target {
        if parse_preset_name(t).is_some() {
            if preset_name.is_none() {
                preset_name = Some(t.to_string());
            }
        } else if Path::new(t).exists() || t.ends_with(".toml") {
            if config_path.is_none() {
                config_path = Some(PathBuf::from(t));
            }
        } else {
            return Err(Failure::usage(format!(
                "'{t}' is neither a preset name (obstacle, selftrig) nor an existing config file"
            )));
        }
    }

    let file_value: Option<toml::Value> = match &config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            Some(text.parse::<toml::Value>().map_err(|e| {
                Failure::usage(format!("config {} is not valid TOML: {e}", path.display()))
            })?)
        }
        None => None,
    };

    // The preset filling missing keys: flag/positional first, else the
    // file's own `preset` key.
    let effective_preset = match &preset_name {
        Some(name) => parse_preset_name(name)
            .ok_or_else(|| Failure::usage(format!("unknown preset '{name}'")))?,
        None => match file_value
            .as_ref()
            .and_then(|v| v.get("preset"))
            .and_then(|v| v.as_str())
        {
            Some(name) => parse_preset_name(name)
                .ok_or_else(|| Failure::usage(format!("unknown preset '{name}' in config")))?,
            None if file_value.is_some() => Preset::Custom,
            None => {
                return Err(Failure::usage(
                    "specify a preset (obstacle, selftrig) or a config file",
                ))
            }
        },
    };

    let mut config: ExperimentConfig = match (effective_preset, file_value) {
        (Preset::Custom, Some(v)) => v
            .try_into()
            .map_err(|e| Failure::usage(format!("invalid config: {e}")))?,
        (Preset::Custom, None) => {
            return Err(Failure::usage(
                "the custom preset has no defaults; supply a config file",
            ))
        }
        (p, maybe_file) => {
            let base = ExperimentConfig::preset(p).map_err(Failure::from)?;
            match maybe_file {
                None => base,
                Some(overlay) => {
                    let mut merged = toml::Value::try_from(&base).map_err(|e| {
                        Failure::usage(format!("internal preset serialization error: {e}"))
                    })?;
                    merge_toml(&mut merged, overlay);
                    merged
                        .try_into()
                        .map_err(|e| Failure::usage(format!("invalid config: {e}")))?
                }
            }
        }
    };

    // Flags override both file and preset.
    if let Some(v) = variant {
        config.variant = v.into();
    }
    if let Some(m) = common.mode {
        config.mode = m.into();
    }
    if let Some(dt) = common.dt {
        config.dt = dt;
    }
    if let Some(h) = common.horizon {
        config.horizon = h;
    }
    if let Some(seed) = common.seed {
        config.rng_seed = seed;
    }
    if let Some(tm) = common.trigger_mode {
        config.trigger_mode = match tm {
            TriggerModeArg::Monitor => TriggerMode::Monitor,
            TriggerModeArg::Period => TriggerMode::Period,
        };
    }
    if let Some(r) = common.refresh {
        config.identifier.refresh = matches!(r, RefreshArg::On);
    }

    if config.horizon <= 0.0 {
        return Err(Failure::usage(
            "horizon must be positive: a zero-length run logs no trajectory worth exporting",
        ));
    }
    Ok(config)
}

fn check_strict_infeasibility(
    strict: bool,
    events: usize,
    wrote: &[PathBuf],
) -> Result<(), Failure> {
    if strict && events > 0 {
        let paths = wrote
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Failure {
            code: 4,
            message: format!(
                "safety correction was infeasible at {events} trigger instant(s); \
                 outputs written to {paths}"
            ),
        });
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = resolve_config(args.target.as_deref(), &args.common, args.variant)?;
    let (log, metrics) = sim::run(&config)?;
    std::fs::create_dir_all(&args.common.out_dir)?;
    let csv_path = args.common.out_dir.join("trajectory.csv");
    let json_path = args.common.out_dir.join("metrics.json");
    report::write_trajectory_csv(&csv_path, &log)?;
    report::write_metrics_json(&json_path, &metrics)?;
    println!(
        "run complete: cost {:.4}, min barrier {:.6}, {} trigger(s)",
        metrics.cost, metrics.min_barrier, metrics.trigger_count
    );
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    check_strict_infeasibility(
        args.common.strict_infeasibility,
        metrics.infeasibility_events,
        &[csv_path, json_path],
    )
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let preset = parse_preset_name(&args.target)
        .ok_or_else(|| Failure::usage(format!("unknown preset '{}'", args.target)))?;
    let base = resolve_config(Some(&args.target), &args.common, None)?;
    let configs: Vec<ExperimentConfig> = match preset {
        Preset::Obstacle | Preset::Custom => [
            Variant::U1BaselineCbf,
            Variant::U2RcbfFilter,
            Variant::U3RcbfEmbedded,
        ]
        .into_iter()
        .map(|v| {
            let mut c = base.clone();
            c.variant = v;
            c
        })
        .collect(),
        Preset::Selftrig => [Mode::TimeTriggered, Mode::SelfTriggered]
            .into_iter()
            .map(|m| {
                let mut c = base.clone();
                c.mode = m;
                c
            })
            .collect(),
    };
    let (labeled, rep) = sim::compare(&configs)?;
    std::fs::create_dir_all(&args.common.out_dir)?;
    let mut wrote = Vec::new();
    let mut total_infeasible = 0usize;
    for (label, log, metrics) in &labeled {
        let path = args.common.out_dir.join(format!("trajectory_{label}.csv"));
        report::write_trajectory_csv(&path, log)?;
        println!(
            "{label}: cost {:.4}, min barrier {:.6}, {} trigger(s)",
            metrics.cost, metrics.min_barrier, metrics.trigger_count
        );
        total_infeasible += metrics.infeasibility_events;
        wrote.push(path);
    }
    let json_path = args.common.out_dir.join("comparison.json");
    report::write_comparison_json(&json_path, &rep)?;
    if let Some(f) = rep.trigger_reduction_factor {
        println!("trigger reduction factor: {f:.1}x");
    }
    for p in &wrote {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", json_path.display());
    wrote.push(json_path);
    check_strict_infeasibility(args.common.strict_infeasibility, total_infeasible, &wrote)
}
