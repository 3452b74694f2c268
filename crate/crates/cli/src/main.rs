//! Experiment driver for the crowdshipping simulation.
//!
//! Three modes: `predict-eval` runs the prequential delay-prediction
//! experiment over trip traces; `simulate` runs one simulation with a
//! scenario preset and strategy; `compare` runs all three strategies over a
//! list of seeds with shared task streams. Running with no flags simulates
//! scenario 1 with the S-BEST strategy on synthetic traces, seed 42.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};

use crowdship_core::experiment::{
    compare_strategies, run_predict_eval, run_simulation, ExperimentSpec, Mode, Scenario,
    TraceSource,
};
use crowdship_core::geo::Location;
use crowdship_core::sim::{SimConfig, Strategy};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// Prequential evaluation of the delay predictor.
    PredictEval,
    /// One simulation run.
    Simulate,
    /// All three strategies across seeds with shared task streams.
    Compare,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Not,
    SBest,
    FBest,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Not => Strategy::NoTransfer,
            StrategyArg::SBest => Strategy::SuggestBest,
            StrategyArg::FBest => Strategy::ForceBest,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "crowdship", version, about)]
struct Args {
    #[arg(long, value_enum, default_value = "simulate")]
    mode: ModeArg,

    /// Scenario preset: 1 (50 tasks/h, 5%), 2 (50/h, 10%), 3 (100/h, 5%),
    /// or custom.
    #[arg(long, default_value = "1")]
    scenario: String,

    #[arg(long, value_enum, default_value = "s-best")]
    strategy: StrategyArg,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Seeds for compare mode (comma separated); defaults to seed..seed+4.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,

    /// Trace source: "synthetic" or one CSV path per simulated day
    /// (repeatable).
    #[arg(long, default_value = "synthetic")]
    traces: Vec<String>,

    /// Replay tasks from a CSV instead of drawing the Poisson process.
    #[arg(long)]
    tasks: Option<PathBuf>,

    #[arg(long, default_value = "out")]
    out: PathBuf,

    #[arg(long, default_value_t = 8_500)]
    couriers_per_day: usize,

    #[arg(long, default_value_t = 2)]
    days: u32,

    // Per-parameter overrides, named after the simulation config fields.
    // Table-backed parameters require --scenario custom.
    #[arg(long)]
    tasks_per_hour: Option<f64>,
    #[arg(long)]
    incident_probability_per_min: Option<f64>,
    #[arg(long)]
    reward: Option<f64>,
    #[arg(long)]
    deadline: Option<f64>,
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    cost_per_km: Option<f64>,
    #[arg(long)]
    waiting_cost_per_min: Option<f64>,
    #[arg(long)]
    default_speed: Option<f64>,
    #[arg(long)]
    incident_speed: Option<f64>,
    #[arg(long)]
    prediction_error: Option<f64>,
    #[arg(long)]
    trigger_threshold: Option<f64>,
    #[arg(long)]
    center_lat: Option<f64>,
    #[arg(long)]
    center_lon: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
}

fn build_spec(args: &Args) -> anyhow::Result<ExperimentSpec> {
    let scenario = match args.scenario.as_str() {
        "1" => Scenario::One,
        "2" => Scenario::Two,
        "3" => Scenario::Three,
        "custom" => Scenario::Custom,
        other => bail!("unknown scenario {other:?}; expected 1, 2, 3, or custom"),
    };

    let table_overrides = [
        args.tasks_per_hour.is_some(),
        args.incident_probability_per_min.is_some(),
        args.reward.is_some(),
        args.deadline.is_some(),
        args.penalty.is_some(),
        args.cost_per_km.is_some(),
        args.waiting_cost_per_min.is_some(),
        args.default_speed.is_some(),
        args.incident_speed.is_some(),
        args.prediction_error.is_some(),
        args.trigger_threshold.is_some(),
        args.radius.is_some(),
    ];
    if scenario != Scenario::Custom && table_overrides.iter().any(|&o| o) {
        bail!("parameter overrides conflict with a preset scenario; use --scenario custom");
    }

    let mut cfg = SimConfig {
        seed: args.seed,
        days: args.days,
        strategy: args.strategy.into(),
        ..SimConfig::default()
    };
    scenario.apply(&mut cfg);
    if let Some(v) = args.tasks_per_hour {
        cfg.tasks_per_hour = v;
    }
    if let Some(v) = args.incident_probability_per_min {
        cfg.incident_probability_per_min = v;
    }
    if let Some(v) = args.reward {
        cfg.reward_eur = v;
    }
    if let Some(v) = args.deadline {
        cfg.deadline_s = v;
    }
    if let Some(v) = args.penalty {
        cfg.penalty_eur = v;
    }
    if let Some(v) = args.cost_per_km {
        cfg.cost_per_km_eur = v;
    }
    if let Some(v) = args.waiting_cost_per_min {
        cfg.waiting_cost_per_min_eur = v;
    }
    if let Some(v) = args.default_speed {
        cfg.default_speed_mps = v;
    }
    if let Some(v) = args.incident_speed {
        cfg.incident_speed_mps = v;
    }
    if let Some(v) = args.prediction_error {
        cfg.prediction_error_s = v;
    }
    if let Some(v) = args.trigger_threshold {
        cfg.trigger_threshold = v;
    }
    if let Some(v) = args.center_lat {
        cfg.center = Location::new(v, cfg.center.lon);
    }
    if let Some(v) = args.center_lon {
        cfg.center = Location::new(cfg.center.lat, v);
    }
    if let Some(v) = args.radius {
        cfg.radius_m = v;
    }

    let traces = if args.traces.len() == 1 && args.traces[0] == "synthetic" {
        TraceSource::Synthetic {
            couriers_per_day: args.couriers_per_day,
        }
    } else {
        TraceSource::Files(args.traces.iter().map(PathBuf::from).collect())
    };

    let mode = match args.mode {
        ModeArg::PredictEval => Mode::PredictEval,
        ModeArg::Simulate | ModeArg::Compare => Mode::Simulate,
    };

    Ok(ExperimentSpec {
        mode,
        // Custom applies nothing further; the presets were already applied
        // and conflicts rejected above.
        scenario: Scenario::Custom,
        config: cfg,
        traces,
        task_file: args.tasks.clone(),
        deadline_range_s: (60.0, 1_800.0),
        out_dir: args.out.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(args: &Args) -> anyhow::Result<()> {
    let spec = build_spec(args)?;
    match args.mode {
        ModeArg::PredictEval => {
            let outcome = run_predict_eval(&spec).context("predict-eval failed")?;
            println!(
                "predict-eval: {} trips evaluated ({} skipped), accuracy {}, precision {}, recall {}",
                outcome.trips_evaluated,
                outcome.trips_skipped,
                fmt_opt(outcome.metrics.accuracy()),
                fmt_opt(outcome.metrics.precision()),
                fmt_opt(outcome.metrics.recall()),
            );
            println!("wrote {}", spec.out_dir.join("prequential.csv").display());
        }
        ModeArg::Simulate => {
            let outcome = run_simulation(&spec).context("simulation failed")?;
            let s = &outcome.summary;
            println!(
                "{}: {} deliveries, delay fraction {}, {} transfers executed ({} attempted), {} expired",
                spec.config.strategy.label(),
                s.completed,
                fmt_opt(s.final_delay_fraction),
                s.transfers_executed,
                s.transfers_attempted,
                s.expired,
            );
            println!("wrote {}", spec.out_dir.join("results.csv").display());
        }
        ModeArg::Compare => {
            let seeds: Vec<u64> = if args.seeds.is_empty() {
                (args.seed..args.seed + 5).collect()
            } else {
                args.seeds.clone()
            };
            let aggregates = compare_strategies(&spec, &seeds).context("comparison failed")?;
            println!("strategy  runs  mean_delay  std_delay  mean_transfers");
            for a in &aggregates {
                println!(
                    "{:<8}  {:>4}  {:>10.4}  {:>9.4}  {:>14.1}",
                    a.strategy.label(),
                    a.runs,
                    a.mean_final_delay_fraction,
                    a.std_final_delay_fraction,
                    a.mean_transfers_executed,
                );
            }
            println!("wrote {}", spec.out_dir.join("comparison.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
