//! Experiment drivers: canned scenario presets, the delay-prediction
//! evaluation, single simulation runs, and multi-seed strategy comparisons,
//! each with deterministic result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::courier::{DeliveryTask, TaskState};
use crate::predictor::{
    build_features, train_on_outcome, HoeffdingTree, Label, PrequentialMetrics, TrainingBuffer,
};
use crate::sim::{SimConfig, SimOutcome, Strategy, World};
use crate::situation::WindowState;
use crate::traces::{self, ScheduledTrip, SynthConfig, TraceError, Trip};
use crate::TaskId;

/// What the run is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Prequential evaluation of the delay predictor on trips with
    /// artificial deadlines.
    PredictEval,
    /// A full crowdshipping simulation run.
    Simulate,
}

/// Table-driven scenario presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// 50 tasks/h, 5% incident probability.
    One,
    /// 50 tasks/h, 10% incident probability.
    Two,
    /// 100 tasks/h, 5% incident probability.
    Three,
    /// Caller-specified parameters.
    Custom,
}

impl Scenario {
    /// Applies the preset demand/incident parameters; `Custom` leaves the
    /// config untouched.
    pub fn apply(self, cfg: &mut SimConfig) {
        match self {
            Scenario::One => {
                cfg.tasks_per_hour = 50.0;
                cfg.incident_probability_per_min = 0.05;
            }
            Scenario::Two => {
                cfg.tasks_per_hour = 50.0;
                cfg.incident_probability_per_min = 0.10;
            }
            Scenario::Three => {
                cfg.tasks_per_hour = 100.0;
                cfg.incident_probability_per_min = 0.05;
            }
            Scenario::Custom => {}
        }
    }
}

/// Where couriers come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceSource {
    /// Generate trips (per day) with the standard synthetic generator.
    Synthetic { couriers_per_day: usize },
    /// One trace file per simulated day.
    Files(Vec<PathBuf>),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic {
            couriers_per_day: 8_500,
        }
    }
}

/// A fully specified experiment.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub scenario: Scenario,
    pub config: SimConfig,
    pub traces: TraceSource,
    /// Replay tasks from a file instead of drawing the Poisson process.
    pub task_file: Option<PathBuf>,
    /// Artificial deadline range for predict-eval, seconds after trip start.
    pub deadline_range_s: (f64, f64),
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Simulate,
            scenario: Scenario::One,
            config: SimConfig::default(),
            traces: TraceSource::default(),
            task_file: None,
            deadline_range_s: (60.0, 1_800.0),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Traces(#[from] TraceError),
    #[error("no trips available for the experiment")]
    EmptyTraces,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Loads or generates the per-day trips and schedules them onto the timeline.
///
/// Courier ids are unique across days; trace randomization draws from its own
/// stream so runs sharing a seed see identical crowds regardless of strategy.
pub fn load_scheduled_trips(spec: &ExperimentSpec) -> Result<Vec<ScheduledTrip>, ExperimentError> {
    let days = spec.config.days;
    let mut rng = stream(spec.config.seed, 16);
    let mut scheduled = Vec::new();
    let mut id_base = 1u64;

    let day_trips: Vec<Vec<Trip>> = match &spec.traces {
        TraceSource::Synthetic { couriers_per_day } => {
            let synth = SynthConfig {
                center: spec.config.center,
                radius_m: spec.config.radius_m,
                start_hour: (spec.config.day_start_s / 3_600.0) as u8,
                end_hour: (spec.config.day_end_s / 3_600.0) as u8,
                ..SynthConfig::default()
            };
            (0..days)
                .map(|_| traces::synth_traces(*couriers_per_day, &synth, &mut rng))
                .collect()
        }
        TraceSource::Files(paths) => {
            let mut parsed = Vec::new();
            for path in paths {
                parsed.push(traces::parse_traces(path)?.trips);
            }
            if parsed.is_empty() {
                return Err(ExperimentError::EmptyTraces);
            }
            // Fewer files than days: cycle through what we have.
            (0..days)
                .map(|d| parsed[d as usize % parsed.len()].clone())
                .collect()
        }
    };

    for (day, trips) in day_trips.iter().enumerate() {
        let epoch = day as f64 * 86_400.0;
        let day_scheduled = traces::schedule_trips(trips, &mut rng, epoch, id_base);
        id_base += trips.len() as u64;
        scheduled.extend(day_scheduled);
    }
    if scheduled.is_empty() {
        return Err(ExperimentError::EmptyTraces);
    }
    Ok(scheduled)
}

/// Cumulative metric curves from a prequential run: one point per counted
/// trip prediction.
#[derive(Clone, Debug, Default)]
pub struct MetricCurves {
    pub points: Vec<MetricPoint>,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricPoint {
    pub completed_trips: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricCurves {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.accuracy)
    }
}

/// Result of the delay-prediction experiment.
pub struct PredictEvalOutcome {
    pub curves: MetricCurves,
    pub metrics: PrequentialMetrics,
    pub tree: HoeffdingTree,
    pub trips_evaluated: u64,
    pub trips_skipped: u64,
}

/// Runs the prequential delay-prediction loop over already-scheduled trips.
///
/// Each trip gets an artificial deadline drawn from `deadline_range_s` after
/// its start; every GPS event but the trip's last contributes a feature
/// vector; at completion the last pre-completion vector is scored against the
/// outcome, the metrics updated, and the tree trained with one random vector
/// from the trip.
pub fn predict_eval_on_trips(
    scheduled: &[ScheduledTrip],
    deadline_range_s: (f64, f64),
    tree_config: crate::predictor::HoeffdingTreeConfig,
    seed: u64,
) -> PredictEvalOutcome {
    let mut deadline_rng = stream(seed, 17);
    let mut training_rng = stream(seed, 18);

    struct TripRun {
        window: WindowState,
        task: DeliveryTask,
        end_time: f64,
        remaining_events: usize,
    }

    let mut runs: std::collections::BTreeMap<crate::CourierId, TripRun> =
        std::collections::BTreeMap::new();
    for trip in scheduled {
        let deadline = trip.start_time
            + if deadline_range_s.1 > deadline_range_s.0 {
                deadline_rng.random_range(deadline_range_s.0..=deadline_range_s.1)
            } else {
                deadline_range_s.0
            };
        runs.insert(
            trip.courier_id,
            TripRun {
                window: WindowState::new(trip.courier_id),
                task: DeliveryTask {
                    id: TaskId(trip.courier_id.0),
                    origin: trip.samples[0].location,
                    destination: trip.samples[trip.samples.len() - 1].location,
                    deadline,
                    reward: 0.0,
                    penalty: 0.0,
                    state: TaskState::Assigned,
                },
                end_time: trip.end_time(),
                remaining_events: trip.samples.len(),
            },
        );
    }

    let events = traces::sorted_events(scheduled);
    let mut tree = HoeffdingTree::new(tree_config);
    let mut buffer = TrainingBuffer::new();
    let mut metrics = PrequentialMetrics::new();
    let mut curves = MetricCurves::default();
    let mut evaluated = 0u64;
    let mut skipped = 0u64;

    for event in &events {
        let Some(run) = runs.get_mut(&event.courier_id) else {
            continue;
        };
        let Ok(sv) = run.window.ingest_event(event) else {
            continue;
        };
        run.remaining_events -= 1;
        let task_id = run.task.id;

        if run.remaining_events > 0 {
            // The rider carries their own "parcel": only the leg to the trip
            // destination remains.
            let features = build_features(&sv, &run.task, sv.location, event.timestamp);
            buffer.record_sample(task_id, features);
        } else {
            // Trip completed: test, then train.
            let actual = if run.end_time < run.task.deadline {
                Label::NoDelay
            } else {
                Label::Delay
            };
            let last = buffer.samples_for(task_id).last().copied();
            if let Some(last) = last {
                let predicted = tree.predict_label(&last);
                metrics.update(predicted, actual);
                let _ = train_on_outcome(&mut tree, &mut buffer, task_id, actual, &mut training_rng);
                evaluated += 1;
                curves.points.push(MetricPoint {
                    completed_trips: evaluated,
                    accuracy: metrics.accuracy(),
                    precision: metrics.precision(),
                    recall: metrics.recall(),
                });
            } else {
                skipped += 1;
            }
            runs.remove(&event.courier_id);
        }
    }

    PredictEvalOutcome {
        curves,
        metrics,
        tree,
        trips_evaluated: evaluated,
        trips_skipped: skipped,
    }
}

/// Runs the delay-prediction experiment per the spec and writes
/// `prequential.csv` and `model_stats.txt` into the output directory.
pub fn run_predict_eval(spec: &ExperimentSpec) -> Result<PredictEvalOutcome, ExperimentError> {
    let scheduled = load_scheduled_trips(spec)?;
    let outcome = predict_eval_on_trips(
        &scheduled,
        spec.deadline_range_s,
        spec.config.tree,
        spec.config.seed,
    );

    fs::create_dir_all(&spec.out_dir)?;
    let mut csv = String::from("completed_trips,accuracy,precision,recall\n");
    for p in &outcome.curves.points {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.completed_trips,
            fmt_opt(p.accuracy),
            fmt_opt(p.precision),
            fmt_opt(p.recall)
        );
    }
    fs::write(spec.out_dir.join("prequential.csv"), csv)?;
    fs::write(
        spec.out_dir.join("model_stats.txt"),
        format!("{}\n", outcome.tree.stats()),
    )?;
    Ok(outcome)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Builds the effective simulation config for a spec, enforcing that preset
/// scenarios are not silently overridden.
pub fn effective_config(spec: &ExperimentSpec) -> Result<SimConfig, ExperimentError> {
    let mut cfg = spec.config;
    if spec.scenario != Scenario::Custom {
        let mut preset = cfg;
        spec.scenario.apply(&mut preset);
        if preset.tasks_per_hour != cfg.tasks_per_hour
            && cfg.tasks_per_hour != SimConfig::default().tasks_per_hour
        {
            return Err(ExperimentError::Usage(
                "tasks-per-hour conflicts with the selected scenario; use --scenario custom"
                    .into(),
            ));
        }
        if preset.incident_probability_per_min != cfg.incident_probability_per_min
            && cfg.incident_probability_per_min
                != SimConfig::default().incident_probability_per_min
        {
            return Err(ExperimentError::Usage(
                "incident-probability conflicts with the selected scenario; use --scenario custom"
                    .into(),
            ));
        }
        cfg = preset;
    }
    Ok(cfg)
}

/// Runs one simulation and writes `results.csv`, `summary.txt`, and
/// `transfers.csv` into the output directory.
pub fn run_simulation(spec: &ExperimentSpec) -> Result<SimOutcome, ExperimentError> {
    let cfg = effective_config(spec)?;
    let outcome = simulate(spec, cfg)?;
    fs::create_dir_all(&spec.out_dir)?;
    write_run_files(&spec.out_dir, &outcome)?;
    Ok(outcome)
}

/// Runs the world for a spec without touching the filesystem.
pub fn simulate(spec: &ExperimentSpec, cfg: SimConfig) -> Result<SimOutcome, ExperimentError> {
    let mut spec_for_traces = spec.clone();
    spec_for_traces.config = cfg;
    let trips = load_scheduled_trips(&spec_for_traces)?;
    let world = match &spec.task_file {
        Some(path) => {
            let planned = traces::parse_tasks(path)?;
            World::with_planned_tasks(cfg, trips, planned)
        }
        None => World::new(cfg, trips),
    };
    Ok(world.run())
}

/// Writes the per-run output files.
pub fn write_run_files(dir: &Path, outcome: &SimOutcome) -> Result<(), ExperimentError> {
    let mut results = String::from(
        "completion_clock,task_id,courier_id,delayed,cumulative_delay_fraction,transfers_so_far\n",
    );
    for r in &outcome.records {
        let _ = writeln!(
            results,
            "{:.3},{},{},{},{:.6},{}",
            r.completion_clock,
            r.task_id,
            r.courier_id,
            u8::from(r.delayed),
            r.cumulative_delay_fraction,
            r.transfers_so_far
        );
    }
    fs::write(dir.join("results.csv"), results)?;

    let mut transfers =
        String::from("timestamp,task_id,deliverer_id,outcome,winner_id,bid,candidates_queried\n");
    for t in &outcome.transfers {
        use crate::negotiation::SessionOutcome;
        let (outcome_label, winner, bid) = match t.outcome {
            SessionOutcome::Transferred { to, bid } => (
                "transferred",
                to.to_string(),
                bid.map_or(String::new(), |b| format!("{b:.4}")),
            ),
            SessionOutcome::NoAgreement => ("no_agreement", String::new(), String::new()),
        };
        let _ = writeln!(
            transfers,
            "{:.3},{},{},{},{},{},{}",
            t.timestamp, t.task_id, t.deliverer_id, outcome_label, winner, bid, t.candidates_queried
        );
    }
    fs::write(dir.join("transfers.csv"), transfers)?;

    fs::write(dir.join("summary.txt"), summary_text(outcome))?;
    Ok(())
}

fn summary_text(outcome: &SimOutcome) -> String {
    let s = &outcome.summary;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "final_delay_fraction: {}",
        fmt_opt(s.final_delay_fraction)
    );
    let _ = writeln!(text, "deliveries_completed: {}", s.completed);
    let _ = writeln!(text, "deliveries_delayed: {}", s.delayed);
    let _ = writeln!(text, "tasks_expired: {}", s.expired);
    let _ = writeln!(text, "tasks_unresolved: {}", s.unresolved);
    let _ = writeln!(text, "transfers_attempted: {}", s.transfers_attempted);
    let _ = writeln!(text, "transfers_executed: {}", s.transfers_executed);
    let _ = writeln!(
        text,
        "prequential_accuracy: {}",
        fmt_opt(s.metrics.accuracy())
    );
    let _ = writeln!(
        text,
        "prequential_precision: {}",
        fmt_opt(s.metrics.precision())
    );
    let _ = writeln!(text, "prequential_recall: {}", fmt_opt(s.metrics.recall()));
    let _ = writeln!(text, "predictions_skipped: {}", s.predictions_skipped);
    let _ = writeln!(text, "total_courier_earnings: {:.4}", s.total_earnings);
    let _ = writeln!(text, "tree_nodes: {}", s.tree.nodes);
    let _ = writeln!(text, "tree_depth: {}", s.tree.depth);
    text
}

/// Per-strategy aggregate of a comparison.
#[derive(Clone, Debug)]
pub struct StrategyAggregate {
    pub strategy: Strategy,
    pub runs: usize,
    pub mean_final_delay_fraction: f64,
    pub std_final_delay_fraction: f64,
    pub mean_transfers_executed: f64,
    pub mean_transfers_attempted: f64,
    pub mean_expired: f64,
    /// Final delay fraction per seed, in seed order.
    pub per_seed_delay: Vec<f64>,
    /// Executed transfers per seed, in seed order.
    pub per_seed_transfers: Vec<u64>,
}

/// Runs all three strategies with identical task and trace streams per seed
/// and writes per-run files plus `comparison.csv`.
pub fn compare_strategies(
    spec: &ExperimentSpec,
    seeds: &[u64],
) -> Result<Vec<StrategyAggregate>, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::Usage("at least one seed required".into()));
    }
    let base_cfg = effective_config(spec)?;
    let mut aggregates = Vec::new();

    for strategy in [
        Strategy::NoTransfer,
        Strategy::SuggestBest,
        Strategy::ForceBest,
    ] {
        let mut delays = Vec::new();
        let mut transfers = Vec::new();
        let mut attempted = Vec::new();
        let mut expired = Vec::new();
        for &seed in seeds {
            let mut cfg = base_cfg;
            cfg.seed = seed;
            cfg.strategy = strategy;
            let outcome = simulate(spec, cfg)?;
            let run_dir = spec
                .out_dir
                .join(format!("{}_seed{}", strategy.label().to_lowercase(), seed));
            fs::create_dir_all(&run_dir)?;
            write_run_files(&run_dir, &outcome)?;
            delays.push(outcome.summary.final_delay_fraction.unwrap_or(0.0));
            transfers.push(outcome.summary.transfers_executed);
            attempted.push(outcome.summary.transfers_attempted);
            expired.push(outcome.summary.expired);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m = mean(&delays);
        let var = delays.iter().map(|d| (d - m).powi(2)).sum::<f64>() / delays.len() as f64;
        aggregates.push(StrategyAggregate {
            strategy,
            runs: seeds.len(),
            mean_final_delay_fraction: m,
            std_final_delay_fraction: var.sqrt(),
            mean_transfers_executed: mean(
                &transfers.iter().map(|&t| t as f64).collect::<Vec<_>>(),
            ),
            mean_transfers_attempted: mean(
                &attempted.iter().map(|&t| t as f64).collect::<Vec<_>>(),
            ),
            mean_expired: mean(&expired.iter().map(|&t| t as f64).collect::<Vec<_>>()),
            per_seed_delay: delays,
            per_seed_transfers: transfers,
        });
    }

    fs::create_dir_all(&spec.out_dir)?;
    let mut csv = String::from(
        "strategy,runs,mean_final_delay_fraction,std_final_delay_fraction,mean_transfers_executed,mean_transfers_attempted,mean_expired\n",
    );
    for a in &aggregates {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.2},{:.2},{:.2}",
            a.strategy.label(),
            a.runs,
            a.mean_final_delay_fraction,
            a.std_final_delay_fraction,
            a.mean_transfers_executed,
            a.mean_transfers_attempted,
            a.mean_expired
        );
    }
    fs::write(spec.out_dir.join("comparison.csv"), csv)?;
    Ok(aggregates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::HoeffdingTreeConfig;
    use crate::traces::TraceSample;
    use crate::geo::Location;

    /// Straight-line trips of fixed length at varying speeds: with a fixed
    /// deadline the outcome is exactly a speed threshold.
    fn fixed_length_trips(count: usize, seed: u64) -> Vec<ScheduledTrip> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scheduled = Vec::new();
        for i in 0..count {
            let speed: f64 = rng.random_range(2.5..6.5);
            let length = 3_000.0;
            let duration = length / speed;
            let lat0 = 40.0 + (i % 100) as f64 * 1e-4;
            let mut samples = Vec::new();
            let mut t = 0.0;
            while t < duration {
                let frac = t / duration;
                samples.push(TraceSample {
                    offset_s: t,
                    location: Location::new(lat0 + frac * (length / 111_000.0), -3.0),
                    speed,
                });
                t += 60.0;
            }
            samples.push(TraceSample {
                offset_s: duration,
                location: Location::new(lat0 + length / 111_000.0, -3.0),
                speed,
            });
            scheduled.push(ScheduledTrip {
                courier_id: crate::CourierId(i as u64 + 1),
                trip_id: format!("fx-{i}"),
                start_time: 28_800.0 + (i as f64) * 7.0,
                samples,
            });
        }
        scheduled
    }

    #[test]
    fn separable_outcomes_are_learned() {
        // Deadline fixed at 900 s: late iff 3000/v > 900, i.e. v < 3.33 m/s.
        let trips = fixed_length_trips(3_000, 5);
        let outcome =
            predict_eval_on_trips(&trips, (900.0, 900.0), HoeffdingTreeConfig::default(), 42);
        assert!(outcome.trips_evaluated > 2_900);
        let acc = outcome.curves.final_accuracy().unwrap();
        assert!(acc > 0.9, "accuracy {acc}");
        // Curves are cumulative and bounded.
        for p in &outcome.curves.points {
            for v in [p.accuracy, p.precision, p.recall].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn deadlines_fall_in_the_configured_range() {
        let trips = fixed_length_trips(50, 6);
        // Indirect check: with a deadline range far beyond any trip duration
        // every outcome is on time, so accuracy converges to 1 quickly.
        let outcome = predict_eval_on_trips(
            &trips,
            (10_000.0, 20_000.0),
            HoeffdingTreeConfig::default(),
            1,
        );
        assert_eq!(outcome.metrics.tp + outcome.metrics.fp, 0);
        assert_eq!(outcome.metrics.tn + outcome.metrics.fn_, outcome.trips_evaluated);
    }

    #[test]
    fn scenario_presets_match_the_table() {
        let mut cfg = SimConfig::default();
        Scenario::One.apply(&mut cfg);
        assert_eq!(
            (cfg.tasks_per_hour, cfg.incident_probability_per_min),
            (50.0, 0.05)
        );
        Scenario::Two.apply(&mut cfg);
        assert_eq!(
            (cfg.tasks_per_hour, cfg.incident_probability_per_min),
            (50.0, 0.10)
        );
        Scenario::Three.apply(&mut cfg);
        assert_eq!(
            (cfg.tasks_per_hour, cfg.incident_probability_per_min),
            (100.0, 0.05)
        );
    }

    #[test]
    fn preset_conflicts_are_usage_errors() {
        let mut spec = ExperimentSpec {
            scenario: Scenario::Two,
            ..ExperimentSpec::default()
        };
        spec.config.tasks_per_hour = 80.0;
        assert!(matches!(
            effective_config(&spec),
            Err(ExperimentError::Usage(_))
        ));
        spec.config.tasks_per_hour = SimConfig::default().tasks_per_hour;
        assert!(effective_config(&spec).is_ok());

        spec.scenario = Scenario::Custom;
        spec.config.tasks_per_hour = 80.0;
        let cfg = effective_config(&spec).unwrap();
        assert_eq!(cfg.tasks_per_hour, 80.0);
    }

    #[test]
    fn predict_eval_writes_metric_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            mode: Mode::PredictEval,
            traces: TraceSource::Synthetic {
                couriers_per_day: 120,
            },
            out_dir: dir.path().to_path_buf(),
            config: SimConfig {
                days: 1,
                ..SimConfig::default()
            },
            ..ExperimentSpec::default()
        };
        let outcome = run_predict_eval(&spec).unwrap();
        assert!(outcome.trips_evaluated > 0);
        let csv = fs::read_to_string(dir.path().join("prequential.csv")).unwrap();
        assert!(csv.lines().count() > 1);
        assert!(dir.path().join("model_stats.txt").exists());
    }
}
