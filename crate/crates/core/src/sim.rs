//! Deterministic fixed-step crowdshipping world.
//!
//! Couriers appear and move according to scheduled trips; tasks arrive as a
//! Poisson process over the daily operating window (or from an explicit
//! plan); assignment goes to the nearest willing courier; engaged couriers
//! suffer per-minute incidents that slow them to a crawl; and, depending on
//! the strategy, endangered deliveries are transferred to more promising
//! couriers via negotiation or by force.
//!
//! Each one-second step processes, in a fixed order: movement (with exact
//! sub-step arrival times), delivery settlement, incident trials, spawns, GPS
//! emission / situation updates / transfer sessions, and assignment of
//! pending tasks. All randomness is drawn from named ChaCha streams derived
//! from the run seed, so identical configurations reproduce byte-identical
//! outputs, and the task stream is shared across strategy arms for
//! common-random-numbers comparisons.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::courier::{self, CourierState, DeliveryTask, TaskState};
use crate::geo::{self, Location};
use crate::negotiation::{
    force_transfer, rank_candidates, CourierDecisions, GlobalRegistry, Role, SessionOutcome,
    TransferRecord, TransferRequest, TransferSession, TriggerState,
};
use crate::predictor::{
    build_features, train_on_outcome, HoeffdingTree, HoeffdingTreeConfig, Label,
    PrequentialMetrics, TrainingBuffer, TreeStats,
};
use crate::situation::{significant_change, GpsEvent, SituationVector, WindowState};
use crate::traces::{PlannedTask, ScheduledTrip};
use crate::{CourierId, TaskId};

/// Transfer strategy under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// No transfers ever happen.
    NoTransfer,
    /// Consensual transfers via bids and deliverer acceptance.
    SuggestBest,
    /// The top-ranked candidate is forced to take over.
    ForceBest,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::NoTransfer => "NOT",
            Strategy::SuggestBest => "S-BEST",
            Strategy::ForceBest => "F-BEST",
        }
    }
}

/// Simulation parameters. Defaults reproduce the scenario-1 setup.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub center: Location,
    pub radius_m: f64,
    pub reward_eur: f64,
    pub deadline_s: f64,
    pub penalty_eur: f64,
    pub cost_per_km_eur: f64,
    pub waiting_cost_per_min_eur: f64,
    pub default_speed_mps: f64,
    pub incident_speed_mps: f64,
    /// Half-width of the couriers' arrival-estimate error, in seconds.
    pub prediction_error_s: f64,
    pub trigger_threshold: f64,
    pub tasks_per_hour: f64,
    pub incident_probability_per_min: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub days: u32,
    /// Operating window within each day, seconds from midnight.
    pub day_start_s: f64,
    pub day_end_s: f64,
    pub step_s: f64,
    pub tree: HoeffdingTreeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            center: Location::new(40.4168, -3.7038),
            radius_m: 1_500.0,
            reward_eur: 7.0,
            deadline_s: 1_800.0,
            penalty_eur: 7.0,
            cost_per_km_eur: 3.0,
            waiting_cost_per_min_eur: 0.5,
            default_speed_mps: 5.0,
            incident_speed_mps: 0.3,
            prediction_error_s: 900.0,
            trigger_threshold: 0.8,
            tasks_per_hour: 50.0,
            incident_probability_per_min: 0.05,
            strategy: Strategy::SuggestBest,
            seed: 42,
            days: 2,
            day_start_s: 8.0 * 3_600.0,
            day_end_s: 20.0 * 3_600.0,
            step_s: 1.0,
            tree: HoeffdingTreeConfig::default(),
        }
    }
}

/// GPS cadence for couriers that are not trace-driven (engaged, homeward, or
/// waiting for a handover); also the feature-sampling interval.
pub const EMIT_INTERVAL_S: f64 = 60.0;

/// Named random streams derived from the run seed. Tasks and traces are
/// drawn before the run starts, so strategy arms sharing a seed see the same
/// demand; the remaining streams are consumed as the run unfolds.
struct RngStreams {
    incidents: ChaCha8Rng,
    noise: ChaCha8Rng,
    training: ChaCha8Rng,
}

impl RngStreams {
    fn new(seed: u64) -> Self {
        Self {
            incidents: stream(seed, 1),
            noise: stream(seed, 2),
            training: stream(seed, 3),
        }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the task arrivals for a whole run: a Poisson process at
/// `tasks_per_hour` over the concatenated daily operating windows, with
/// origins and destinations uniform over the operating disk.
pub fn plan_task_arrivals(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<PlannedTask> {
    let window_s = cfg.day_end_s - cfg.day_start_s;
    let total_active_s = window_s * f64::from(cfg.days);
    let rate_per_s = cfg.tasks_per_hour / 3_600.0;
    if rate_per_s <= 0.0 || total_active_s <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(rate_per_s).expect("positive rate");

    let mut tasks = Vec::new();
    let mut active_t = 0.0;
    loop {
        active_t += exp.sample(rng);
        if active_t >= total_active_s {
            break;
        }
        let day = (active_t / window_s).floor();
        let within = active_t - day * window_s;
        let spawn_s = day * 86_400.0 + cfg.day_start_s + within;
        let origin = geo::uniform_point_in_disk(cfg.center, cfg.radius_m, rng);
        let destination = geo::uniform_point_in_disk(cfg.center, cfg.radius_m, rng);
        tasks.push(PlannedTask {
            spawn_s,
            origin,
            destination,
        });
    }
    tasks
}

#[derive(Clone, Debug, PartialEq)]
enum Mode {
    /// Following the recorded trip.
    Trace,
    /// Moving through waypoints at `current_speed`.
    Route {
        waypoints: Vec<(Location, WaypointKind)>,
        next: usize,
    },
    /// Holding position until a substitute picks the parcel up.
    Waiting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WaypointKind {
    /// Task origin or a handover point.
    Pickup,
    /// Task destination.
    Deliver,
    /// The courier's personal destination.
    Home,
}

struct Courier {
    id: CourierId,
    samples: Vec<crate::traces::TraceSample>,
    start_time: f64,
    end_time: f64,
    personal_destination: Location,
    /// Trace samples already consumed by the situation window.
    cursor: usize,
    mode: Mode,
    /// Position while in `Route`/`Waiting` mode; trace positions are
    /// interpolated on demand.
    loc: Location,
    current_speed: f64,
    assigned_task: Option<TaskId>,
    engagement_start: Option<f64>,
    incident_minutes_checked: u64,
    incident_active: bool,
    window: WindowState,
    last_forwarded: Option<SituationVector>,
    next_emit: f64,
    earnings: f64,
    active: bool,
}

impl Courier {
    fn from_trip(trip: &ScheduledTrip) -> Self {
        let first = trip.samples[0];
        let last = trip.samples[trip.samples.len() - 1];
        Self {
            id: trip.courier_id,
            samples: trip.samples.clone(),
            start_time: trip.start_time,
            end_time: trip.end_time(),
            personal_destination: last.location,
            cursor: 0,
            mode: Mode::Trace,
            loc: first.location,
            current_speed: first.speed,
            assigned_task: None,
            engagement_start: None,
            incident_minutes_checked: 0,
            incident_active: false,
            window: WindowState::new(trip.courier_id),
            last_forwarded: None,
            next_emit: f64::INFINITY,
            earnings: 0.0,
            active: true,
        }
    }

    fn position(&self, clock: f64) -> Location {
        match &self.mode {
            Mode::Route { .. } | Mode::Waiting => self.loc,
            Mode::Trace => self.trace_position(clock),
        }
    }

    fn trace_position(&self, clock: f64) -> Location {
        let rel = clock - self.start_time;
        if rel <= 0.0 {
            return self.samples[0].location;
        }
        let idx = self.samples.partition_point(|s| s.offset_s <= rel);
        if idx == 0 {
            return self.samples[0].location;
        }
        if idx >= self.samples.len() {
            return self.samples[self.samples.len() - 1].location;
        }
        let a = self.samples[idx - 1];
        let b = self.samples[idx];
        let f = (rel - a.offset_s) / (b.offset_s - a.offset_s);
        geo::interpolate(a.location, b.location, f)
    }

    fn trace_remaining(&self, clock: f64) -> bool {
        clock < self.end_time
    }

    /// Open for a new assignment: active, task-free, and either still on its
    /// trace or heading home after a delivery.
    fn available_for_assignment(&self, clock: f64) -> bool {
        if !self.active || self.assigned_task.is_some() {
            return false;
        }
        match self.mode {
            Mode::Trace => self.trace_remaining(clock),
            Mode::Route { .. } => true,
            Mode::Waiting => false,
        }
    }

    fn registry_role(&self) -> Role {
        if self.assigned_task.is_some() || self.mode == Mode::Waiting {
            Role::Deliverer
        } else {
            Role::Available
        }
    }

    fn state_view(&self, cfg: &SimConfig, clock: f64) -> CourierState {
        CourierState {
            id: self.id,
            location: self.position(clock),
            personal_destination: self.personal_destination,
            current_speed: self.current_speed,
            cost_per_km: cfg.cost_per_km_eur,
            waiting_cost_per_min: cfg.waiting_cost_per_min_eur,
            error_bound_s: cfg.prediction_error_s,
            assigned_task: self.assigned_task,
            picked_up: false, // refined by callers that know the task state
            incident_active: self.incident_active,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Handover {
    holder: CourierId,
    point: Location,
    since: f64,
}

struct TaskRuntime {
    id: TaskId,
    origin: Location,
    destination: Location,
    deadline: f64,
    state: TaskState,
    assigned_to: Option<CourierId>,
    accepted_at: f64,
    engagement_detour_m: f64,
    handover: Option<Handover>,
}

impl TaskRuntime {
    fn view(&self, cfg: &SimConfig) -> DeliveryTask {
        DeliveryTask {
            id: self.id,
            origin: self.origin,
            destination: self.destination,
            deadline: self.deadline,
            reward: cfg.reward_eur,
            penalty: cfg.penalty_eur,
            state: self.state,
        }
    }
}

/// One row of the per-delivery results.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeliveryRecord {
    pub completion_clock: f64,
    pub task_id: TaskId,
    pub courier_id: CourierId,
    pub delayed: bool,
    pub cumulative_delay_fraction: f64,
    pub transfers_so_far: u64,
}

/// Aggregate counters and final metrics of a run.
#[derive(Clone, Debug)]
pub struct SimSummary {
    pub completed: u64,
    pub delayed: u64,
    pub final_delay_fraction: Option<f64>,
    pub expired: u64,
    pub unresolved: u64,
    pub transfers_attempted: u64,
    pub transfers_executed: u64,
    pub metrics: PrequentialMetrics,
    pub tree: TreeStats,
    pub total_earnings: f64,
    /// Completed deliveries that produced no feature vectors (too short to
    /// sample) and therefore no counted prediction.
    pub predictions_skipped: u64,
}

/// Everything a run produces.
pub struct SimOutcome {
    pub records: Vec<DeliveryRecord>,
    pub transfers: Vec<TransferRecord>,
    /// Cumulative delayed fraction per completion, in completion order.
    pub timeline: Vec<(u64, f64)>,
    pub summary: SimSummary,
    /// The planned task arrivals the run consumed (for stream audits).
    pub planned_tasks: Vec<PlannedTask>,
}

enum MoveEvent {
    PickedUp {
        task: TaskId,
        arrival: f64,
    },
    Delivered {
        task: TaskId,
        courier: CourierId,
        arrival: f64,
    },
}

impl MoveEvent {
    fn arrival(&self) -> f64 {
        match self {
            MoveEvent::PickedUp { arrival, .. } | MoveEvent::Delivered { arrival, .. } => *arrival,
        }
    }

    fn task_id(&self) -> TaskId {
        match self {
            MoveEvent::PickedUp { task, .. } | MoveEvent::Delivered { task, .. } => *task,
        }
    }
}

struct TriggerFiring {
    task: TaskId,
    deliverer: CourierId,
    sigma: f64,
    now: f64,
}

pub struct World {
    cfg: SimConfig,
    clock: f64,
    started: bool,
    pending_trips: VecDeque<ScheduledTrip>,
    couriers: BTreeMap<CourierId, Courier>,
    pending_tasks: VecDeque<PlannedTask>,
    planned_tasks: Vec<PlannedTask>,
    tasks: BTreeMap<TaskId, TaskRuntime>,
    open_tasks: Vec<TaskId>,
    next_task_id: u64,
    registry: GlobalRegistry,
    trigger: TriggerState,
    tree: HoeffdingTree,
    buffer: TrainingBuffer,
    metrics: PrequentialMetrics,
    rngs: RngStreams,
    records: Vec<DeliveryRecord>,
    transfers_log: Vec<TransferRecord>,
    timeline: Vec<(u64, f64)>,
    completed: u64,
    delayed: u64,
    expired: u64,
    transfers_attempted: u64,
    transfers_executed: u64,
    predictions_skipped: u64,
    settled_earnings: f64,
    hard_cap: f64,
}

impl World {
    /// Builds a world whose task demand is drawn from the configured Poisson
    /// process.
    pub fn new(cfg: SimConfig, trips: Vec<ScheduledTrip>) -> Self {
        let mut task_rng = stream(cfg.seed, 0);
        let planned = plan_task_arrivals(&cfg, &mut task_rng);
        Self::with_planned_tasks(cfg, trips, planned)
    }

    /// Builds a world that replays an explicit task plan.
    pub fn with_planned_tasks(
        cfg: SimConfig,
        mut trips: Vec<ScheduledTrip>,
        planned: Vec<PlannedTask>,
    ) -> Self {
        trips.sort_by(|a, b| {
            a.start_time
                .total_cmp(&b.start_time)
                .then(a.courier_id.cmp(&b.courier_id))
        });
        let mut pending_tasks: Vec<PlannedTask> = planned.clone();
        pending_tasks.sort_by(|a, b| a.spawn_s.total_cmp(&b.spawn_s));

        let first_trip = trips.first().map(|t| t.start_time);
        let first_task = pending_tasks.first().map(|t| t.spawn_s);
        let start = match (first_trip, first_task) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => cfg.day_start_s,
        }
        .floor();

        let last_window_end = (f64::from(cfg.days) - 1.0) * 86_400.0 + cfg.day_end_s;
        let hard_cap = last_window_end + 12.0 * 3_600.0;

        Self {
            clock: start,
            started: false,
            pending_trips: trips.into(),
            couriers: BTreeMap::new(),
            pending_tasks: pending_tasks.into(),
            planned_tasks: planned,
            tasks: BTreeMap::new(),
            open_tasks: Vec::new(),
            next_task_id: 1,
            registry: GlobalRegistry::new(),
            trigger: TriggerState::new(),
            tree: HoeffdingTree::new(cfg.tree),
            buffer: TrainingBuffer::new(),
            metrics: PrequentialMetrics::new(),
            rngs: RngStreams::new(cfg.seed),
            records: Vec::new(),
            transfers_log: Vec::new(),
            timeline: Vec::new(),
            completed: 0,
            delayed: 0,
            expired: 0,
            transfers_attempted: 0,
            transfers_executed: 0,
            predictions_skipped: 0,
            settled_earnings: 0.0,
            hard_cap,
            cfg,
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Active (task, deliverer) pairs, for invariant checks.
    pub fn deliverer_assignments(&self) -> Vec<(TaskId, CourierId)> {
        self.tasks
            .values()
            .filter(|t| !t.state.is_terminal())
            .filter_map(|t| t.assigned_to.map(|c| (t.id, c)))
            .collect()
    }

    /// Tasks currently in a non-terminal state.
    pub fn open_task_count(&self) -> usize {
        self.open_tasks.len()
    }

    pub fn active_courier_count(&self) -> usize {
        self.couriers.len()
    }

    pub fn run(self) -> SimOutcome {
        self.run_with_observer(|_| {})
    }

    /// Runs to completion, calling `observe` after every step.
    pub fn run_with_observer(mut self, mut observe: impl FnMut(&World)) -> SimOutcome {
        while !self.finished() {
            self.step();
            observe(&self);
        }
        self.finalize()
    }

    fn finished(&self) -> bool {
        if self.clock > self.hard_cap {
            return true;
        }
        self.pending_tasks.is_empty() && self.open_tasks.is_empty()
    }

    fn step(&mut self) {
        if self.started {
            self.clock += self.cfg.step_s;
        } else {
            self.started = true;
        }
        let move_events = self.advance_movement();
        self.settle(move_events);
        self.run_incident_trials();
        self.spawn_due();
        let firings = self.situation_pass();
        self.session_pass(firings);
        self.assignment_pass();
    }

    // ---- movement ----------------------------------------------------

    fn advance_movement(&mut self) -> Vec<MoveEvent> {
        let clock = self.clock;
        let dt = self.cfg.step_s;
        let mut events = Vec::new();
        let mut retired = Vec::new();

        let mut couriers = std::mem::take(&mut self.couriers);
        for courier in couriers.values_mut() {
            match &mut courier.mode {
                Mode::Waiting => {}
                Mode::Trace => {
                    if !courier.trace_remaining(clock) && courier.assigned_task.is_none() {
                        courier.active = false;
                        retired.push(courier.id);
                    }
                }
                Mode::Route { waypoints, next } => {
                    let speed = courier.current_speed;
                    let mut budget = speed * dt;
                    let mut traveled = 0.0;
                    while budget > 0.0 && *next < waypoints.len() {
                        let (target, kind) = waypoints[*next];
                        let dist = geo::distance(courier.loc, target);
                        if dist <= budget {
                            courier.loc = target;
                            budget -= dist;
                            traveled += dist;
                            *next += 1;
                            let arrival = if speed > 0.0 {
                                clock - dt + traveled / speed
                            } else {
                                clock
                            };
                            match kind {
                                WaypointKind::Pickup => {
                                    if let Some(task) = courier.assigned_task {
                                        events.push(MoveEvent::PickedUp { task, arrival });
                                    }
                                }
                                WaypointKind::Deliver => {
                                    if let Some(task) = courier.assigned_task {
                                        events.push(MoveEvent::Delivered {
                                            task,
                                            courier: courier.id,
                                            arrival,
                                        });
                                    }
                                }
                                WaypointKind::Home => {}
                            }
                        } else {
                            let (pos, _) = geo::move_toward(courier.loc, target, budget);
                            courier.loc = pos;
                            traveled += budget;
                            budget = 0.0;
                        }
                    }
                    if *next >= waypoints.len() && courier.assigned_task.is_none() {
                        // Reached home with nothing left to do.
                        if courier.trace_remaining(clock) {
                            courier.mode = Mode::Trace;
                        } else {
                            courier.active = false;
                            retired.push(courier.id);
                        }
                    }
                }
            }
        }
        self.couriers = couriers;

        for id in retired {
            if let Some(c) = self.couriers.remove(&id) {
                self.settled_earnings += c.earnings;
            }
            self.registry.remove(id);
        }
        events
    }

    // ---- settlement ---------------------------------------------------

    fn settle(&mut self, mut events: Vec<MoveEvent>) {
        events.sort_by(|a, b| {
            a.arrival()
                .total_cmp(&b.arrival())
                .then(a.task_id().cmp(&b.task_id()))
        });
        for event in events {
            match event {
                MoveEvent::PickedUp { task, arrival } => self.settle_pickup(task, arrival),
                MoveEvent::Delivered {
                    task,
                    courier,
                    arrival,
                } => self.settle_delivery(task, courier, arrival),
            }
        }
    }

    fn settle_pickup(&mut self, task_id: TaskId, arrival: f64) {
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        if task.state != TaskState::Assigned {
            return;
        }
        task.state = TaskState::PickedUp;
        if let Some(handover) = task.handover.take() {
            let wait = (arrival - handover.since).max(0.0);
            let holder_cost = self.cfg.waiting_cost_per_min_eur * wait / 60.0;
            if let Some(holder) = self.couriers.get_mut(&handover.holder) {
                holder.earnings -= holder_cost;
            }
            self.release_courier(handover.holder);
            self.emit_state_change(handover.holder);
        }
    }

    fn settle_delivery(&mut self, task_id: TaskId, courier_id: CourierId, arrival: f64) {
        let cfg = self.cfg;
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        let on_time = arrival < task.deadline;
        task.state = if on_time {
            TaskState::DeliveredOnTime
        } else {
            TaskState::DeliveredLate
        };
        let detour_m = task.engagement_detour_m;
        self.open_tasks.retain(|t| *t != task_id);
        self.trigger.clear_task(task_id);

        self.completed += 1;
        if !on_time {
            self.delayed += 1;
        }
        let fraction = self.delayed as f64 / self.completed as f64;
        self.timeline.push((self.completed, fraction));
        self.records.push(DeliveryRecord {
            completion_clock: arrival,
            task_id,
            courier_id,
            delayed: !on_time,
            cumulative_delay_fraction: fraction,
            transfers_so_far: self.transfers_executed,
        });

        // Test-then-train on the vectors sampled during the engagement.
        let actual = if on_time { Label::NoDelay } else { Label::Delay };
        let last = self.buffer.samples_for(task_id).last().copied();
        if let Some(last) = last {
            let predicted = self.tree.predict_label(&last);
            self.metrics.update(predicted, actual);
            let _ = train_on_outcome(
                &mut self.tree,
                &mut self.buffer,
                task_id,
                actual,
                &mut self.rngs.training,
            );
        } else {
            self.predictions_skipped += 1;
        }

        if let Some(courier) = self.couriers.get_mut(&courier_id) {
            courier.earnings += if on_time {
                cfg.reward_eur
            } else {
                -cfg.penalty_eur
            };
            courier.earnings -= cfg.cost_per_km_eur * detour_m / 1_000.0;
            courier.assigned_task = None;
            courier.engagement_start = None;
            self.registry.set_role(courier_id, Role::Available);
        }
    }

    // ---- incidents ----------------------------------------------------

    fn run_incident_trials(&mut self) {
        let p = self.cfg.incident_probability_per_min;
        let clock = self.clock;
        let incident_speed = self.cfg.incident_speed_mps;
        for courier in self.couriers.values_mut() {
            if courier.assigned_task.is_none() || courier.incident_active {
                continue;
            }
            let Some(start) = courier.engagement_start else {
                continue;
            };
            let minutes = ((clock - start) / 60.0).floor().max(0.0) as u64;
            while courier.incident_minutes_checked < minutes {
                courier.incident_minutes_checked += 1;
                if self.rngs.incidents.random::<f64>() < p {
                    courier.incident_active = true;
                    courier.current_speed = incident_speed;
                    break;
                }
            }
        }
    }

    // ---- spawning -----------------------------------------------------

    fn spawn_due(&mut self) {
        while self
            .pending_tasks
            .front()
            .is_some_and(|t| t.spawn_s <= self.clock)
        {
            let planned = self.pending_tasks.pop_front().unwrap();
            let id = TaskId(self.next_task_id);
            self.next_task_id += 1;
            self.tasks.insert(
                id,
                TaskRuntime {
                    id,
                    origin: planned.origin,
                    destination: planned.destination,
                    deadline: planned.spawn_s + self.cfg.deadline_s,
                    state: TaskState::Unassigned,
                    assigned_to: None,
                    accepted_at: 0.0,
                    engagement_detour_m: 0.0,
                    handover: None,
                },
            );
            self.open_tasks.push(id);
        }

        while self
            .pending_trips
            .front()
            .is_some_and(|t| t.start_time <= self.clock)
        {
            let trip = self.pending_trips.pop_front().unwrap();
            if trip.samples.is_empty() {
                continue;
            }
            self.couriers
                .insert(trip.courier_id, Courier::from_trip(&trip));
        }
    }

    // ---- situation stream ----------------------------------------------

    fn situation_pass(&mut self) -> Vec<TriggerFiring> {
        let clock = self.clock;
        let cfg = self.cfg;
        let mut firings = Vec::new();

        let mut couriers = std::mem::take(&mut self.couriers);
        for courier in couriers.values_mut() {
            if !courier.active {
                continue;
            }
            // Collect the GPS events due this step.
            let mut due: Vec<GpsEvent> = Vec::new();
            match courier.mode {
                Mode::Trace => {
                    while courier.cursor < courier.samples.len() {
                        let s = courier.samples[courier.cursor];
                        let ts = courier.start_time + s.offset_s;
                        if ts > clock {
                            break;
                        }
                        courier.cursor += 1;
                        courier.current_speed = s.speed;
                        due.push(GpsEvent {
                            courier_id: courier.id,
                            timestamp: ts,
                            location: s.location,
                            speed: s.speed,
                        });
                    }
                }
                Mode::Route { .. } | Mode::Waiting => {
                    // Keep the trace cursor moving so a later resume starts
                    // from the right segment.
                    while courier.cursor < courier.samples.len()
                        && courier.start_time + courier.samples[courier.cursor].offset_s <= clock
                    {
                        courier.cursor += 1;
                    }
                    if clock >= courier.next_emit {
                        courier.next_emit = clock + EMIT_INTERVAL_S;
                        due.push(GpsEvent {
                            courier_id: courier.id,
                            timestamp: clock,
                            location: courier.loc,
                            speed: courier.current_speed,
                        });
                    }
                }
            }

            for event in due {
                let Ok(sv) = courier.window.ingest_event(&event) else {
                    continue;
                };
                let forward = match &courier.last_forwarded {
                    None => true,
                    Some(prev) => significant_change(prev, &sv),
                };
                if forward {
                    courier.last_forwarded = Some(sv);
                    self.registry.update(sv, courier.registry_role());
                }

                if let Some(task_id) = courier.assigned_task {
                    let Some(task) = self.tasks.get(&task_id) else {
                        continue;
                    };
                    let pickup = match (&task.handover, task.state) {
                        (Some(h), _) => h.point,
                        (None, TaskState::PickedUp) => sv.location,
                        _ => task.origin,
                    };
                    let features = build_features(&sv, &task.view(&cfg), pickup, event.timestamp);
                    if event.timestamp >= task.accepted_at + EMIT_INTERVAL_S {
                        self.buffer.record_sample(task_id, features);
                    }
                    if cfg.strategy != Strategy::NoTransfer {
                        let sigma = self.tree.predict_on_time(&features);
                        if self.trigger.should_trigger(
                            task_id,
                            sigma,
                            cfg.trigger_threshold,
                            event.timestamp,
                        ) {
                            firings.push(TriggerFiring {
                                task: task_id,
                                deliverer: courier.id,
                                sigma,
                                now: event.timestamp,
                            });
                        }
                    }
                }
            }
        }
        self.couriers = couriers;
        firings
    }

    // ---- transfer sessions ----------------------------------------------

    fn session_pass(&mut self, firings: Vec<TriggerFiring>) {
        for firing in firings {
            // The firing may have been invalidated by an earlier session in
            // the same step.
            let still_valid = self
                .tasks
                .get(&firing.task)
                .is_some_and(|t| !t.state.is_terminal() && t.assigned_to == Some(firing.deliverer));
            if !still_valid {
                continue;
            }
            self.trigger.record_attempt(firing.task, firing.now);
            self.transfers_attempted += 1;
            self.run_session(firing);
        }
    }

    fn run_session(&mut self, firing: TriggerFiring) {
        let cfg = self.cfg;
        let task = &self.tasks[&firing.task];
        let task_view = task.view(&cfg);
        let pickup = self.parcel_point(firing.task);
        let deliverer_loc = self.couriers[&firing.deliverer].position(self.clock);

        let ranking = rank_candidates(
            &self.registry,
            &self.tree,
            &task_view,
            pickup,
            firing.sigma,
            firing.now,
        );

        let request = TransferRequest {
            task_id: firing.task,
            deliverer_id: firing.deliverer,
            sigma_deliverer: firing.sigma,
            timestamp: firing.now,
        };

        let (outcome, queried, checks) = match cfg.strategy {
            Strategy::NoTransfer => return,
            Strategy::ForceBest => (force_transfer(&ranking), 0, 0),
            Strategy::SuggestBest => {
                let mut candidate_states = BTreeMap::new();
                for (id, _) in ranking.entries() {
                    if let Some(c) = self.couriers.get(id) {
                        candidate_states.insert(*id, c.state_view(&cfg, self.clock));
                    }
                }
                let deliverer = &self.couriers[&firing.deliverer];
                let mut deliverer_state = deliverer.state_view(&cfg, self.clock);
                deliverer_state.picked_up =
                    self.tasks[&firing.task].state == TaskState::PickedUp;

                let mut session = TransferSession::new(request, ranking.clone());
                let mut decisions = SimDecisions {
                    task: task_view,
                    pickup,
                    now: firing.now,
                    candidates: candidate_states,
                    deliverer: deliverer_state,
                    rng: &mut self.rngs.noise,
                };
                match session.negotiate(&self.registry, deliverer_loc, &mut decisions) {
                    Ok(outcome) => (
                        outcome,
                        session.candidates_queried(),
                        session.acceptance_checks,
                    ),
                    Err(_) => return,
                }
            }
        };

        self.transfers_log.push(TransferRecord {
            timestamp: firing.now,
            task_id: firing.task,
            deliverer_id: firing.deliverer,
            outcome,
            candidates_queried: queried,
            acceptance_checks: checks,
        });

        if let SessionOutcome::Transferred { to, bid } = outcome {
            self.apply_transfer(firing.task, firing.deliverer, to, bid);
        }
    }

    fn parcel_point(&self, task_id: TaskId) -> Location {
        let task = &self.tasks[&task_id];
        if let Some(h) = &task.handover {
            return h.point;
        }
        if task.state == TaskState::PickedUp {
            if let Some(holder) = task.assigned_to.and_then(|id| self.couriers.get(&id)) {
                return holder.position(self.clock);
            }
        }
        task.origin
    }

    fn apply_transfer(&mut self, task_id: TaskId, from: CourierId, to: CourierId, bid: Option<f64>) {
        let cfg = self.cfg;
        let clock = self.clock;
        let pickup = self.parcel_point(task_id);

        // Outgoing deliverer: wait in place for a physical handover, or
        // simply resume if the parcel was never in hand.
        let was_picked_up = self.tasks[&task_id].state == TaskState::PickedUp;
        if was_picked_up {
            let loc = self.couriers[&from].position(clock);
            let task = self.tasks.get_mut(&task_id).unwrap();
            task.state = TaskState::Assigned;
            task.handover = Some(Handover {
                holder: from,
                point: loc,
                since: clock,
            });
            let courier = self.couriers.get_mut(&from).unwrap();
            courier.assigned_task = None;
            courier.engagement_start = None;
            courier.mode = Mode::Waiting;
            courier.loc = loc;
            courier.current_speed = 0.0;
        } else {
            let courier = self.couriers.get_mut(&from).unwrap();
            courier.assigned_task = None;
            courier.engagement_start = None;
            self.release_courier(from);
        }
        self.emit_state_change(from);

        if let Some(bid) = bid {
            self.couriers.get_mut(&from).unwrap().earnings += bid;
            self.couriers.get_mut(&to).unwrap().earnings -= bid;
        }

        // Fresh engagement vectors only: the outcome will describe the new
        // deliverer's delivery, not the old one's.
        self.buffer.clear_task(task_id);

        let substitute_state = {
            let c = &self.couriers[&to];
            c.state_view(&cfg, clock)
        };
        let task = self.tasks.get_mut(&task_id).unwrap();
        task.assigned_to = Some(to);
        task.accepted_at = clock;
        let task_view = task.view(&cfg);
        task.engagement_detour_m = courier::detour_distance(&substitute_state, &task_view, pickup);

        let substitute = self.couriers.get_mut(&to).unwrap();
        let start = substitute.position(clock);
        substitute.loc = start;
        substitute.assigned_task = Some(task_id);
        substitute.engagement_start = Some(clock);
        substitute.incident_minutes_checked = 0;
        substitute.incident_active = false;
        substitute.current_speed = cfg.default_speed_mps;
        substitute.mode = Mode::Route {
            waypoints: vec![
                (pickup, WaypointKind::Pickup),
                (task_view.destination, WaypointKind::Deliver),
                (substitute.personal_destination, WaypointKind::Home),
            ],
            next: 0,
        };
        substitute.next_emit = clock + EMIT_INTERVAL_S;
        self.emit_state_change(to);

        self.transfers_executed += 1;
    }

    /// Returns a courier to its own business: back onto its trace if the
    /// trip is still running, otherwise straight home.
    fn release_courier(&mut self, id: CourierId) {
        let clock = self.clock;
        let cfg = self.cfg;
        let Some(courier) = self.couriers.get_mut(&id) else {
            return;
        };
        debug_assert!(courier.assigned_task.is_none());
        if courier.trace_remaining(clock) {
            courier.mode = Mode::Trace;
            courier.incident_active = false;
            courier.next_emit = f64::INFINITY;
            let rel = clock - courier.start_time;
            let idx = courier.samples.partition_point(|s| s.offset_s <= rel);
            courier.current_speed = courier.samples[idx.saturating_sub(1)].speed;
        } else {
            courier.loc = courier.position(clock);
            courier.current_speed = if courier.incident_active {
                cfg.incident_speed_mps
            } else {
                cfg.default_speed_mps
            };
            courier.mode = Mode::Route {
                waypoints: vec![(courier.personal_destination, WaypointKind::Home)],
                next: 0,
            };
            courier.next_emit = clock + EMIT_INTERVAL_S;
        }
    }

    /// Pushes a fresh situation vector for a courier whose role or movement
    /// state just changed.
    fn emit_state_change(&mut self, id: CourierId) {
        let clock = self.clock;
        let Some(courier) = self.couriers.get_mut(&id) else {
            return;
        };
        let event = GpsEvent {
            courier_id: id,
            timestamp: clock,
            location: courier.position(clock),
            speed: courier.current_speed,
        };
        if let Ok(sv) = courier.window.ingest_event(&event) {
            courier.last_forwarded = Some(sv);
            self.registry.update(sv, courier.registry_role());
        }
    }

    // ---- assignment -----------------------------------------------------

    fn assignment_pass(&mut self) {
        let clock = self.clock;
        let cfg = self.cfg;
        let open: Vec<TaskId> = self.open_tasks.clone();
        for task_id in open {
            let Some(task) = self.tasks.get(&task_id) else {
                continue;
            };
            if task.state != TaskState::Unassigned {
                continue;
            }
            if clock >= task.deadline {
                let task = self.tasks.get_mut(&task_id).unwrap();
                task.state = TaskState::Expired;
                self.expired += 1;
                self.open_tasks.retain(|t| *t != task_id);
                self.trigger.clear_task(task_id);
                continue;
            }

            let task_view = task.view(&cfg);
            let origin = task.origin;
            let mut candidates: Vec<(f64, CourierId)> = self
                .couriers
                .values()
                .filter(|c| c.available_for_assignment(clock))
                .map(|c| (geo::distance(c.position(clock), origin), c.id))
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

            let mut chosen = None;
            for (_, id) in candidates {
                let state = self.couriers[&id].state_view(&cfg, clock);
                if courier::accepts_task(&state, &task_view, origin, clock, &mut self.rngs.noise) {
                    chosen = Some(id);
                    break;
                }
            }
            let Some(courier_id) = chosen else {
                continue;
            };
            self.assign_task(task_id, courier_id);
        }
    }

    fn assign_task(&mut self, task_id: TaskId, courier_id: CourierId) {
        let cfg = self.cfg;
        let clock = self.clock;
        let state = self.couriers[&courier_id].state_view(&cfg, clock);

        let task = self.tasks.get_mut(&task_id).unwrap();
        task.state = TaskState::Assigned;
        task.assigned_to = Some(courier_id);
        task.accepted_at = clock;
        let task_view = task.view(&cfg);
        task.engagement_detour_m = courier::detour_distance(&state, &task_view, task_view.origin);
        let destination = task_view.destination;
        let origin = task_view.origin;

        let courier = self.couriers.get_mut(&courier_id).unwrap();
        courier.loc = courier.position(clock);
        courier.assigned_task = Some(task_id);
        courier.engagement_start = Some(clock);
        courier.incident_minutes_checked = 0;
        courier.incident_active = false;
        courier.current_speed = cfg.default_speed_mps;
        courier.mode = Mode::Route {
            waypoints: vec![
                (origin, WaypointKind::Pickup),
                (destination, WaypointKind::Deliver),
                (courier.personal_destination, WaypointKind::Home),
            ],
            next: 0,
        };
        courier.next_emit = clock + EMIT_INTERVAL_S;
        self.emit_state_change(courier_id);
    }

    // ---- wrap-up ----------------------------------------------------------

    fn finalize(mut self) -> SimOutcome {
        let unresolved = self
            .tasks
            .values()
            .filter(|t| !t.state.is_terminal())
            .count() as u64;
        let total_earnings = self.settled_earnings
            + self
                .couriers
                .values()
                .map(|c| c.earnings)
                .sum::<f64>();
        let summary = SimSummary {
            completed: self.completed,
            delayed: self.delayed,
            final_delay_fraction: (self.completed > 0)
                .then(|| self.delayed as f64 / self.completed as f64),
            expired: self.expired,
            unresolved,
            transfers_attempted: self.transfers_attempted,
            transfers_executed: self.transfers_executed,
            metrics: self.metrics,
            tree: self.tree.stats(),
            total_earnings,
            predictions_skipped: self.predictions_skipped,
        };
        SimOutcome {
            records: std::mem::take(&mut self.records),
            transfers: std::mem::take(&mut self.transfers_log),
            timeline: std::mem::take(&mut self.timeline),
            summary,
            planned_tasks: std::mem::take(&mut self.planned_tasks),
        }
    }
}

/// Decision callbacks backed by live courier state and the noise stream.
struct SimDecisions<'a> {
    task: DeliveryTask,
    pickup: Location,
    now: f64,
    candidates: BTreeMap<CourierId, CourierState>,
    deliverer: CourierState,
    rng: &'a mut ChaCha8Rng,
}

impl CourierDecisions for SimDecisions<'_> {
    fn candidate_bid(&mut self, candidate: CourierId) -> f64 {
        match self.candidates.get(&candidate) {
            Some(state) => {
                courier::candidate_bid(state, &self.task, self.pickup, self.now, self.rng)
            }
            None => 0.0,
        }
    }

    fn deliverer_accepts(&mut self, _candidate: CourierId, bid: f64, delta_s: f64) -> bool {
        courier::deliverer_accepts_transfer(
            &self.deliverer,
            &self.task,
            bid,
            delta_s,
            self.now,
            self.rng,
        )
    }
}
