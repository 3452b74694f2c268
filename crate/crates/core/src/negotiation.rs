//! Provider-side transfer machinery.
//!
//! The logistics provider keeps a registry of the latest situation vector per
//! active courier, watches deliverers' predicted on-time probabilities, and
//! when one drops below the trigger threshold it ranks the available couriers
//! by their own predicted probability and runs the offer/bid/accept protocol
//! down that ranking. A forced variant reassigns to the top candidate without
//! consulting anyone.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::courier::{DeliveryTask, MIN_ESTIMATE_SPEED_MPS};
use crate::geo::{self, Location};
use crate::predictor::{build_features, HoeffdingTree};
use crate::situation::SituationVector;
use crate::{CourierId, TaskId};

/// Registry entries older than this are stale and excluded from candidate
/// search.
pub const REGISTRY_STALE_S: f64 = 600.0;

/// Minimum pause between transfer attempts for the same task.
pub const TRIGGER_COOLDOWN_S: f64 = 60.0;

/// Role a courier currently plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Participating, no task assigned, open to take one.
    Available,
    /// Engaged in a delivery (including holding a parcel for handover).
    Deliverer,
}

#[derive(Clone, Debug)]
struct RegistryEntry {
    vector: SituationVector,
    role: Role,
}

/// The provider's up-to-date view of the crowd: latest situation vector and
/// role per active courier.
#[derive(Clone, Debug, Default)]
pub struct GlobalRegistry {
    entries: BTreeMap<CourierId, RegistryEntry>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("courier {0} is not in the registry")]
    Missing(CourierId),
    #[error("courier {0}'s situation vector is stale")]
    Stale(CourierId),
}

impl GlobalRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the courier's latest vector, replacing any previous entry.
    pub fn update(&mut self, vector: SituationVector, role: Role) {
        self.entries
            .insert(vector.courier_id, RegistryEntry { vector, role });
    }

    pub fn set_role(&mut self, courier: CourierId, role: Role) {
        if let Some(entry) = self.entries.get_mut(&courier) {
            entry.role = role;
        }
    }

    /// Drops a courier that left the system.
    pub fn remove(&mut self, courier: CourierId) {
        self.entries.remove(&courier);
    }

    pub fn latest(&self, courier: CourierId) -> Option<&SituationVector> {
        self.entries.get(&courier).map(|e| &e.vector)
    }

    pub fn role(&self, courier: CourierId) -> Option<Role> {
        self.entries.get(&courier).map(|e| e.role)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Available couriers with a fresh vector, in id order.
    pub fn fresh_available(&self, now: f64) -> impl Iterator<Item = &SituationVector> {
        self.entries.values().filter_map(move |e| {
            (e.role == Role::Available && now - e.vector.timestamp <= REGISTRY_STALE_S)
                .then_some(&e.vector)
        })
    }

    /// Estimated seconds for `candidate` to reach `target`, from its last
    /// reported position at its last reported average speed (clamped below at
    /// 0.3 m/s).
    pub fn temporal_distance(
        &self,
        candidate: CourierId,
        target: Location,
        now: f64,
    ) -> Result<f64, RegistryError> {
        let entry = self
            .entries
            .get(&candidate)
            .ok_or(RegistryError::Missing(candidate))?;
        if now - entry.vector.timestamp > REGISTRY_STALE_S {
            return Err(RegistryError::Stale(candidate));
        }
        let speed = entry.vector.avg_speed_5min.max(MIN_ESTIMATE_SPEED_MPS);
        Ok(geo::distance(entry.vector.location, target) / speed)
    }
}

/// Per-task cooldown bookkeeping for the trigger policy.
#[derive(Clone, Debug, Default)]
pub struct TriggerState {
    last_attempt: BTreeMap<TaskId, f64>,
}

impl TriggerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fires when the predicted on-time probability is strictly below the
    /// threshold and the task is out of cooldown.
    pub fn should_trigger(&self, task: TaskId, sigma: f64, threshold: f64, now: f64) -> bool {
        if sigma >= threshold {
            return false;
        }
        match self.last_attempt.get(&task) {
            Some(&last) => now - last >= TRIGGER_COOLDOWN_S,
            None => true,
        }
    }

    pub fn record_attempt(&mut self, task: TaskId, now: f64) {
        self.last_attempt.insert(task, now);
    }

    pub fn clear_task(&mut self, task: TaskId) {
        self.last_attempt.remove(&task);
    }
}

/// A deliverer's request to have its task transferred.
#[derive(Clone, Copy, Debug)]
pub struct TransferRequest {
    pub task_id: TaskId,
    pub deliverer_id: CourierId,
    /// The deliverer's predicted on-time probability at request time.
    pub sigma_deliverer: f64,
    pub timestamp: f64,
}

/// Candidates strictly more promising than the deliverer, best first.
#[derive(Clone, Debug, Default)]
pub struct CandidateRanking {
    entries: Vec<(CourierId, f64)>,
}

impl CandidateRanking {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(CourierId, f64)] {
        &self.entries
    }

    pub fn top(&self) -> Option<CourierId> {
        self.entries.first().map(|(id, _)| *id)
    }
}

/// Scores every fresh available courier on the task and keeps those whose
/// predicted probability strictly dominates the deliverer's, sorted by
/// probability descending (ties by courier id).
pub fn rank_candidates(
    registry: &GlobalRegistry,
    tree: &HoeffdingTree,
    task: &DeliveryTask,
    pickup: Location,
    sigma_deliverer: f64,
    now: f64,
) -> CandidateRanking {
    let mut entries: Vec<(CourierId, f64)> = Vec::new();
    for sv in registry.fresh_available(now) {
        let features = build_features(sv, task, pickup, now);
        let sigma = tree.predict_on_time(&features);
        if sigma > sigma_deliverer {
            entries.push((sv.courier_id, sigma));
        }
    }
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    CandidateRanking { entries }
}

/// How a transfer session ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SessionOutcome {
    /// Task goes to `to`; `bid` is what the substitute pays the deliverer
    /// (absent for forced transfers).
    Transferred { to: CourierId, bid: Option<f64> },
    NoAgreement,
}

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("task finished while the session was running")]
    StaleTask,
}

/// Courier-side decision callbacks a session needs. The simulator backs this
/// with real courier state and its random stream; tests use canned fixtures.
pub trait CourierDecisions {
    /// The candidate's bid for taking over the task; zero means no interest.
    fn candidate_bid(&mut self, candidate: CourierId) -> f64;
    /// Whether the deliverer accepts the presented bid and waiting time.
    fn deliverer_accepts(&mut self, candidate: CourierId, bid: f64, delta_s: f64) -> bool;
    /// Whether the task is still running; sessions abort once it is not.
    fn task_active(&self) -> bool {
        true
    }
}

/// One negotiation instance over a candidate ranking.
#[derive(Clone, Debug)]
pub struct TransferSession {
    pub request: TransferRequest,
    pub ranking: CandidateRanking,
    /// Every bid solicited, in query order.
    pub bids: Vec<(CourierId, f64)>,
    /// Deliverer consultations performed.
    pub acceptance_checks: u32,
}

impl TransferSession {
    pub fn new(request: TransferRequest, ranking: CandidateRanking) -> Self {
        Self {
            request,
            ranking,
            bids: Vec::new(),
            acceptance_checks: 0,
        }
    }

    pub fn candidates_queried(&self) -> u32 {
        self.bids.len() as u32
    }

    /// Walks the ranking: solicit a bid, drop zero bids, present positive
    /// bids (with the candidate's temporal distance) to the deliverer, stop
    /// at the first mutual agreement.
    pub fn negotiate<D: CourierDecisions>(
        &mut self,
        registry: &GlobalRegistry,
        deliverer_location: Location,
        decisions: &mut D,
    ) -> Result<SessionOutcome, SessionError> {
        let order: Vec<CourierId> = self.ranking.entries().iter().map(|(id, _)| *id).collect();
        for candidate in order {
            if !decisions.task_active() {
                return Err(SessionError::StaleTask);
            }
            let bid = decisions.candidate_bid(candidate);
            self.bids.push((candidate, bid));
            if bid <= 0.0 {
                continue;
            }
            let delta = registry
                .temporal_distance(candidate, deliverer_location, self.request.timestamp)
                .unwrap_or(f64::INFINITY);
            self.acceptance_checks += 1;
            if decisions.deliverer_accepts(candidate, bid, delta) {
                return Ok(SessionOutcome::Transferred {
                    to: candidate,
                    bid: Some(bid),
                });
            }
        }
        Ok(SessionOutcome::NoAgreement)
    }
}

/// Forced-transfer variant: the top-ranked candidate takes the task, no bids,
/// no consent.
pub fn force_transfer(ranking: &CandidateRanking) -> SessionOutcome {
    match ranking.top() {
        Some(to) => SessionOutcome::Transferred { to, bid: None },
        None => SessionOutcome::NoAgreement,
    }
}

/// One line of the transfer log emitted per session.
#[derive(Clone, Copy, Debug)]
pub struct TransferRecord {
    pub timestamp: f64,
    pub task_id: TaskId,
    pub deliverer_id: CourierId,
    pub outcome: SessionOutcome,
    pub candidates_queried: u32,
    /// Deliverer consultations; zero under forced transfers.
    pub acceptance_checks: u32,
}
