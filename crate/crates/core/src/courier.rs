//! Tasks and self-interested couriers.
//!
//! Couriers are autonomous: they accept work, bid for transfers, and agree to
//! hand tasks over purely by comparing utilities. All functions here are pure
//! decision functions over immutable state plus an injected random source, so
//! the simulator and the negotiation engine can evaluate them freely.

use rand::Rng;

use crate::geo::{self, Location};
use crate::{CourierId, TaskId};

/// Lower clamp applied to speeds used in arrival-time estimates, matching the
/// post-incident crawl speed; keeps stationary couriers from dividing by zero.
pub const MIN_ESTIMATE_SPEED_MPS: f64 = 0.3;

/// A candidate bids its full estimated surplus minus this margin, so an
/// accepted transfer still leaves it strictly positive estimated utility.
pub const BID_MARGIN_EUR: f64 = 0.01;

/// Lifecycle of a delivery task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskState {
    Unassigned,
    Assigned,
    PickedUp,
    DeliveredOnTime,
    DeliveredLate,
    /// Never found a willing courier before the deadline passed.
    Expired,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::DeliveredOnTime | TaskState::DeliveredLate | TaskState::Expired
        )
    }
}

/// A point-to-point delivery with a deadline, a reward, and a penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeliveryTask {
    pub id: TaskId,
    pub origin: Location,
    pub destination: Location,
    /// Deadline timestamp in seconds; arriving exactly at the deadline counts
    /// as late.
    pub deadline: f64,
    pub reward: f64,
    pub penalty: f64,
    pub state: TaskState,
}

/// Decision-relevant state of one courier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CourierState {
    pub id: CourierId,
    pub location: Location,
    /// Personal destination the courier was traveling to anyway.
    pub personal_destination: Location,
    pub current_speed: f64,
    pub cost_per_km: f64,
    pub waiting_cost_per_min: f64,
    /// Half-width of the uniform arrival-estimate error, in seconds.
    pub error_bound_s: f64,
    pub assigned_task: Option<TaskId>,
    pub picked_up: bool,
    pub incident_active: bool,
}

/// A noisy arrival-time estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrivalEstimate {
    pub true_arrival: f64,
    /// Error drawn uniformly from `[-E, +E]`.
    pub noise: f64,
    pub estimate: f64,
}

/// Great-circle distance in meters. Convenience re-export for call sites that
/// work in courier terms.
pub fn distance(a: Location, b: Location) -> f64 {
    geo::distance(a, b)
}

/// Extra path length for serving `task` from the courier's current position
/// relative to heading straight to their personal destination.
///
/// `pickup` is the task origin for unassigned work, or the carrying courier's
/// position when a picked-up parcel changes hands.
pub fn detour_distance(courier: &CourierState, task: &DeliveryTask, pickup: Location) -> f64 {
    let with_task = geo::distance(courier.location, pickup)
        + geo::distance(pickup, task.destination)
        + geo::distance(task.destination, courier.personal_destination);
    let direct = geo::distance(courier.location, courier.personal_destination);
    (with_task - direct).max(0.0)
}

/// Travel cost for the detour, at the courier's per-kilometer rate.
pub fn delivery_cost(courier: &CourierState, task: &DeliveryTask, pickup: Location) -> f64 {
    courier.cost_per_km * detour_distance(courier, task, pickup) / 1_000.0
}

/// Utility of completing `task` with the given arrival time: reward minus
/// cost when strictly before the deadline, otherwise penalty plus cost.
pub fn utility(courier: &CourierState, task: &DeliveryTask, arrival: f64, pickup: Location) -> f64 {
    let cost = delivery_cost(courier, task, pickup);
    if arrival < task.deadline {
        task.reward - cost
    } else {
        -task.penalty - cost
    }
}

/// Rough arrival estimate for traveling `location -> pickup -> destination`
/// at the courier's current speed (clamped below at 0.3 m/s), with a fresh
/// uniform error draw.
pub fn estimate_arrival<R: Rng + ?Sized>(
    courier: &CourierState,
    task: &DeliveryTask,
    pickup: Location,
    now: f64,
    rng: &mut R,
) -> ArrivalEstimate {
    let speed = courier.current_speed.max(MIN_ESTIMATE_SPEED_MPS);
    let path = geo::distance(courier.location, pickup) + geo::distance(pickup, task.destination);
    let true_arrival = now + path / speed;
    let noise = if courier.error_bound_s > 0.0 {
        rng.random_range(-courier.error_bound_s..=courier.error_bound_s)
    } else {
        0.0
    };
    ArrivalEstimate {
        true_arrival,
        noise,
        estimate: true_arrival + noise,
    }
}

/// Estimated utility of an engagement, evaluated at the noisy arrival
/// estimate.
pub fn estimated_utility<R: Rng + ?Sized>(
    courier: &CourierState,
    task: &DeliveryTask,
    pickup: Location,
    now: f64,
    rng: &mut R,
) -> f64 {
    let est = estimate_arrival(courier, task, pickup, now, rng);
    utility(courier, task, est.estimate, pickup)
}

/// Whether a task-free courier takes the task: estimated utility must be
/// strictly positive.
pub fn accepts_task<R: Rng + ?Sized>(
    courier: &CourierState,
    task: &DeliveryTask,
    pickup: Location,
    now: f64,
    rng: &mut R,
) -> bool {
    debug_assert!(courier.assigned_task.is_none());
    estimated_utility(courier, task, pickup, now, rng) > 0.0
}

/// Cost of waiting `delta_s` seconds for a substitute to come by.
///
/// Zero while the parcel has not been picked up, since then no physical
/// handover has to happen.
pub fn waiting_cost(courier: &CourierState, delta_s: f64) -> f64 {
    debug_assert!(delta_s >= 0.0);
    if courier.picked_up {
        courier.waiting_cost_per_min * delta_s / 60.0
    } else {
        0.0
    }
}

/// Payment a candidate offers the deliverer for taking over the task.
///
/// The candidate values the task at its estimated utility with the full
/// reward and bids that valuation minus a fixed margin; zero signals no
/// interest.
pub fn candidate_bid<R: Rng + ?Sized>(
    candidate: &CourierState,
    task: &DeliveryTask,
    pickup: Location,
    now: f64,
    rng: &mut R,
) -> f64 {
    debug_assert!(candidate.assigned_task.is_none());
    let valuation = estimated_utility(candidate, task, pickup, now, rng);
    (valuation - BID_MARGIN_EUR).max(0.0)
}

/// Whether the deliverer trades the task away: the bid net of waiting costs
/// must strictly exceed the estimated utility of finishing the delivery
/// themself.
pub fn deliverer_accepts_transfer<R: Rng + ?Sized>(
    deliverer: &CourierState,
    task: &DeliveryTask,
    bid: f64,
    delta_s: f64,
    now: f64,
    rng: &mut R,
) -> bool {
    debug_assert!(bid > 0.0);
    let own_pickup = if deliverer.picked_up {
        deliverer.location
    } else {
        task.origin
    };
    let continuation = estimated_utility(deliverer, task, own_pickup, now, rng);
    bid - waiting_cost(deliverer, delta_s) > continuation
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Degrees of latitude spanning `meters` along a meridian.
    fn lat_deg(meters: f64) -> f64 {
        (meters / geo::EARTH_RADIUS_M).to_degrees()
    }

    /// Point `meters` north of (0, 0); meridian distances make the geometry
    /// exact by hand.
    fn north(meters: f64) -> Location {
        Location::new(lat_deg(meters), 0.0)
    }

    fn courier(location: Location, dest: Location) -> CourierState {
        CourierState {
            id: CourierId(1),
            location,
            personal_destination: dest,
            current_speed: 5.0,
            cost_per_km: 3.0,
            waiting_cost_per_min: 0.5,
            error_bound_s: 900.0,
            assigned_task: None,
            picked_up: false,
            incident_active: false,
        }
    }

    fn task(origin: Location, destination: Location, deadline: f64) -> DeliveryTask {
        DeliveryTask {
            id: TaskId(1),
            origin,
            destination,
            deadline,
            reward: 7.0,
            penalty: 7.0,
            state: TaskState::Unassigned,
        }
    }

    #[test]
    fn coincident_route_has_zero_detour() {
        // Courier already travels origin -> destination.
        let origin = north(0.0);
        let dest = north(1_000.0);
        let c = courier(origin, dest);
        let t = task(origin, dest, 1_800.0);
        assert!(detour_distance(&c, &t, t.origin).abs() < 1e-9);
        assert_eq!(delivery_cost(&c, &t, t.origin), 0.0);
    }

    #[test]
    fn collinear_loop_detour_is_exact() {
        // Route 0 -> 1000 m north; pickup at 500 m, parcel destination 250 m:
        // path = 500 + 250 + 750 = 1500, direct = 1000, detour = 500.
        let c = courier(north(0.0), north(1_000.0));
        let t = task(north(500.0), north(250.0), 1_800.0);
        let d = detour_distance(&c, &t, t.origin);
        assert!((d - 500.0).abs() < 1e-6, "got {d}");
    }

    #[test]
    fn delivery_cost_examples() {
        // 1 km detour at 3 EUR/km, built from the loop geometry above scaled
        // to a 1000 m loop.
        let c = courier(north(0.0), north(1_000.0));
        let t = task(north(500.0), north(0.0), 1_800.0);
        let detour = detour_distance(&c, &t, t.origin);
        assert!((detour - 1_000.0).abs() < 1e-6);
        assert!((delivery_cost(&c, &t, t.origin) - 3.0).abs() < 1e-9);

        let t25 = task(north(500.0), north(-750.0), 1_800.0);
        let detour = detour_distance(&c, &t25, t25.origin);
        assert!((detour - 2_500.0).abs() < 1e-6);
        assert!((delivery_cost(&c, &t25, t25.origin) - 7.5).abs() < 1e-9);
    }

    #[test]
    fn utility_branches() {
        // 1 km detour, reward and penalty 7: +4 on time, -10 late.
        let c = courier(north(0.0), north(1_000.0));
        let t = task(north(500.0), north(0.0), 1_800.0);
        assert!((utility(&c, &t, 100.0, t.origin) - 4.0).abs() < 1e-9);
        assert!((utility(&c, &t, 2_000.0, t.origin) + 10.0).abs() < 1e-9);
        // Arrival exactly at the deadline is late: the comparison is strict.
        assert!((utility(&c, &t, t.deadline, t.origin) + 10.0).abs() < 1e-9);
    }

    #[test]
    fn arrival_estimate_zero_noise() {
        let mut c = courier(north(0.0), north(3_000.0));
        c.error_bound_s = 0.0;
        let t = task(north(0.0), north(3_000.0), 1_800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_arrival(&c, &t, t.origin, 100.0, &mut rng);
        assert_eq!(est.noise, 0.0);
        assert_eq!(est.estimate, est.true_arrival);
        assert!((est.true_arrival - 700.0).abs() < 1e-6); // 3000 m at 5 m/s
    }

    #[test]
    fn arrival_noise_is_bounded_and_centered() {
        let c = courier(north(0.0), north(3_000.0));
        let t = task(north(0.0), north(3_000.0), 1_800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let est = estimate_arrival(&c, &t, t.origin, 0.0, &mut rng);
            assert!(est.noise.abs() <= 900.0);
            assert!((est.estimate - est.true_arrival - est.noise).abs() < 1e-9);
            sum += est.noise;
        }
        // Mean within 2% of the [-E, +E] span of zero.
        assert!((sum / 10_000.0).abs() < 0.02 * 1_800.0);
    }

    #[test]
    fn stationary_courier_estimates_at_clamped_speed() {
        let mut c = courier(north(0.0), north(300.0));
        c.current_speed = 0.0;
        c.error_bound_s = 0.0;
        let t = task(north(0.0), north(300.0), 1_800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_arrival(&c, &t, t.origin, 0.0, &mut rng);
        assert!((est.true_arrival - 300.0 / 0.3).abs() < 1e-6);
    }

    #[test]
    fn accepts_task_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        // Zero detour, generous deadline, no noise: utility 7 > 0.
        let mut c = courier(north(0.0), north(1_000.0));
        c.error_bound_s = 0.0;
        let t = task(north(0.0), north(1_000.0), 1_800.0);
        assert!(accepts_task(&c, &t, t.origin, 0.0, &mut rng));

        // Detour cost exceeds the reward: rejected regardless of timing.
        // Loop of 8/3 km -> cost 8 EUR > 7 EUR reward.
        let t_expensive = task(north(500.0), north(500.0 - 8_000.0 / 3.0 / 2.0), 1_800.0);
        let cost = delivery_cost(&c, &t_expensive, t_expensive.origin);
        assert!((cost - 8.0).abs() < 1e-6);
        assert!(!accepts_task(&c, &t_expensive, t_expensive.origin, 0.0, &mut rng));

        // Estimated arrival past the deadline: both branches non-positive.
        let t_late = task(north(0.0), north(1_000.0), 10.0);
        assert!(!accepts_task(&c, &t_late, t_late.origin, 0.0, &mut rng));
    }

    #[test]
    fn waiting_cost_rules() {
        let mut c = courier(north(0.0), north(1_000.0));
        c.picked_up = true;
        assert!((waiting_cost(&c, 240.0) - 2.0).abs() < 1e-9);
        assert_eq!(waiting_cost(&c, 0.0), 0.0);
        c.picked_up = false;
        assert_eq!(waiting_cost(&c, 240.0), 0.0);
    }

    #[test]
    fn bid_is_surplus_minus_margin() {
        // Surplus engineered to exactly 2.50: reward 7, detour 1.5 km at
        // 3 EUR/km, on time with zero noise.
        let mut c = courier(north(0.0), north(1_000.0));
        c.error_bound_s = 0.0;
        let t = task(north(500.0), north(-250.0), 7_200.0);
        let detour = detour_distance(&c, &t, t.origin);
        assert!((detour - 1_500.0).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bid = candidate_bid(&c, &t, t.origin, 0.0, &mut rng);
        assert!((bid - 2.49).abs() < 1e-9);
    }

    #[test]
    fn non_positive_surplus_bids_zero() {
        let mut c = courier(north(0.0), north(1_000.0));
        c.error_bound_s = 0.0;
        // Deadline already passed: utility is negative either way.
        let t = task(north(500.0), north(250.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(candidate_bid(&c, &t, t.origin, 100.0, &mut rng), 0.0);
    }

    #[test]
    fn deliverer_transfer_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);

        // Predicted late (continuation exactly -10), bid 3.0, waiting cost
        // 1.0 (120 s at 0.5/min): 2.0 > -10 -> accept.
        let mut c = courier(north(0.0), north(1_000.0));
        c.error_bound_s = 0.0;
        c.picked_up = true;
        c.assigned_task = Some(TaskId(1));
        c.current_speed = 0.3;
        let t = task(north(0.0), north(1_500.0), 60.0);
        let cont = estimated_utility(&c, &t, c.location, 0.0, &mut rng);
        assert!((cont + 10.0).abs() < 1e-6);
        assert!(deliverer_accepts_transfer(&c, &t, 3.0, 120.0, 0.0, &mut rng));

        // Healthy continuation (on time, 1 km detour -> utility 4.0): bid
        // 0.5 minus waiting 2.0 = -1.5 < 4.0 -> reject.
        let mut healthy = courier(north(0.0), north(1_000.0));
        healthy.error_bound_s = 0.0;
        healthy.picked_up = true;
        healthy.assigned_task = Some(TaskId(1));
        let t4 = task(north(500.0), north(-500.0), 7_200.0);
        let cont = estimated_utility(&healthy, &t4, healthy.location, 0.0, &mut rng);
        assert!((cont - 4.0).abs() < 1e-6);
        assert!(!deliverer_accepts_transfer(
            &healthy, &t4, 0.5, 240.0, 0.0, &mut rng
        ));

        // Not picked up (no waiting cost), continuation exactly 0: any
        // positive bid wins. Loop of 7/3 km -> cost 7 = reward.
        let mut undecided = courier(north(0.0), north(1_000.0));
        undecided.error_bound_s = 0.0;
        undecided.assigned_task = Some(TaskId(1));
        let t0 = task(north(500.0), north(500.0 - 7_000.0 / 3.0 / 2.0), 7_200.0);
        let cont = estimated_utility(&undecided, &t0, t0.origin, 0.0, &mut rng);
        assert!(cont.abs() < 1e-9);
        assert!(deliverer_accepts_transfer(
            &undecided, &t0, 0.01, 240.0, 0.0, &mut rng
        ));
    }

    proptest! {
        #[test]
        fn late_branch_never_beats_on_time_branch(
            reward in 0.0f64..20.0,
            penalty in 0.0f64..20.0,
            detour_m in 0.0f64..5_000.0,
        ) {
            let c = courier(north(0.0), north(1_000.0));
            let mut t = task(north(500.0), north(500.0 - detour_m / 2.0), 1_800.0);
            t.reward = reward;
            t.penalty = penalty;
            let on_time = utility(&c, &t, 0.0, t.origin);
            let late = utility(&c, &t, t.deadline + 1.0, t.origin);
            prop_assert!(late <= on_time);
        }

        #[test]
        fn raising_the_reward_never_flips_acceptance_off(
            seed in 0u64..1_000,
            reward in 0.0f64..15.0,
            bump in 0.0f64..15.0,
            deadline in 100.0f64..3_000.0,
        ) {
            let c = courier(north(0.0), north(1_000.0));
            let mut t = task(north(500.0), north(250.0), deadline);
            t.reward = reward;
            // Same noise draw for both evaluations.
            let accept_lo = accepts_task(&c, &t, t.origin, 0.0,
                &mut ChaCha8Rng::seed_from_u64(seed));
            t.reward = reward + bump;
            let accept_hi = accepts_task(&c, &t, t.origin, 0.0,
                &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(!(accept_lo && !accept_hi));
        }

        #[test]
        fn accepted_bids_leave_positive_margin(
            seed in 0u64..1_000,
            deadline in 100.0f64..3_000.0,
        ) {
            let mut c = courier(north(0.0), north(1_000.0));
            c.error_bound_s = 0.0;
            let t = task(north(400.0), north(200.0), deadline);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bid = candidate_bid(&c, &t, t.origin, 0.0, &mut rng);
            if bid > 0.0 {
                let valuation = estimated_utility(&c, &t, t.origin, 0.0,
                    &mut ChaCha8Rng::seed_from_u64(seed));
                prop_assert!(valuation - bid > 0.0);
            }
        }
    }
}
