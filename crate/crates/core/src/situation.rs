//! Per-courier situation monitoring.
//!
//! Each courier's GPS stream is folded into a [`SituationVector`]: the latest
//! position plus sliding-window speed aggregates (5-minute average and
//! maximum) and a 10-minute stop count. [`significant_change`] decides when an
//! updated vector is worth forwarding to the provider side.

use std::collections::VecDeque;

use thiserror::Error;

use crate::geo::{self, Location};
use crate::CourierId;

/// Window horizon for stop counting and sample retention, in seconds.
pub const WINDOW_LONG_S: f64 = 600.0;
/// Window horizon for the speed aggregates, in seconds.
pub const WINDOW_SHORT_S: f64 = 300.0;
/// Speeds below this are counted as stops (GPS speed jitters near zero).
pub const STOP_SPEED_MPS: f64 = 0.1;

/// Forwarding thresholds: average-speed delta, displacement, and heartbeat.
pub const SIGNIFICANT_SPEED_DELTA_MPS: f64 = 0.5;
pub const SIGNIFICANT_DISPLACEMENT_M: f64 = 50.0;
pub const HEARTBEAT_S: f64 = 60.0;

/// One GPS sample from a courier's phone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsEvent {
    pub courier_id: CourierId,
    /// Seconds since the simulation/dataset epoch.
    pub timestamp: f64,
    pub location: Location,
    /// Ground speed in m/s, non-negative.
    pub speed: f64,
}

/// Windowed summary of a courier's recent sensor data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SituationVector {
    pub courier_id: CourierId,
    /// Timestamp of the most recent contributing event.
    pub timestamp: f64,
    pub location: Location,
    pub avg_speed_5min: f64,
    pub max_speed_5min: f64,
    /// Events with speed < 0.1 m/s in the last 10 minutes.
    pub stop_count_10min: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("event for courier {courier} at t={got} arrived before t={last}")]
    OutOfOrder {
        courier: CourierId,
        got: f64,
        last: f64,
    },
    #[error("event for courier {got} fed into the window of courier {expected}")]
    WrongCourier { expected: CourierId, got: CourierId },
}

#[derive(Clone, Copy, Debug)]
struct WindowSample {
    timestamp: f64,
    speed: f64,
}

/// Ring of the last 10 minutes of samples for one courier.
#[derive(Clone, Debug)]
pub struct WindowState {
    courier_id: CourierId,
    samples: VecDeque<WindowSample>,
    last_timestamp: Option<f64>,
}

impl WindowState {
    pub fn new(courier_id: CourierId) -> Self {
        Self {
            courier_id,
            samples: VecDeque::new(),
            last_timestamp: None,
        }
    }

    pub fn courier_id(&self) -> CourierId {
        self.courier_id
    }

    /// Number of samples currently retained.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Oldest retained sample timestamp, if any.
    pub fn oldest_timestamp(&self) -> Option<f64> {
        self.samples.front().map(|s| s.timestamp)
    }

    /// Absorbs the next event and returns the updated situation vector.
    ///
    /// Events must arrive with non-decreasing timestamps per courier; an
    /// out-of-order event is rejected without touching the window.
    pub fn ingest_event(&mut self, event: &GpsEvent) -> Result<SituationVector, IngestError> {
        if event.courier_id != self.courier_id {
            return Err(IngestError::WrongCourier {
                expected: self.courier_id,
                got: event.courier_id,
            });
        }
        if let Some(last) = self.last_timestamp {
            if event.timestamp < last {
                return Err(IngestError::OutOfOrder {
                    courier: self.courier_id,
                    got: event.timestamp,
                    last,
                });
            }
        }
        debug_assert!(event.speed >= 0.0);

        let now = event.timestamp;
        self.samples.push_back(WindowSample {
            timestamp: now,
            speed: event.speed,
        });
        while let Some(front) = self.samples.front() {
            if front.timestamp <= now - WINDOW_LONG_S {
                self.samples.pop_front();
            } else {
                break;
            }
        }
        self.last_timestamp = Some(now);

        let mut speed_sum = 0.0;
        let mut speed_count = 0u32;
        let mut max_speed = 0.0f64;
        let mut stops = 0u32;
        for s in &self.samples {
            if s.timestamp > now - WINDOW_SHORT_S {
                speed_sum += s.speed;
                speed_count += 1;
                max_speed = max_speed.max(s.speed);
            }
            if s.speed < STOP_SPEED_MPS {
                stops += 1;
            }
        }
        // The current event is always inside the short window.
        debug_assert!(speed_count > 0);

        Ok(SituationVector {
            courier_id: self.courier_id,
            timestamp: now,
            location: event.location,
            avg_speed_5min: speed_sum / f64::from(speed_count),
            max_speed_5min: max_speed,
            stop_count_10min: stops,
        })
    }
}

/// Whether `next` differs enough from the previously forwarded vector to be
/// communicated: a 0.5 m/s average-speed delta, a 50 m displacement, or a
/// 60 s heartbeat.
pub fn significant_change(prev: &SituationVector, next: &SituationVector) -> bool {
    debug_assert_eq!(prev.courier_id, next.courier_id);
    debug_assert!(prev.timestamp <= next.timestamp);

    (next.avg_speed_5min - prev.avg_speed_5min).abs() >= SIGNIFICANT_SPEED_DELTA_MPS
        || geo::distance(prev.location, next.location) >= SIGNIFICANT_DISPLACEMENT_M
        || next.timestamp - prev.timestamp >= HEARTBEAT_S
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(t: f64, speed: f64) -> GpsEvent {
        GpsEvent {
            courier_id: CourierId(1),
            timestamp: t,
            location: Location::new(40.0, -3.0),
            speed,
        }
    }

    fn feed(events: &[GpsEvent]) -> (WindowState, SituationVector) {
        let mut w = WindowState::new(CourierId(1));
        let mut last = None;
        for e in events {
            last = Some(w.ingest_event(e).unwrap());
        }
        (w, last.unwrap())
    }

    #[test]
    fn speed_aggregates_over_five_minutes() {
        let (_, sv) = feed(&[event(0.0, 3.0), event(60.0, 4.0), event(120.0, 5.0)]);
        assert_eq!(sv.avg_speed_5min, 4.0);
        assert_eq!(sv.max_speed_5min, 5.0);
        assert_eq!(sv.timestamp, 120.0);
    }

    #[test]
    fn single_stopped_sample() {
        let (_, sv) = feed(&[event(0.0, 0.0)]);
        assert_eq!(sv.avg_speed_5min, 0.0);
        assert_eq!(sv.max_speed_5min, 0.0);
        assert_eq!(sv.stop_count_10min, 1);
    }

    #[test]
    fn stop_count_over_ten_minutes() {
        let (_, sv) = feed(&[
            event(0.0, 5.0),
            event(100.0, 5.0),
            event(200.0, 0.0),
            event(300.0, 0.0),
            event(400.0, 5.0),
        ]);
        assert_eq!(sv.stop_count_10min, 2);
    }

    #[test]
    fn out_of_order_event_is_rejected() {
        let mut w = WindowState::new(CourierId(1));
        w.ingest_event(&event(100.0, 1.0)).unwrap();
        let err = w.ingest_event(&event(99.0, 1.0)).unwrap_err();
        assert!(matches!(err, IngestError::OutOfOrder { .. }));
        // The rejected event left no trace.
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn samples_older_than_window_are_pruned() {
        let (w, sv) = feed(&[event(0.0, 0.0), event(100.0, 5.0), event(650.0, 5.0)]);
        // The stop at t=0 fell out of the 10-minute window ending at 650.
        assert_eq!(sv.stop_count_10min, 0);
        assert_eq!(w.oldest_timestamp(), Some(100.0));
    }

    #[test]
    fn boundary_sample_is_excluded() {
        // A sample exactly 600 s old is outside the strict window.
        let (w, _) = feed(&[event(0.0, 0.0), event(600.0, 5.0)]);
        assert_eq!(w.len(), 1);
        assert_eq!(w.oldest_timestamp(), Some(600.0));
    }

    #[test]
    fn identical_vectors_close_in_time_are_not_significant() {
        let (_, sv) = feed(&[event(0.0, 3.0)]);
        let mut next = sv;
        next.timestamp = 10.0;
        assert!(!significant_change(&sv, &next));
    }

    #[test]
    fn speed_delta_triggers_forwarding() {
        let (_, sv) = feed(&[event(0.0, 3.0)]);
        let mut next = sv;
        next.timestamp = 10.0;
        next.avg_speed_5min += 0.6;
        assert!(significant_change(&sv, &next));
        let mut below = sv;
        below.timestamp = 10.0;
        below.avg_speed_5min += 0.4;
        assert!(!significant_change(&sv, &below));
    }

    #[test]
    fn heartbeat_triggers_forwarding() {
        let (_, sv) = feed(&[event(0.0, 3.0)]);
        let mut next = sv;
        next.timestamp = 61.0;
        assert!(significant_change(&sv, &next));
    }

    #[test]
    fn displacement_triggers_forwarding() {
        let (_, sv) = feed(&[event(0.0, 3.0)]);
        let mut next = sv;
        next.timestamp = 10.0;
        next.location = Location::new(40.0006, -3.0); // ~67 m north
        assert!(significant_change(&sv, &next));
    }

    /// Brute-force recomputation of the aggregates over a full event history.
    fn brute_force(events: &[(f64, f64)]) -> (f64, f64, u32) {
        let now = events.last().unwrap().0;
        let short: Vec<f64> = events
            .iter()
            .filter(|(t, _)| *t > now - WINDOW_SHORT_S)
            .map(|(_, s)| *s)
            .collect();
        let stops = events
            .iter()
            .filter(|(t, s)| *t > now - WINDOW_LONG_S && *s < STOP_SPEED_MPS)
            .count() as u32;
        let avg = short.iter().sum::<f64>() / short.len() as f64;
        let max = short.iter().cloned().fold(0.0f64, f64::max);
        (avg, max, stops)
    }

    proptest! {
        #[test]
        fn window_matches_brute_force(
            gaps in proptest::collection::vec(0.0f64..200.0, 1..60),
            speeds in proptest::collection::vec(0.0f64..8.0, 60),
        ) {
            let mut t = 0.0;
            let mut history = Vec::new();
            let mut w = WindowState::new(CourierId(1));
            let mut sv = None;
            for (gap, speed) in gaps.iter().zip(&speeds) {
                t += gap;
                history.push((t, *speed));
                sv = Some(w.ingest_event(&event(t, *speed)).unwrap());
            }
            let sv = sv.unwrap();
            let (avg, max, stops) = brute_force(&history);
            prop_assert!((sv.avg_speed_5min - avg).abs() < 1e-9);
            prop_assert!((sv.max_speed_5min - max).abs() < 1e-9);
            prop_assert_eq!(sv.stop_count_10min, stops);
            prop_assert!(sv.avg_speed_5min <= sv.max_speed_5min + 1e-12);

            // Monotone pruning: nothing older than the long window survives.
            if let Some(oldest) = w.oldest_timestamp() {
                prop_assert!(oldest > t - WINDOW_LONG_S);
            }

            // Idempotent summary: a replay produces the identical vector.
            let mut w2 = WindowState::new(CourierId(1));
            let mut sv2 = None;
            for (t, speed) in &history {
                sv2 = Some(w2.ingest_event(&event(*t, *speed)).unwrap());
            }
            prop_assert_eq!(sv, sv2.unwrap());
        }
    }
}
