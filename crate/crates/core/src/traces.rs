//! Trip traces: parsing, synthesis, and scheduling into timed GPS streams.
//!
//! The canonical trace format is a headered CSV with one GPS sample per row:
//!
//! ```text
//! trip_id,user_id,hour,offset_s,lat,lon,speed_mps
//! ```
//!
//! `hour` is the hour of day the trip started in (0-23) and `offset_s` the
//! sample time relative to the trip start. Exact start times are not part of
//! the data; [`schedule_trips`] draws them uniformly within the start hour,
//! which also defines the randomization applied to privacy-obscured exports.
//!
//! A simple task-replay format is supported alongside:
//!
//! ```text
//! spawn_s,origin_lat,origin_lon,dest_lat,dest_lon
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::geo::{self, Location};
use crate::situation::GpsEvent;
use crate::CourierId;

/// Fraction of malformed data rows beyond which a file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.05;

/// One GPS sample within a trip, relative to the trip start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSample {
    pub offset_s: f64,
    pub location: Location,
    pub speed: f64,
}

/// A courier trip: ordered samples plus the start hour it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Trip {
    pub trip_id: String,
    pub user_id: String,
    pub hour_of_day: u8,
    pub samples: Vec<TraceSample>,
}

impl Trip {
    pub fn duration_s(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.offset_s)
    }

    pub fn start_location(&self) -> Location {
        self.samples[0].location
    }

    pub fn end_location(&self) -> Location {
        self.samples[self.samples.len() - 1].location
    }
}

/// A trip pinned to an absolute start time and a courier identity.
#[derive(Clone, Debug)]
pub struct ScheduledTrip {
    pub courier_id: CourierId,
    pub trip_id: String,
    pub start_time: f64,
    pub samples: Vec<TraceSample>,
}

impl ScheduledTrip {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.samples.last().map_or(0.0, |s| s.offset_s)
    }

    pub fn events(&self) -> impl Iterator<Item = GpsEvent> + '_ {
        self.samples.iter().map(move |s| GpsEvent {
            courier_id: self.courier_id,
            timestamp: self.start_time + s.offset_s,
            location: s.location,
            speed: s.speed,
        })
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {malformed} of {total} data rows malformed (more than {:.0}%)", MAX_MALFORMED_FRACTION * 100.0)]
    TooManyMalformed {
        path: String,
        malformed: usize,
        total: usize,
    },
    #[error("{path}: no usable trips")]
    Empty { path: String },
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
}

/// Result of parsing a trace file: the trips plus how many rows were dropped.
#[derive(Clone, Debug)]
pub struct ParsedTraces {
    pub trips: Vec<Trip>,
    pub malformed_rows: usize,
}

/// Parses the canonical trace CSV. Malformed rows are counted and skipped;
/// the file is rejected outright when more than 5% of its rows are bad.
pub fn parse_traces(path: &Path) -> Result<ParsedTraces, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| TraceError::Unreadable {
            path: path.display().to_string(),
            source: match e.into_kind() {
                csv::ErrorKind::Io(io) => io,
                other => std::io::Error::other(format!("{other:?}")),
            },
        })?;

    // Trips keep their first-appearance order so courier ids stay stable.
    let mut order: Vec<String> = Vec::new();
    let mut trips: std::collections::HashMap<String, Trip> = std::collections::HashMap::new();
    let mut malformed = 0usize;
    let mut total = 0usize;

    for record in reader.records() {
        total += 1;
        let Ok(record) = record else {
            malformed += 1;
            continue;
        };
        match parse_row(&record) {
            Some((trip_id, user_id, hour, sample)) => {
                let trip = trips.entry(trip_id.clone()).or_insert_with(|| {
                    order.push(trip_id.clone());
                    Trip {
                        trip_id,
                        user_id,
                        hour_of_day: hour,
                        samples: Vec::new(),
                    }
                });
                trip.samples.push(sample);
            }
            None => malformed += 1,
        }
    }

    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(TraceError::TooManyMalformed {
            path: path.display().to_string(),
            malformed,
            total,
        });
    }

    let mut result = Vec::with_capacity(order.len());
    for id in order {
        let mut trip = trips.remove(&id).expect("tracked id");
        trip.samples
            .sort_by(|a, b| a.offset_s.total_cmp(&b.offset_s));
        // Duplicate offsets cannot be ordered meaningfully; keep the first.
        let mut last = f64::NEG_INFINITY;
        trip.samples.retain(|s| {
            let keep = s.offset_s > last;
            if keep {
                last = s.offset_s;
            } else {
                malformed += 1;
            }
            keep
        });
        if trip.samples.is_empty() {
            continue;
        }
        // Offsets are relative to the trip start; re-base exports that use a
        // different reference point.
        let base = trip.samples[0].offset_s;
        if base != 0.0 {
            for s in &mut trip.samples {
                s.offset_s -= base;
            }
        }
        result.push(trip);
    }

    if result.is_empty() {
        return Err(TraceError::Empty {
            path: path.display().to_string(),
        });
    }

    Ok(ParsedTraces {
        trips: result,
        malformed_rows: malformed,
    })
}

fn parse_row(record: &csv::StringRecord) -> Option<(String, String, u8, TraceSample)> {
    if record.len() != 7 {
        return None;
    }
    let trip_id = record.get(0)?.trim();
    let user_id = record.get(1)?.trim();
    if trip_id.is_empty() {
        return None;
    }
    let hour: u8 = record.get(2)?.trim().parse().ok()?;
    let offset: f64 = record.get(3)?.trim().parse().ok()?;
    let lat: f64 = record.get(4)?.trim().parse().ok()?;
    let lon: f64 = record.get(5)?.trim().parse().ok()?;
    let speed: f64 = record.get(6)?.trim().parse().ok()?;
    if hour > 23
        || !offset.is_finite()
        || offset < 0.0
        || !(-90.0..=90.0).contains(&lat)
        || !(-180.0..=180.0).contains(&lon)
        || !speed.is_finite()
        || speed < 0.0
    {
        return None;
    }
    Some((
        trip_id.to_string(),
        user_id.to_string(),
        hour,
        TraceSample {
            offset_s: offset,
            location: Location::new(lat, lon),
            speed,
        },
    ))
}

/// Writes trips back out in the canonical format.
pub fn serialize_traces(trips: &[Trip], path: &Path) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "trip_id,user_id,hour,offset_s,lat,lon,speed_mps")?;
    for trip in trips {
        for s in &trip.samples {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                trip.trip_id,
                trip.user_id,
                trip.hour_of_day,
                s.offset_s,
                s.location.lat,
                s.location.lon,
                s.speed
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Pins each trip to an absolute start: `day_epoch + hour * 3600` plus a
/// uniform draw within the hour. Courier ids are assigned sequentially from
/// `id_base` in input order.
pub fn schedule_trips<R: Rng + ?Sized>(
    trips: &[Trip],
    rng: &mut R,
    day_epoch: f64,
    id_base: u64,
) -> Vec<ScheduledTrip> {
    trips
        .iter()
        .enumerate()
        .map(|(i, trip)| ScheduledTrip {
            courier_id: CourierId(id_base + i as u64),
            trip_id: trip.trip_id.clone(),
            start_time: day_epoch
                + f64::from(trip.hour_of_day) * 3_600.0
                + rng.random_range(0.0..3_600.0),
            samples: trip.samples.clone(),
        })
        .collect()
}

/// Randomizes trip starts within their hour and flattens everything into one
/// globally time-sorted GPS event stream.
pub fn randomize_starts<R: Rng + ?Sized>(
    trips: &[Trip],
    rng: &mut R,
    day_epoch: f64,
) -> Vec<GpsEvent> {
    let scheduled = schedule_trips(trips, rng, day_epoch, 0);
    sorted_events(&scheduled)
}

/// Flattens scheduled trips into one time-sorted event stream.
pub fn sorted_events(scheduled: &[ScheduledTrip]) -> Vec<GpsEvent> {
    let mut events: Vec<GpsEvent> = scheduled.iter().flat_map(|t| t.events()).collect();
    events.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.courier_id.cmp(&b.courier_id))
    });
    events
}

/// Parameters for synthetic trip generation.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub center: Location,
    pub radius_m: f64,
    pub speed_range_mps: (f64, f64),
    pub duration_range_s: (f64, f64),
    pub sample_interval_s: f64,
    /// Trips start uniformly in `[start_hour, end_hour)`.
    pub start_hour: u8,
    pub end_hour: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            center: Location::new(40.4168, -3.7038),
            radius_m: 1_500.0,
            speed_range_mps: (2.5, 6.5),
            duration_range_s: (300.0, 2_400.0),
            sample_interval_s: 60.0,
            start_hour: 8,
            end_hour: 20,
        }
    }
}

/// Generates `count` synthetic trips: straight-line rides between two points
/// of the operating disk at a constant per-trip speed, sampled on the
/// configured interval. Endpoint pairs are rejection-sampled until the ride
/// duration falls inside the configured range.
pub fn synth_traces<R: Rng + ?Sized>(count: usize, config: &SynthConfig, rng: &mut R) -> Vec<Trip> {
    let mut trips = Vec::with_capacity(count);
    for i in 0..count {
        let (start, end, speed, duration) = loop {
            let a = geo::uniform_point_in_disk(config.center, config.radius_m, rng);
            let b = geo::uniform_point_in_disk(config.center, config.radius_m, rng);
            let v = rng.random_range(config.speed_range_mps.0..=config.speed_range_mps.1);
            let d = geo::distance(a, b) / v;
            if d >= config.duration_range_s.0 && d <= config.duration_range_s.1 {
                break (a, b, v, d);
            }
        };
        let hour = rng.random_range(config.start_hour..config.end_hour);

        let mut samples = Vec::new();
        let mut t = 0.0;
        while t < duration {
            samples.push(TraceSample {
                offset_s: t,
                location: geo::interpolate(start, end, t / duration),
                speed,
            });
            t += config.sample_interval_s;
        }
        samples.push(TraceSample {
            offset_s: duration,
            location: end,
            speed,
        });

        trips.push(Trip {
            trip_id: format!("synth-{i}"),
            user_id: format!("user-{i}"),
            hour_of_day: hour,
            samples,
        });
    }
    trips
}

/// A task to inject at a fixed time, as read from a task-replay file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedTask {
    pub spawn_s: f64,
    pub origin: Location,
    pub destination: Location,
}

/// Parses the task-replay CSV (`spawn_s,origin_lat,origin_lon,dest_lat,dest_lon`),
/// with the same malformed-row policy as trace parsing.
pub fn parse_tasks(path: &Path) -> Result<Vec<PlannedTask>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| TraceError::Unreadable {
            path: path.display().to_string(),
            source: match e.into_kind() {
                csv::ErrorKind::Io(io) => io,
                other => std::io::Error::other(format!("{other:?}")),
            },
        })?;

    let mut tasks = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for record in reader.records() {
        total += 1;
        let Ok(record) = record else {
            malformed += 1;
            continue;
        };
        let parsed = (|| -> Option<PlannedTask> {
            if record.len() != 5 {
                return None;
            }
            let spawn: f64 = record.get(0)?.trim().parse().ok()?;
            let olat: f64 = record.get(1)?.trim().parse().ok()?;
            let olon: f64 = record.get(2)?.trim().parse().ok()?;
            let dlat: f64 = record.get(3)?.trim().parse().ok()?;
            let dlon: f64 = record.get(4)?.trim().parse().ok()?;
            if !spawn.is_finite() || spawn < 0.0 {
                return None;
            }
            Some(PlannedTask {
                spawn_s: spawn,
                origin: Location::new(olat, olon),
                destination: Location::new(dlat, dlon),
            })
        })();
        match parsed {
            Some(task) => tasks.push(task),
            None => malformed += 1,
        }
    }

    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(TraceError::TooManyMalformed {
            path: path.display().to_string(),
            malformed,
            total,
        });
    }
    tasks.sort_by(|a, b| a.spawn_s.total_cmp(&b.spawn_s));
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "trip_id,user_id,hour,offset_s,lat,lon,speed_mps\n";

    #[test]
    fn parses_a_three_row_trip() {
        let f = write_file(&format!(
            "{HEADER}a,u1,9,0,40.0,-3.0,3.5\na,u1,9,60,40.001,-3.0,4.0\na,u1,9,120,40.002,-3.0,4.5\n"
        ));
        let parsed = parse_traces(f.path()).unwrap();
        assert_eq!(parsed.trips.len(), 1);
        assert_eq!(parsed.malformed_rows, 0);
        let trip = &parsed.trips[0];
        assert_eq!(trip.samples.len(), 3);
        assert_eq!(trip.hour_of_day, 9);
        assert_eq!(trip.duration_s(), 120.0);
    }

    #[test]
    fn partitions_interleaved_trips() {
        let f = write_file(&format!(
            "{HEADER}a,u1,9,0,40.0,-3.0,3.0\nb,u2,10,0,40.1,-3.1,2.0\na,u1,9,60,40.0,-3.0,3.0\nb,u2,10,60,40.1,-3.1,2.0\n"
        ));
        let parsed = parse_traces(f.path()).unwrap();
        assert_eq!(parsed.trips.len(), 2);
        assert_eq!(parsed.trips[0].trip_id, "a");
        assert_eq!(parsed.trips[0].samples.len(), 2);
        assert_eq!(parsed.trips[1].trip_id, "b");
        assert_eq!(parsed.trips[1].samples.len(), 2);
    }

    #[test]
    fn negative_offset_rows_are_skipped_and_counted() {
        let f = write_file(&format!(
            "{HEADER}a,u1,9,0,40.0,-3.0,3.0\na,u1,9,-5,40.0,-3.0,3.0\n\
             a,u1,9,60,40.0,-3.0,3.0\na,u1,9,120,40.0,-3.0,3.0\n\
             a,u1,9,180,40.0,-3.0,3.0\na,u1,9,240,40.0,-3.0,3.0\n\
             a,u1,9,300,40.0,-3.0,3.0\na,u1,9,360,40.0,-3.0,3.0\n\
             a,u1,9,420,40.0,-3.0,3.0\na,u1,9,480,40.0,-3.0,3.0\n\
             a,u1,9,540,40.0,-3.0,3.0\na,u1,9,600,40.0,-3.0,3.0\n\
             a,u1,9,660,40.0,-3.0,3.0\na,u1,9,720,40.0,-3.0,3.0\n\
             a,u1,9,780,40.0,-3.0,3.0\na,u1,9,840,40.0,-3.0,3.0\n\
             a,u1,9,900,40.0,-3.0,3.0\na,u1,9,960,40.0,-3.0,3.0\n\
             a,u1,9,1020,40.0,-3.0,3.0\na,u1,9,1080,40.0,-3.0,3.0\n\
             a,u1,9,1140,40.0,-3.0,3.0\n"
        ));
        let parsed = parse_traces(f.path()).unwrap();
        assert_eq!(parsed.malformed_rows, 1);
        assert_eq!(parsed.trips[0].samples.len(), 20);
    }

    #[test]
    fn too_many_malformed_rows_is_fatal() {
        let f = write_file(&format!(
            "{HEADER}a,u1,9,0,40.0,-3.0,3.0\na,u1,bad,60,40.0,-3.0,3.0\n"
        ));
        assert!(matches!(
            parse_traces(f.path()),
            Err(TraceError::TooManyMalformed { .. })
        ));
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            parse_traces(Path::new("/nonexistent/file.csv")),
            Err(TraceError::Unreadable { .. })
        ));
    }

    #[test]
    fn round_trips_through_serialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trips = synth_traces(25, &SynthConfig::default(), &mut rng);
        let f = tempfile::NamedTempFile::new().unwrap();
        serialize_traces(&trips, f.path()).unwrap();
        let parsed = parse_traces(f.path()).unwrap();
        assert_eq!(parsed.malformed_rows, 0);
        assert_eq!(parsed.trips, trips);
    }

    #[test]
    fn scheduling_places_starts_within_the_hour() {
        let trips = vec![Trip {
            trip_id: "a".into(),
            user_id: "u".into(),
            hour_of_day: 9,
            samples: vec![
                TraceSample {
                    offset_s: 0.0,
                    location: Location::new(40.0, -3.0),
                    speed: 3.0,
                },
                TraceSample {
                    offset_s: 60.0,
                    location: Location::new(40.001, -3.0),
                    speed: 3.0,
                },
            ],
        }];
        let day_epoch = 86_400.0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scheduled = schedule_trips(&trips, &mut rng, day_epoch, 0);
            let start = scheduled[0].start_time;
            assert!(start >= day_epoch + 9.0 * 3_600.0);
            assert!(start < day_epoch + 10.0 * 3_600.0);
            // Relative spacing preserved exactly.
            let events: Vec<_> = scheduled[0].events().collect();
            assert_eq!(events[1].timestamp - events[0].timestamp, 60.0);
        }
    }

    #[test]
    fn randomized_stream_is_sorted_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trips = synth_traces(40, &SynthConfig::default(), &mut rng);

        let events_a = randomize_starts(&trips, &mut ChaCha8Rng::seed_from_u64(4), 0.0);
        let events_b = randomize_starts(&trips, &mut ChaCha8Rng::seed_from_u64(4), 0.0);
        assert_eq!(events_a, events_b);
        assert!(events_a
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn synthetic_traces_respect_their_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = SynthConfig::default();
        let trips = synth_traces(200, &config, &mut rng);
        assert_eq!(trips.len(), 200);
        for trip in &trips {
            assert!(trip.duration_s() >= 300.0 && trip.duration_s() <= 2_400.0);
            assert!((8..20).contains(&trip.hour_of_day));
            let mean_speed =
                trip.samples.iter().map(|s| s.speed).sum::<f64>() / trip.samples.len() as f64;
            assert!((2.5..=6.5).contains(&mean_speed));
            for s in &trip.samples {
                // Chords of the disk stay inside it; allow interpolation
                // rounding at micrometre scale.
                assert!(geo::distance(config.center, s.location) <= config.radius_m + 1e-3);
            }
        }
    }

    #[test]
    fn generates_the_requested_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trips = synth_traces(8_500, &SynthConfig::default(), &mut rng);
        assert_eq!(trips.len(), 8_500);
    }

    #[test]
    fn parses_task_replay_files() {
        let f = write_file(
            "spawn_s,origin_lat,origin_lon,dest_lat,dest_lon\n60,40.0,-3.0,40.01,-3.0\n30,40.1,-3.1,40.11,-3.1\n",
        );
        let tasks = parse_tasks(f.path()).unwrap();
        assert_eq!(tasks.len(), 2);
        // Sorted by spawn time.
        assert_eq!(tasks[0].spawn_s, 30.0);
        assert_eq!(tasks[1].spawn_s, 60.0);
    }
}
