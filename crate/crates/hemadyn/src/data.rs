//! Domain data types, CSV ingestion, log transformation, cycle-based
//! train/test splitting and patient grouping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean observations per recorded cycle at or above which a series counts
/// as dense.
pub const DEFAULT_DENSITY_THRESHOLD: f64 = 3.0;

/// Minimum number of cycles with more than one observation required for a
/// patient to be included.
pub const MIN_INFORMATIVE_CYCLES: usize = 4;

/// A single platelet measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Days since therapy start.
    pub time: f64,
    /// Platelet count, cells per liter. Strictly positive so the log
    /// transform is defined.
    pub platelet_count: f64,
}

impl Observation {
    pub fn new(time: f64, platelet_count: f64) -> Result<Self> {
        if !(time >= 0.0) {
            return Err(Error::Invalid(format!("negative observation time {time}")));
        }
        if !(platelet_count > 0.0) {
            return Err(Error::Invalid(format!(
                "non-positive count {platelet_count} at time {time}"
            )));
        }
        Ok(Self { time, platelet_count })
    }

    /// Observation day on the integer evaluation grid.
    pub fn day(&self) -> i64 {
        self.time.round() as i64
    }
}

/// Treatment events and cycle structure for one patient.
///
/// Events carry a relative dose where 1 encodes the standard dose. Events
/// falling on the same day are merged by summing their doses, so the drug
/// effect is applied exactly once per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSchedule {
    /// (day, relative dose), sorted by day, one entry per day.
    pub events: Vec<(i64, f64)>,
    /// Start day of every cycle, strictly increasing.
    pub cycle_starts: Vec<i64>,
    /// Uniform cycle length, 14 or 21 days.
    pub cycle_length: i64,
}

impl TreatmentSchedule {
    pub fn new(events: Vec<(i64, f64)>, cycle_starts: Vec<i64>, cycle_length: i64) -> Result<Self> {
        if cycle_starts.is_empty() {
            return Err(Error::Invalid("schedule has no cycle starts".into()));
        }
        if !cycle_starts.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invalid("cycle starts not strictly increasing".into()));
        }
        if cycle_length != 14 && cycle_length != 21 {
            return Err(Error::Invalid(format!(
                "cycle length {cycle_length} not in {{14, 21}}"
            )));
        }
        let mut merged: BTreeMap<i64, f64> = BTreeMap::new();
        for (day, dose) in events {
            if dose < 0.0 {
                return Err(Error::Invalid(format!("negative dose on day {day}")));
            }
            if day < cycle_starts[0] {
                return Err(Error::Invalid(format!(
                    "event day {day} before first cycle start {}",
                    cycle_starts[0]
                )));
            }
            *merged.entry(day).or_insert(0.0) += dose;
        }
        Ok(Self {
            events: merged.into_iter().collect(),
            cycle_starts,
            cycle_length,
        })
    }

    /// Relative dose administered on `day`, 0 off treatment days.
    pub fn relative_dose(&self, day: i64) -> f64 {
        match self.events.binary_search_by_key(&day, |e| e.0) {
            Ok(i) => self.events[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn n_cycles(&self) -> usize {
        self.cycle_starts.len()
    }

    pub fn first_event_day(&self) -> Option<i64> {
        self.events.first().map(|e| e.0)
    }

    pub fn last_event_day(&self) -> Option<i64> {
        self.events.last().map(|e| e.0)
    }

    /// Index of the cycle containing `time`, or None before the first cycle.
    pub fn cycle_of(&self, time: f64) -> Option<usize> {
        let mut cycle = None;
        for (i, &s) in self.cycle_starts.iter().enumerate() {
            if time >= s as f64 {
                cycle = Some(i);
            }
        }
        cycle
    }
}

/// Patient group: data density (dense/sparse) crossed with cycle length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    De14,
    De21,
    Sp14,
    Sp21,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Group::De14 => "De14",
            Group::De21 => "De21",
            Group::Sp14 => "Sp14",
            Group::Sp21 => "Sp21",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Sorted by time, no duplicate times.
    pub observations: Vec<Observation>,
    pub schedule: TreatmentSchedule,
    pub group: Group,
}

impl PatientRecord {
    /// Builds a record, enforcing ordering and the inclusion criterion
    /// (at least four cycles with more than one observation each).
    pub fn new(id: String, observations: Vec<Observation>, schedule: TreatmentSchedule) -> Result<Self> {
        if !observations.windows(2).all(|w| w[0].time < w[1].time) {
            return Err(Error::PatientRejected {
                id,
                reason: "observations not strictly increasing in time".into(),
            });
        }
        let mut per_cycle = vec![0usize; schedule.n_cycles()];
        for obs in &observations {
            if let Some(c) = schedule.cycle_of(obs.time) {
                per_cycle[c] += 1;
            }
        }
        let informative = per_cycle.iter().filter(|&&n| n > 1).count();
        if informative < MIN_INFORMATIVE_CYCLES {
            return Err(Error::PatientRejected {
                id,
                reason: format!(
                    "only {informative} cycles with more than one observation \
                     (need {MIN_INFORMATIVE_CYCLES}); per-cycle counts {per_cycle:?}"
                ),
            });
        }
        let group = classify_group(&schedule, observations.len(), DEFAULT_DENSITY_THRESHOLD);
        Ok(Self { id, observations, schedule, group })
    }

    /// First observation as log count, used as ARX-GRU baseline.
    pub fn baseline_log(&self) -> f64 {
        self.observations[0].platelet_count.ln()
    }

    pub fn last_observation_day(&self) -> i64 {
        self.observations.last().map(|o| o.day()).unwrap_or(0)
    }
}

/// Density/cycle-length classification. Pure in
/// (cycle_length, mean observations per cycle); the threshold is inclusive
/// so a mean of exactly `threshold` counts as dense.
pub fn classify_group(schedule: &TreatmentSchedule, n_obs: usize, threshold: f64) -> Group {
    let mean_per_cycle = n_obs as f64 / schedule.n_cycles() as f64;
    let dense = mean_per_cycle >= threshold;
    match (dense, schedule.cycle_length) {
        (true, 14) => Group::De14,
        (true, _) => Group::De21,
        (false, 14) => Group::Sp14,
        (false, _) => Group::Sp21,
    }
}

/// Train/test partition at a cycle boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSplit {
    pub n_train_cycles: usize,
    pub train_obs: Vec<Observation>,
    pub test_obs: Vec<Observation>,
    /// Start day of cycle `n_train_cycles + 1`, the partition boundary.
    pub boundary_day: i64,
}

/// Splits observations at the start of cycle `n_train + 1`: training data
/// is everything strictly before that day.
pub fn split_by_cycles(record: &PatientRecord, n_train: usize) -> Result<CycleSplit> {
    let n_cycles = record.schedule.n_cycles();
    if n_train < 1 || n_train >= n_cycles {
        return Err(Error::Invalid(format!(
            "n_train = {n_train} out of range for a {n_cycles}-cycle record"
        )));
    }
    let boundary = record.schedule.cycle_starts[n_train];
    let (train, test): (Vec<_>, Vec<_>) = record
        .observations
        .iter()
        .partition(|o| o.time < boundary as f64);
    if test.is_empty() {
        return Err(Error::Invalid(format!(
            "no test observations after day {boundary} (nothing to predict)"
        )));
    }
    if train.is_empty() {
        return Err(Error::Invalid(format!(
            "no training observations before day {boundary}"
        )));
    }
    Ok(CycleSplit {
        n_train_cycles: n_train,
        train_obs: train,
        test_obs: test,
        boundary_day: boundary,
    })
}

/// Replaces every count by its natural log. The inverse is
/// [`exp_transform`].
pub fn log_transform(record: &PatientRecord) -> PatientRecord {
    map_counts(record, f64::ln)
}

pub fn exp_transform(record: &PatientRecord) -> PatientRecord {
    map_counts(record, f64::exp)
}

fn map_counts(record: &PatientRecord, f: impl Fn(f64) -> f64) -> PatientRecord {
    let mut out = record.clone();
    for obs in &mut out.observations {
        obs.platelet_count = f(obs.platelet_count);
    }
    out
}

#[derive(Debug, Deserialize)]
struct ObsRow {
    patient_id: String,
    time_days: f64,
    platelet_count_per_l: f64,
}

#[derive(Debug, Deserialize)]
struct ScheduleRow {
    patient_id: String,
    day: i64,
    relative_dose: f64,
    cycle_start: u8,
}

/// Reads the observation and schedule CSVs and assembles one record per
/// patient id. Patients violating the inclusion criteria are rejected with
/// a diagnostic.
pub fn ingest_patients(obs_file: &Path, schedule_file: &Path) -> Result<Vec<PatientRecord>> {
    let mut obs_by_id: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(obs_file)?;
    for (i, row) in rdr.deserialize::<ObsRow>().enumerate() {
        let line = i + 2; // header is line 1
        let row = row.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if !(row.platelet_count_per_l > 0.0) {
            return Err(Error::Parse {
                line,
                msg: format!("non-positive count for patient {}", row.patient_id),
            });
        }
        let obs = Observation::new(row.time_days, row.platelet_count_per_l)
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        obs_by_id.entry(row.patient_id).or_default().push(obs);
    }

    let mut sched_by_id: BTreeMap<String, (Vec<(i64, f64)>, Vec<i64>)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(schedule_file)?;
    for (i, row) in rdr.deserialize::<ScheduleRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if row.cycle_start > 1 {
            return Err(Error::Parse { line, msg: "cycle_start must be 0 or 1".into() });
        }
        let entry = sched_by_id.entry(row.patient_id).or_default();
        if row.relative_dose > 0.0 {
            entry.0.push((row.day, row.relative_dose));
        }
        if row.cycle_start == 1 {
            entry.1.push(row.day);
        }
    }

    let mut records = Vec::new();
    for (id, mut obs) in obs_by_id {
        let (events, mut cycle_starts) = sched_by_id
            .remove(&id)
            .ok_or_else(|| Error::PatientRejected {
                id: id.clone(),
                reason: "no schedule rows".into(),
            })?;
        cycle_starts.sort_unstable();
        cycle_starts.dedup();
        let cycle_length = infer_cycle_length(&id, &cycle_starts)?;
        let schedule = TreatmentSchedule::new(events, cycle_starts, cycle_length)?;
        obs.sort_by(|a, b| a.time.total_cmp(&b.time));
        if obs.windows(2).any(|w| w[0].time == w[1].time) {
            return Err(Error::PatientRejected {
                id,
                reason: "duplicate observation times".into(),
            });
        }
        records.push(PatientRecord::new(id, obs, schedule)?);
    }
    Ok(records)
}

/// Nominal cycle length (14 or 21) from consecutive cycle starts. Clinical
/// schedules jitter by a few days, so the nominal length is whichever of 14
/// or 21 is closer to the mean spacing; any single gap more than 5 days off
/// the nominal rejects the patient.
pub(crate) fn infer_cycle_length(id: &str, cycle_starts: &[i64]) -> Result<i64> {
    if cycle_starts.len() < 2 {
        return Err(Error::PatientRejected {
            id: id.into(),
            reason: "fewer than two cycle starts; cannot infer cycle length".into(),
        });
    }
    let span = (cycle_starts[cycle_starts.len() - 1] - cycle_starts[0]) as f64;
    let mean = span / (cycle_starts.len() - 1) as f64;
    let nominal = if (mean - 14.0).abs() <= (mean - 21.0).abs() { 14 } else { 21 };
    if (mean - nominal as f64).abs() > 3.5 {
        return Err(Error::PatientRejected {
            id: id.into(),
            reason: format!("mean cycle spacing {mean:.1} days matches neither 14 nor 21"),
        });
    }
    if let Some(bad) = cycle_starts
        .windows(2)
        .map(|w| w[1] - w[0])
        .find(|gap| (gap - nominal).abs() > 5)
    {
        return Err(Error::PatientRejected {
            id: id.into(),
            reason: format!("cycle spacing {bad} days too far from nominal {nominal}"),
        });
    }
    Ok(nominal)
}

/// Writes records back out in the ingest CSV formats.
pub fn write_patients(records: &[PatientRecord], obs_file: &Path, schedule_file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(obs_file)?;
    w.write_record(["patient_id", "time_days", "platelet_count_per_l"])?;
    for r in records {
        for o in &r.observations {
            w.write_record([r.id.as_str(), &format!("{}", o.time), &format!("{}", o.platelet_count)])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(schedule_file)?;
    w.write_record(["patient_id", "day", "relative_dose", "cycle_start"])?;
    for r in records {
        let mut days: BTreeMap<i64, (f64, u8)> = BTreeMap::new();
        for &(day, dose) in &r.schedule.events {
            days.entry(day).or_insert((0.0, 0)).0 = dose;
        }
        for &s in &r.schedule.cycle_starts {
            days.entry(s).or_insert((0.0, 0)).1 = 1;
        }
        for (day, (dose, start)) in days {
            w.write_record([r.id.as_str(), &day.to_string(), &dose.to_string(), &start.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn chop14_schedule(n_cycles: usize) -> TreatmentSchedule {
        let cycle_starts: Vec<i64> = (0..n_cycles as i64).map(|c| 14 * c).collect();
        let events = cycle_starts
            .iter()
            .flat_map(|&s| (s..s + 5).map(|d| (d, 1.0)))
            .collect();
        TreatmentSchedule::new(events, cycle_starts, 14).unwrap()
    }

    fn dense_record(n_cycles: usize, per_cycle: usize) -> PatientRecord {
        let schedule = chop14_schedule(n_cycles);
        let mut observations = Vec::new();
        for c in 0..n_cycles as i64 {
            for k in 0..per_cycle as i64 {
                observations.push(
                    Observation::new((14 * c + 1 + 3 * k) as f64, 250e9).unwrap(),
                );
            }
        }
        PatientRecord::new("p1".into(), observations, schedule).unwrap()
    }

    #[test]
    fn log_transform_roundtrip_and_values() {
        let rec = dense_record(6, 4);
        let mut rec = rec;
        rec.observations[0].platelet_count = std::f64::consts::E;
        rec.observations[1].platelet_count = 270e9;
        let logged = log_transform(&rec);
        assert!((logged.observations[0].platelet_count - 1.0).abs() < 1e-12);
        assert!((logged.observations[1].platelet_count - 26.32).abs() < 0.01);
        let back = exp_transform(&logged);
        for (a, b) in back.observations.iter().zip(&rec.observations) {
            assert!((a.platelet_count / b.platelet_count - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_boundary_at_cycle_start() {
        let rec = dense_record(6, 4);
        let split = split_by_cycles(&rec, 3).unwrap();
        assert_eq!(split.boundary_day, 42); // 3 x 14
        assert!(split.train_obs.iter().all(|o| o.time < 42.0));
        assert!(split.test_obs.iter().all(|o| o.time >= 42.0));
        assert_eq!(
            split.train_obs.len() + split.test_obs.len(),
            rec.observations.len()
        );

        let split = split_by_cycles(&rec, 1).unwrap();
        assert!(split.train_obs.iter().all(|o| o.time < 14.0));
    }

    #[test]
    fn split_rejects_full_range() {
        let rec = dense_record(6, 4);
        assert!(split_by_cycles(&rec, 6).is_err());
        assert!(split_by_cycles(&rec, 0).is_err());
    }

    #[test]
    fn group_classification() {
        let s14 = chop14_schedule(6);
        assert_eq!(classify_group(&s14, 24, 3.0), Group::De14); // mean 4
        assert_eq!(classify_group(&s14, 18, 3.0), Group::De14); // exactly 3 -> De
        assert_eq!(classify_group(&s14, 12, 3.0), Group::Sp14); // mean 2

        let s21 = TreatmentSchedule::new(
            vec![(0, 1.0), (21, 1.0), (42, 1.0), (63, 1.0)],
            vec![0, 21, 42, 63],
            21,
        )
        .unwrap();
        assert_eq!(classify_group(&s21, 8, 3.0), Group::Sp21);
        assert_eq!(classify_group(&s21, 16, 3.0), Group::De21);
    }

    #[test]
    fn inclusion_criterion_rejects_three_cycles() {
        let schedule = chop14_schedule(6);
        // observations in only 3 cycles
        let observations: Vec<Observation> = (0..3)
            .flat_map(|c| {
                [
                    Observation::new((14 * c + 2) as f64, 250e9).unwrap(),
                    Observation::new((14 * c + 9) as f64, 200e9).unwrap(),
                ]
            })
            .collect();
        let err = PatientRecord::new("p".into(), observations, schedule).unwrap_err();
        assert!(matches!(err, Error::PatientRejected { .. }));
    }

    #[test]
    fn same_day_events_merge_doses() {
        let s = TreatmentSchedule::new(
            vec![(0, 0.5), (0, 0.5), (14, 1.0), (28, 1.0), (42, 1.0)],
            vec![0, 14, 28, 42],
            14,
        )
        .unwrap();
        assert_eq!(s.relative_dose(0), 1.0);
        assert_eq!(s.events.iter().filter(|e| e.0 == 0).count(), 1);
    }

    #[test]
    fn ingest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let obs_path = dir.path().join("obs.csv");
        let sched_path = dir.path().join("sched.csv");

        let recs = vec![dense_record(6, 4), {
            let mut r = dense_record(5, 2);
            r.id = "p2".into();
            r
        }];
        write_patients(&recs, &obs_path, &sched_path).unwrap();
        let back = ingest_patients(&obs_path, &sched_path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back, {
            let mut sorted = recs.clone();
            sorted.sort_by(|a, b| a.id.cmp(&b.id));
            sorted
        });

        // zero count -> parse error with line number
        let mut f = std::fs::File::create(&obs_path).unwrap();
        writeln!(f, "patient_id,time_days,platelet_count_per_l").unwrap();
        writeln!(f, "p1,1.0,0.0").unwrap();
        drop(f);
        let err = ingest_patients(&obs_path, &sched_path).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("non-positive"));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
