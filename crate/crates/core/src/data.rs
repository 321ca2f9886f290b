//! Patient data: visit histories, one (possibly censored) event per patient,
//! and the plain-CSV formats the tools exchange.
//!
//! `visits.csv` has columns `patient_id,time_years,y_0,...,y_{K-1}`;
//! `events.csv` has `patient_id,event_time_years,event_code` with code 0 for
//! censoring and code `l` (1-based) for event `l`. All times are in years and
//! floats are written with 17 significant digits so that re-reading a file
//! reproduces the values bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::RandomEffects;
use crate::params_io::fmt_float;

/// One visit: a time and the K outcome values, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub time: f64,
    pub values: Vec<f64>,
}

/// One patient: sorted visits plus the first observed event or the censoring
/// time (`event_code` 0 means censored, `l >= 1` means event `l` observed).
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub visits: Vec<Visit>,
    pub event_time: f64,
    pub event_code: usize,
}

impl PatientRecord {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    pub fn first_visit_time(&self) -> f64 {
        self.visits.first().map(|v| v.time).unwrap_or(f64::NAN)
    }

    pub fn last_visit_time(&self) -> f64 {
        self.visits.last().map(|v| v.time).unwrap_or(f64::NAN)
    }

    pub fn event_observed(&self) -> bool {
        self.event_code > 0
    }
}

/// A cohort with a fixed number of outcomes and competing events.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub n_outcomes: usize,
    pub n_events: usize,
}

impl Dataset {
    pub fn new(patients: Vec<PatientRecord>, n_outcomes: usize, n_events: usize) -> Result<Self> {
        let ds = Self { patients, n_outcomes, n_events };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn total_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    /// Observation count per outcome; every visit carries all K outcomes.
    pub fn n_obs_per_outcome(&self) -> Vec<usize> {
        vec![self.total_visits(); self.n_outcomes]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(Error::InvalidInput("dataset has no patients".into()));
        }
        for p in &self.patients {
            if p.visits.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "patient {} has {} visit(s); at least 2 are required",
                    p.id,
                    p.visits.len()
                )));
            }
            let mut prev = f64::NEG_INFINITY;
            for v in &p.visits {
                if v.time <= prev {
                    return Err(Error::InvalidInput(format!(
                        "patient {}: visit times must be strictly increasing",
                        p.id
                    )));
                }
                prev = v.time;
                if v.values.len() != self.n_outcomes {
                    return Err(Error::DimensionMismatch(format!(
                        "patient {}: visit has {} values, expected {}",
                        p.id,
                        v.values.len(),
                        self.n_outcomes
                    )));
                }
                for &y in &v.values {
                    if !(y > 0.0 && y < 1.0) {
                        return Err(Error::InvalidInput(format!(
                            "patient {}: outcome value {} outside the open interval (0, 1)",
                            p.id, y
                        )));
                    }
                }
            }
            if !(p.event_time > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "patient {}: event time must be > 0",
                    p.id
                )));
            }
            if p.event_code > self.n_events {
                return Err(Error::InvalidInput(format!(
                    "patient {}: event code {} exceeds the number of events {}",
                    p.id, p.event_code, self.n_events
                )));
            }
        }
        Ok(())
    }

    // -- CSV ------------------------------------------------------------------

    /// Write `visits.csv` and `events.csv` into `dir`.
    pub fn write_csv_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut visits = String::new();
        visits.push_str("patient_id,time_years");
        for k in 0..self.n_outcomes {
            visits.push_str(&format!(",y_{k}"));
        }
        visits.push('\n');
        for p in &self.patients {
            for v in &p.visits {
                visits.push_str(&p.id);
                visits.push(',');
                visits.push_str(&fmt_float(v.time));
                for &y in &v.values {
                    visits.push(',');
                    visits.push_str(&fmt_float(y));
                }
                visits.push('\n');
            }
        }
        fs::write(dir.join("visits.csv"), visits)?;

        let mut events = String::from("patient_id,event_time_years,event_code\n");
        for p in &self.patients {
            events.push_str(&format!("{},{},{}\n", p.id, fmt_float(p.event_time), p.event_code));
        }
        fs::write(dir.join("events.csv"), events)?;
        Ok(())
    }

    /// Read a dataset from `dir/visits.csv` and `dir/events.csv`. The number
    /// of outcomes is taken from the visits header; `n_events` comes from the
    /// caller (it is a structural hyperparameter, not a property of one file).
    pub fn read_csv_dir(dir: &Path, n_events: usize) -> Result<Self> {
        let visits_path = dir.join("visits.csv");
        let events_path = dir.join("events.csv");
        let visits_text = fs::read_to_string(&visits_path)?;
        let events_text = fs::read_to_string(&events_path)?;

        let mut lines = visits_text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            path: visits_path.display().to_string(),
            line: 1,
            field: "header".into(),
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "patient_id" || cols[1] != "time_years" {
            return Err(Error::Parse {
                path: visits_path.display().to_string(),
                line: 1,
                field: "header".into(),
                message: "expected patient_id,time_years,y_0,...".into(),
            });
        }
        let n_outcomes = cols.len() - 2;

        // Accumulate visits per patient in file order.
        let mut order: Vec<String> = Vec::new();
        let mut visit_map: std::collections::HashMap<String, Vec<Visit>> =
            std::collections::HashMap::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    path: visits_path.display().to_string(),
                    line: idx + 1,
                    field: "row".into(),
                    message: format!("expected {} fields, found {}", cols.len(), fields.len()),
                });
            }
            let id = fields[0].to_string();
            let time = parse_float(&visits_path, idx + 1, "time_years", fields[1])?;
            let mut values = Vec::with_capacity(n_outcomes);
            for k in 0..n_outcomes {
                values.push(parse_float(&visits_path, idx + 1, &format!("y_{k}"), fields[2 + k])?);
            }
            if !visit_map.contains_key(&id) {
                order.push(id.clone());
            }
            visit_map.entry(id).or_default().push(Visit { time, values });
        }

        let mut event_map: std::collections::HashMap<String, (f64, usize)> =
            std::collections::HashMap::new();
        for (idx, line) in events_text.lines().enumerate() {
            if idx == 0 {
                if line != "patient_id,event_time_years,event_code" {
                    return Err(Error::Parse {
                        path: events_path.display().to_string(),
                        line: 1,
                        field: "header".into(),
                        message: "expected patient_id,event_time_years,event_code".into(),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: events_path.display().to_string(),
                    line: idx + 1,
                    field: "row".into(),
                    message: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let time = parse_float(&events_path, idx + 1, "event_time_years", fields[1])?;
            let code: usize = fields[2].trim().parse().map_err(|_| Error::Parse {
                path: events_path.display().to_string(),
                line: idx + 1,
                field: "event_code".into(),
                message: format!("not an integer: {:?}", fields[2]),
            })?;
            event_map.insert(fields[0].to_string(), (time, code));
        }

        let mut patients = Vec::with_capacity(order.len());
        for id in order {
            let visits = visit_map.remove(&id).expect("id collected from map");
            let (event_time, event_code) = *event_map.get(&id).ok_or_else(|| Error::Parse {
                path: events_path.display().to_string(),
                line: 0,
                field: "patient_id".into(),
                message: format!("patient {id} has visits but no event row"),
            })?;
            patients.push(PatientRecord { id, visits, event_time, event_code });
        }
        Dataset::new(patients, n_outcomes, n_events)
    }
}

fn parse_float(path: &Path, line: usize, field: &str, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        field: field.to_string(),
        message: format!("not a number: {raw:?}"),
    })
}

// ---------------------------------------------------------------------------
// Random-effect CSVs (ground truth and estimates)
// ---------------------------------------------------------------------------

/// Write a random-effects table `id,xi,tau,s_1..s_Ns[,w_0..,u_0..]`. The
/// space/survival-shift columns are included when provided.
#[allow(clippy::type_complexity)]
pub fn write_random_effects_csv(
    path: &Path,
    ids: &[String],
    re: &[RandomEffects],
    shifts: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Result<()> {
    if ids.len() != re.len() {
        return Err(Error::DimensionMismatch("ids and random effects differ in length".into()));
    }
    let ns = re.first().map(|r| r.sources.len()).unwrap_or(0);
    let mut out = String::from("id,xi,tau");
    for m in 0..ns {
        out.push_str(&format!(",s_{}", m + 1));
    }
    if let Some((w, u)) = shifts {
        for k in 0..w.first().map(|x| x.len()).unwrap_or(0) {
            out.push_str(&format!(",w_{k}"));
        }
        for l in 0..u.first().map(|x| x.len()).unwrap_or(0) {
            out.push_str(&format!(",u_{l}"));
        }
    }
    out.push('\n');
    for (i, (id, r)) in ids.iter().zip(re).enumerate() {
        out.push_str(id);
        out.push(',');
        out.push_str(&fmt_float(r.xi));
        out.push(',');
        out.push_str(&fmt_float(r.tau));
        for &s in &r.sources {
            out.push(',');
            out.push_str(&fmt_float(s));
        }
        if let Some((w, u)) = shifts {
            for &v in &w[i] {
                out.push(',');
                out.push_str(&fmt_float(v));
            }
            for &v in &u[i] {
                out.push(',');
                out.push_str(&fmt_float(v));
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a random-effects table written by [`write_random_effects_csv`];
/// returns ids, the random effects, and any shift columns present.
#[allow(clippy::type_complexity)]
pub fn read_random_effects_csv(
    path: &Path,
) -> Result<(Vec<String>, Vec<RandomEffects>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        field: "header".into(),
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let ns = cols.iter().filter(|c| c.starts_with("s_")).count();
    let nw = cols.iter().filter(|c| c.starts_with("w_")).count();
    let nu = cols.iter().filter(|c| c.starts_with("u_")).count();
    let mut ids = Vec::new();
    let mut res = Vec::new();
    let mut ws = Vec::new();
    let mut us = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                field: "row".into(),
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        ids.push(fields[0].to_string());
        let xi = parse_float(path, idx + 1, "xi", fields[1])?;
        let tau = parse_float(path, idx + 1, "tau", fields[2])?;
        let mut sources = Vec::with_capacity(ns);
        for m in 0..ns {
            sources.push(parse_float(path, idx + 1, &format!("s_{}", m + 1), fields[3 + m])?);
        }
        let mut w = Vec::with_capacity(nw);
        for k in 0..nw {
            w.push(parse_float(path, idx + 1, &format!("w_{k}"), fields[3 + ns + k])?);
        }
        let mut u = Vec::with_capacity(nu);
        for l in 0..nu {
            u.push(parse_float(path, idx + 1, &format!("u_{l}"), fields[3 + ns + nw + l])?);
        }
        res.push(RandomEffects { xi, tau, sources });
        ws.push(w);
        us.push(u);
    }
    Ok((ids, res, ws, us))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        Dataset::new(
            vec![
                PatientRecord {
                    id: "p0".into(),
                    visits: vec![
                        Visit { time: 1.0, values: vec![0.1, 0.2] },
                        Visit { time: 1.5, values: vec![0.15, 0.3] },
                    ],
                    event_time: 2.0,
                    event_code: 1,
                },
                PatientRecord {
                    id: "p1".into(),
                    visits: vec![
                        Visit { time: 0.5, values: vec![0.4, 0.5] },
                        Visit { time: 0.9, values: vec![0.45, 0.55] },
                        Visit { time: 1.4, values: vec![0.5, 0.6] },
                    ],
                    event_time: 1.4,
                    event_code: 0,
                },
            ],
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_bad_records() {
        let mut ds = tiny_dataset();
        ds.patients[0].visits[1].time = 1.0; // not strictly increasing
        assert!(ds.validate().is_err());

        let mut ds = tiny_dataset();
        ds.patients[0].visits[0].values[0] = 1.0; // boundary excluded
        assert!(ds.validate().is_err());

        let mut ds = tiny_dataset();
        ds.patients[1].visits.truncate(1);
        assert!(ds.validate().is_err());

        let mut ds = tiny_dataset();
        ds.patients[0].event_code = 3;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("latage_data_test_{}", std::process::id()));
        let ds = tiny_dataset();
        ds.write_csv_dir(&dir).unwrap();
        let back = Dataset::read_csv_dir(&dir, 2).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_errors_name_the_offending_cell() {
        let dir = std::env::temp_dir().join(format!("latage_data_bad_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("visits.csv"), "patient_id,time_years,y_0\np0,abc,0.5\n").unwrap();
        fs::write(dir.join("events.csv"), "patient_id,event_time_years,event_code\np0,1.0,0\n")
            .unwrap();
        let err = Dataset::read_csv_dir(&dir, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "message should name the row: {msg}");
        assert!(msg.contains("time_years"), "message should name the column: {msg}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
