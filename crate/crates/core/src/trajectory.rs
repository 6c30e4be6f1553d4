//! Multi-individual trajectory data: the batch the critic and actor learn from.
//!
//! Each individual contributes one trajectory of decision points
//! `t = 0..=T`. A decision point records the state, whether treatment was
//! deliverable, the action taken, the reward that followed it, and the
//! behavior policy's probability of the action it actually took. When the
//! state after the last decision (`S_{T+1}`) was observed it is stored as the
//! trajectory's terminal state.
//!
//! Two on-disk formats are supported. CSV uses the header
//! `id,t,avail,action,reward,bprob,<state columns...>` with one row per
//! decision point; a trailing row with an empty `action` and `t = T+1` carries
//! the terminal state. JSON is an array of trajectory objects with the same
//! fields.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decision point of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    #[serde(rename = "avail")]
    pub available: bool,
    pub action: usize,
    /// Reward observed after the action (`R_{t+1}`).
    pub reward: f64,
    /// Behavior-policy probability of the action that was taken.
    #[serde(rename = "bprob")]
    pub behavior_prob: f64,
}

impl Step {
    /// True when the recorded behavior probability is admissible: strictly
    /// inside (0, 1), or exactly 1 for the forced no-treatment action at an
    /// unavailable decision point.
    pub fn behavior_prob_ok(&self) -> bool {
        let p = self.behavior_prob;
        (p > 0.0 && p < 1.0) || (!self.available && self.action == 0 && p == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_state: Option<Vec<f64>>,
}

impl Trajectory {
    /// Index of the last decision point, `T`.
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// Number of transitions usable by the critic: `T + 1` when the terminal
    /// state was recorded, `T` otherwise.
    pub fn n_transitions(&self) -> usize {
        if self.terminal_state.is_some() {
            self.steps.len()
        } else {
            self.steps.len().saturating_sub(1)
        }
    }

    /// State following decision point `t`, if recorded.
    pub fn next_state(&self, t: usize) -> Option<&[f64]> {
        if t + 1 < self.steps.len() {
            Some(&self.steps[t + 1].state)
        } else if t + 1 == self.steps.len() {
            self.terminal_state.as_deref()
        } else {
            None
        }
    }

    /// Iterates `(t, step, next_state)` over every usable transition.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, &Step, &[f64])> + '_ {
        (0..self.n_transitions()).map(move |t| (t, &self.steps[t], self.next_state(t).expect("transition in range")))
    }
}

/// A batch of independent trajectories sharing one state layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub state_dim: usize,
    pub n_actions: usize,
    pub state_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and rejects it unless every invariant holds.
    pub fn new(trajectories: Vec<Trajectory>, n_actions: usize, state_names: Vec<String>) -> Result<Self> {
        let state_dim = state_names.len();
        let d = Dataset {
            trajectories,
            state_dim,
            n_actions,
            state_names,
        };
        let report = d.validate();
        if !report.passed() {
            return Err(Error::InvalidData(report.to_string()));
        }
        Ok(d)
    }

    /// Default state column names `s1..sP`.
    pub fn default_state_names(dim: usize) -> Vec<String> {
        (1..=dim).map(|j| format!("s{j}")).collect()
    }

    pub fn n_individuals(&self) -> usize {
        self.trajectories.len()
    }

    /// Last decision index `T` (trajectories share a common length).
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::horizon)
    }

    pub fn n_decision_points(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    /// All decision-point states in individual-major, time-minor order.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.trajectories.iter().flat_map(|tr| tr.steps.iter().map(|s| s.state.as_slice()))
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> + '_ {
        self.trajectories.iter().flat_map(|tr| tr.steps.iter())
    }

    pub fn has_gating(&self) -> bool {
        self.steps().any(|s| !s.available)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    /// Sub-dataset made of the given individuals, in the given order.
    pub fn subset(&self, individuals: &[usize]) -> Dataset {
        Dataset {
            trajectories: individuals.iter().map(|&i| self.trajectories[i].clone()).collect(),
            state_dim: self.state_dim,
            n_actions: self.n_actions,
            state_names: self.state_names.clone(),
        }
    }

    /// Checks every data-model invariant and counts the violations.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let dim = self.state_dim;

        let mut bprob = Check::new("behavior probability in (0,1)");
        let mut avail = Check::new("unavailable points take action 0");
        let mut action = Check::new("action in {0,...,K-1}");
        let mut finite = Check::new("finite values");
        let mut dims = Check::new("consistent state dimension");
        let mut len = Check::new("trajectory length >= 2");
        let mut equal = Check::new("equal trajectory lengths");

        let expected_len = self.trajectories.first().map(|t| t.steps.len());
        for tr in &self.trajectories {
            len.record(tr.steps.len() >= 2);
            equal.record(Some(tr.steps.len()) == expected_len);
            for s in &tr.steps {
                bprob.record(s.behavior_prob_ok());
                avail.record(s.available || s.action == 0);
                action.record(s.action < self.n_actions);
                finite.record(s.reward.is_finite() && s.state.iter().all(|x| x.is_finite()));
                dims.record(s.state.len() == dim);
            }
            if let Some(term) = &tr.terminal_state {
                dims.record(term.len() == dim);
                finite.record(term.iter().all(|x| x.is_finite()));
            }
        }
        let mut nonempty = Check::new("at least one individual");
        nonempty.record(!self.trajectories.is_empty());
        let mut actions = Check::new("at least two actions");
        actions.record(self.n_actions >= 2);

        report.checks = vec![nonempty, actions, bprob, avail, action, finite, dims, len, equal];
        report
    }
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub checked: usize,
    pub failures: usize,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check {
            name,
            checked: 0,
            failures: 0,
        }
    }

    fn record(&mut self, ok: bool) {
        self.checked += 1;
        if !ok {
            self.failures += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.failures == 0)
    }

    pub fn failures(&self, name: &str) -> Option<usize> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.failures)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| c.failures > 0)
            .map(|c| format!("{} ({} of {} failed)", c.name, c.failures, c.checked))
            .collect();
        if failed.is_empty() {
            write!(f, "all {} checks passed", self.checks.len())
        } else {
            write!(f, "{}", failed.join("; "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guesses the format from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

/// Loads a binary-action dataset.
pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    load_dataset_with_actions(path, format, 2)
}

pub fn load_dataset_with_actions(path: impl AsRef<Path>, format: DataFormat, n_actions: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        DataFormat::Csv => read_csv(reader, n_actions),
        DataFormat::Json => read_json(reader, n_actions),
    }
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        DataFormat::Csv => write_csv(d, &mut w)?,
        DataFormat::Json => write_json(d, &mut w)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const FIXED_COLUMNS: [&str; 6] = ["id", "t", "avail", "action", "reward", "bprob"];

pub fn write_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(d.state_names.iter().map(String::as_str))
        .collect();
    out.write_record(&header).map_err(csv_err)?;
    for tr in &d.trajectories {
        for (t, s) in tr.steps.iter().enumerate() {
            let mut rec = vec![
                tr.id.clone(),
                t.to_string(),
                u8::from(s.available).to_string(),
                s.action.to_string(),
                s.reward.to_string(),
                s.behavior_prob.to_string(),
            ];
            rec.extend(s.state.iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_err)?;
        }
        if let Some(term) = &tr.terminal_state {
            let mut rec = vec![
                tr.id.clone(),
                tr.steps.len().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ];
            rec.extend(term.iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::InvalidData(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(None, None, e.to_string())
}

pub fn read_csv<R: Read>(r: R, n_actions: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < FIXED_COLUMNS.len() + 1
        || header.iter().take(FIXED_COLUMNS.len()).ne(FIXED_COLUMNS.iter().copied())
    {
        return Err(Error::parse(
            None,
            None,
            format!("header must start with {} followed by state columns", FIXED_COLUMNS.join(",")),
        ));
    }
    let state_names: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Trajectory> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(None, None, format!("row {}: {e}", row + 2)))?;
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::parse(None, None, format!("row {}: missing id", row + 2)));
        }
        let t: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(Some(&id), None, format!("invalid time index '{}'", &rec[1])))?;
        let tr = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Trajectory {
                id: id.clone(),
                steps: Vec::new(),
                terminal_state: None,
            }
        });
        if tr.terminal_state.is_some() {
            return Err(Error::parse(Some(&id), Some(t), "row after the terminal state"));
        }
        if t != tr.steps.len() {
            return Err(Error::parse(
                Some(&id),
                Some(t),
                format!("expected time index {}", tr.steps.len()),
            ));
        }
        let state = rec
            .iter()
            .skip(FIXED_COLUMNS.len())
            .zip(&state_names)
            .map(|(v, name)| parse_real(v, &id, t, name))
            .collect::<Result<Vec<f64>>>()?;

        if rec[3].trim().is_empty() {
            // terminal row: everything but the state must be blank
            if (2..6).any(|c| !rec[c].trim().is_empty()) {
                return Err(Error::parse(Some(&id), Some(t), "terminal row must leave avail, reward and bprob empty"));
            }
            tr.terminal_state = Some(state);
            continue;
        }

        let available = match rec[2].trim() {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            "" => return Err(Error::parse(Some(&id), Some(t), "missing value in column avail")),
            other => return Err(Error::parse(Some(&id), Some(t), format!("invalid availability '{other}'"))),
        };
        let action: usize = rec[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(Some(&id), Some(t), format!("invalid action '{}'", &rec[3])))?;
        let reward = parse_real(&rec[4], &id, t, "reward")?;
        let behavior_prob = parse_real(&rec[5], &id, t, "bprob")?;
        let step = Step {
            state,
            available,
            action,
            reward,
            behavior_prob,
        };
        check_step(&step, &id, t, n_actions)?;
        tr.steps.push(step);
    }

    let trajectories = order.into_iter().map(|id| by_id.remove(&id).expect("id recorded")).collect();
    Dataset::new(trajectories, n_actions, state_names)
}

fn parse_real(v: &str, id: &str, t: usize, column: &str) -> Result<f64> {
    let v = v.trim();
    if v.is_empty() {
        return Err(Error::parse(Some(id), Some(t), format!("missing value in column {column}")));
    }
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::parse(Some(id), Some(t), format!("non-numeric value '{v}' in column {column}"))),
    }
}

fn check_step(s: &Step, id: &str, t: usize, n_actions: usize) -> Result<()> {
    if s.action >= n_actions {
        return Err(Error::parse(
            Some(id),
            Some(t),
            format!("action {} outside {{0,...,{}}}", s.action, n_actions - 1),
        ));
    }
    if !s.available && s.action != 0 {
        return Err(Error::parse(Some(id), Some(t), "unavailable decision point must take action 0"));
    }
    if !s.behavior_prob_ok() {
        return Err(Error::parse(Some(id), Some(t), "behavior probability must lie strictly in (0,1)"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonTrajectory {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_names: Option<Vec<String>>,
    steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal_state: Option<Vec<f64>>,
}

pub fn write_json<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let out: Vec<JsonTrajectory> = d
        .trajectories
        .iter()
        .map(|tr| JsonTrajectory {
            id: tr.id.clone(),
            state_names: Some(d.state_names.clone()),
            steps: tr.steps.clone(),
            terminal_state: tr.terminal_state.clone(),
        })
        .collect();
    serde_json::to_writer_pretty(w, &out).map_err(|e| Error::parse(None, None, e.to_string()))
}

pub fn read_json<R: Read>(r: R, n_actions: usize) -> Result<Dataset> {
    let raw: Vec<JsonTrajectory> = serde_json::from_reader(r).map_err(|e| Error::parse(None, None, e.to_string()))?;
    let mut state_names: Option<Vec<String>> = None;
    let mut trajectories = Vec::with_capacity(raw.len());
    for jt in raw {
        for (t, s) in jt.steps.iter().enumerate() {
            check_step(s, &jt.id, t, n_actions)?;
        }
        if let Some(names) = jt.state_names {
            match &state_names {
                Some(prev) if *prev != names => {
                    return Err(Error::parse(Some(&jt.id), None, "state_names differ between trajectories"));
                }
                _ => state_names = Some(names),
            }
        }
        trajectories.push(Trajectory {
            id: jt.id,
            steps: jt.steps,
            terminal_state: jt.terminal_state,
        });
    }
    let names = match state_names {
        Some(n) => n,
        None => {
            let dim = trajectories
                .first()
                .and_then(|t: &Trajectory| t.steps.first())
                .map_or(0, |s| s.state.len());
            Dataset::default_state_names(dim)
        }
    };
    Dataset::new(trajectories, n_actions, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(state: Vec<f64>, action: usize) -> Step {
        Step {
            state,
            available: true,
            action,
            reward: 1.0,
            behavior_prob: 0.5,
        }
    }

    fn two_by_three() -> &'static str {
        "id,t,avail,action,reward,bprob,s1\n\
         a,0,1,1,0.5,0.6,1.0\n\
         a,1,1,0,0.25,0.4,2.0\n\
         a,2,1,1,1.5,0.6,3.0\n\
         b,0,1,0,0.0,0.4,-1.0\n\
         b,1,0,0,1.0,1,0.5\n\
         b,2,1,1,2.0,0.6,0.25\n"
    }

    #[test]
    fn csv_shape() {
        let d = read_csv(two_by_three().as_bytes(), 2).unwrap();
        assert_eq!(d.n_individuals(), 2);
        assert_eq!(d.horizon(), 2);
        assert_eq!(d.state_dim, 1);
        assert!(d.has_gating());
        assert_eq!(d.trajectories[0].steps[1].state, vec![2.0]);
    }

    #[test]
    fn behavior_prob_one_rejected() {
        let csv = "id,t,avail,action,reward,bprob,s1\na,0,1,1,0.5,1.0,1.0\na,1,1,1,0.5,0.6,1.0\n";
        let err = read_csv(csv.as_bytes(), 2).unwrap_err().to_string();
        assert!(err.contains("behavior probability must lie strictly in (0,1)"), "{err}");
        assert!(err.contains("individual a") && err.contains("t = 0"), "{err}");
    }

    #[test]
    fn malformed_rows_name_location() {
        let bad_state = "id,t,avail,action,reward,bprob,s1\na,0,1,1,0.5,0.6,x\n";
        let err = read_csv(bad_state.as_bytes(), 2).unwrap_err().to_string();
        assert!(err.contains("non-numeric") && err.contains("individual a"), "{err}");

        let missing = "id,t,avail,action,reward,bprob,s1\na,0,1,1,,0.6,1\n";
        let err = read_csv(missing.as_bytes(), 2).unwrap_err().to_string();
        assert!(err.contains("missing value in column reward"), "{err}");

        let action = "id,t,avail,action,reward,bprob,s1\na,0,1,2,1,0.6,1\n";
        let err = read_csv(action.as_bytes(), 2).unwrap_err().to_string();
        assert!(err.contains("action 2 outside"), "{err}");

        let order = "id,t,avail,action,reward,bprob,s1\na,1,1,1,1,0.6,1\n";
        let err = read_csv(order.as_bytes(), 2).unwrap_err().to_string();
        assert!(err.contains("expected time index 0"), "{err}");
    }

    #[test]
    fn terminal_rows() {
        let csv = "id,t,avail,action,reward,bprob,s1,s2\n\
                   a,0,1,1,0.5,0.6,1,2\n\
                   a,1,1,0,0.5,0.4,3,4\n\
                   a,2,,,,,5,6\n";
        let d = read_csv(csv.as_bytes(), 2).unwrap();
        let tr = &d.trajectories[0];
        assert_eq!(tr.terminal_state.as_deref(), Some(&[5.0, 6.0][..]));
        assert_eq!(tr.n_transitions(), 2);
        let nexts: Vec<&[f64]> = tr.transitions().map(|(_, _, n)| n).collect();
        assert_eq!(nexts, vec![&[3.0, 4.0][..], &[5.0, 6.0][..]]);
    }

    #[test]
    fn availability_rule_counted() {
        let mut s = step(vec![0.0], 1);
        s.available = false;
        let d = Dataset {
            trajectories: vec![Trajectory {
                id: "x".into(),
                steps: vec![s, step(vec![1.0], 0)],
                terminal_state: None,
            }],
            state_dim: 1,
            n_actions: 2,
            state_names: vec!["s1".into()],
        };
        let r = d.validate();
        assert!(!r.passed());
        assert_eq!(r.failures("unavailable points take action 0"), Some(1));
    }

    #[test]
    fn mixed_dims_fail() {
        let d = Dataset {
            trajectories: vec![Trajectory {
                id: "x".into(),
                steps: vec![step(vec![0.0; 3], 0), step(vec![0.0; 4], 1)],
                terminal_state: None,
            }],
            state_dim: 3,
            n_actions: 2,
            state_names: Dataset::default_state_names(3),
        };
        let r = d.validate();
        assert_eq!(r.failures("consistent state dimension"), Some(1));
        assert!(Dataset::new(d.trajectories.clone(), 2, Dataset::default_state_names(3)).is_err());
    }

    #[test]
    fn ragged_lengths_rejected() {
        let tr = |n: usize| Trajectory {
            id: n.to_string(),
            steps: (0..n).map(|_| step(vec![0.0], 0)).collect(),
            terminal_state: None,
        };
        let r = Dataset::new(vec![tr(2), tr(3)], 2, vec!["s1".into()]);
        assert!(r.unwrap_err().to_string().contains("equal trajectory lengths"));
    }

    #[test]
    fn json_mirrors_csv() {
        let d = read_csv(two_by_three().as_bytes(), 2).unwrap();
        let mut buf = Vec::new();
        write_json(&d, &mut buf).unwrap();
        let back = read_json(buf.as_slice(), 2).unwrap();
        assert_eq!(back, d);
    }
}
