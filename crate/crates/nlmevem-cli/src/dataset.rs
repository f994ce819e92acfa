//! Dataset CSV reading and writing.
//!
//! Column layout: `id,time,evid,amt,cmt`, then one column per model response
//! variable, then `cov.<name>` columns. `evid` 0 marks an observation row
//! (`amt`/`cmt` ignored), 1 a dose row (response fields ignored). The
//! literal `.` encodes a missing value. Floats are written in shortest
//! round-trip form, so write-then-read is lossless.

use crate::error::{CliError, Result};
use nlmevem::model::{DoseEvent, Model, Subject};
use std::collections::BTreeMap;
use std::path::Path;

const FIXED_HEADER: [&str; 5] = ["id", "time", "evid", "amt", "cmt"];
const MISSING: &str = ".";

struct SubjectBuilder {
    id: String,
    times: Vec<f64>,
    columns: Vec<Vec<Option<f64>>>,
    doses: Vec<DoseEvent>,
    covariates: BTreeMap<String, (f64, u64)>,
}

/// Column indices resolved from the header row.
struct Layout {
    responses: Vec<usize>,
    covariates: Vec<(String, usize)>,
}

fn resolve_layout<M: Model>(path: &Path, header: &csv::StringRecord, model: &M) -> Result<Layout> {
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.len() < FIXED_HEADER.len() || fields[..FIXED_HEADER.len()] != FIXED_HEADER {
        return Err(CliError::parse(
            path,
            format!(
                "header must start with `{}`, got `{}`",
                FIXED_HEADER.join(","),
                fields.join(",")
            ),
        ));
    }
    let names = model.response_names();
    let mut responses = vec![usize::MAX; names.len()];
    let mut covariates = Vec::new();
    for (col, field) in fields.iter().enumerate().skip(FIXED_HEADER.len()) {
        if let Some(pos) = names.iter().position(|n| n == field) {
            if responses[pos] != usize::MAX {
                return Err(CliError::parse(path, format!("duplicate column `{field}`")));
            }
            responses[pos] = col;
        } else if let Some(name) = field.strip_prefix("cov.") {
            covariates.push((name.to_string(), col));
        } else {
            return Err(CliError::parse(
                path,
                format!("unexpected column `{field}` (responses for {} are {})", model.name(), names.join(", ")),
            ));
        }
    }
    for (pos, col) in responses.iter().enumerate() {
        if *col == usize::MAX {
            return Err(CliError::parse(
                path,
                format!("missing response column `{}`", names[pos]),
            ));
        }
    }
    Ok(Layout {
        responses,
        covariates,
    })
}

fn parse_f64(path: &Path, line: u64, what: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| CliError::data(path, line, format!("{what} is not a number: `{raw}`")))
}

/// Read a dataset for `model`, preserving subject order of first appearance.
pub fn read_subjects<M: Model>(path: &Path, model: &M) -> Result<Vec<Subject>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_subjects(&text, path, model)
}

pub fn parse_subjects<M: Model>(text: &str, path: &Path, model: &M) -> Result<Vec<Subject>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CliError::parse(path, e.to_string()))?
        .clone();
    let layout = resolve_layout(path, &header, model)?;

    let mut order: Vec<String> = Vec::new();
    let mut builders: BTreeMap<String, SubjectBuilder> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::parse(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::data(
                path,
                line,
                format!("expected {} fields, got {}", header.len(), record.len()),
            ));
        }
        let id = record[0].trim();
        if id.is_empty() {
            return Err(CliError::data(path, line, "empty subject id"));
        }
        let time = parse_f64(path, line, "time", &record[1])?;
        let evid = record[2].trim();

        let builder = builders.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            SubjectBuilder {
                id: id.to_string(),
                times: Vec::new(),
                columns: vec![Vec::new(); layout.responses.len()],
                doses: Vec::new(),
                covariates: BTreeMap::new(),
            }
        });

        match evid {
            "0" => {
                builder.times.push(time);
                for (column, &col) in builder.columns.iter_mut().zip(&layout.responses) {
                    let raw = record[col].trim();
                    if raw == MISSING {
                        column.push(None);
                    } else {
                        column.push(Some(parse_f64(path, line, "response", raw)?));
                    }
                }
            }
            "1" => {
                let amount = parse_f64(path, line, "amt", &record[3])?;
                let compartment = record[4].trim().parse::<usize>().map_err(|_| {
                    CliError::data(
                        path,
                        line,
                        format!("cmt is not a compartment index: `{}`", &record[4]),
                    )
                })?;
                builder.doses.push(DoseEvent {
                    time,
                    amount,
                    compartment,
                    lag_name: model.dose_lag_name(compartment).map(String::from),
                });
            }
            other => {
                return Err(CliError::data(
                    path,
                    line,
                    format!("evid must be 0 or 1, got `{other}`"),
                ));
            }
        }

        for (name, col) in &layout.covariates {
            let raw = record[*col].trim();
            if raw == MISSING {
                continue;
            }
            let value = parse_f64(path, line, &format!("cov.{name}"), raw)?;
            match builder.covariates.get(name) {
                Some((seen, seen_line)) if *seen != value => {
                    return Err(CliError::data(
                        path,
                        line,
                        format!(
                            "cov.{name} changes within subject {id} ({seen} on line {seen_line})"
                        ),
                    ));
                }
                Some(_) => {}
                None => {
                    builder.covariates.insert(name.clone(), (value, line));
                }
            }
        }
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut b = builders.remove(&id).expect("builder for ordered id");
        b.doses
            .sort_by(|a, c| a.time.partial_cmp(&c.time).expect("finite dose times"));
        let covariates: BTreeMap<String, f64> = b
            .covariates
            .into_iter()
            .map(|(k, (v, _))| (k, v))
            .collect();
        let subject = Subject::new(b.id, b.times, b.columns, b.doses, covariates)
            .map_err(|e| CliError::parse(path, format!("subject {id}: {e}")))?;
        subjects.push(subject);
    }
    Ok(subjects)
}

/// Render subjects in the dataset layout. Dose rows sort before observation
/// rows at equal times. Covariate columns are the sorted union over subjects.
pub fn write_subjects<M: Model>(subjects: &[Subject], model: &M) -> String {
    let mut cov_names: Vec<String> = Vec::new();
    for s in subjects {
        for name in s.covariates.keys() {
            if !cov_names.contains(name) {
                cov_names.push(name.clone());
            }
        }
    }
    cov_names.sort();

    let mut out = String::new();
    out.push_str(&FIXED_HEADER.join(","));
    for name in model.response_names() {
        out.push(',');
        out.push_str(name);
    }
    for name in &cov_names {
        out.push_str(",cov.");
        out.push_str(name);
    }
    out.push('\n');

    let n_resp = model.response_names().len();
    for s in subjects {
        let cov_fields: Vec<String> = cov_names
            .iter()
            .map(|n| s.covariates.get(n).map_or(MISSING.to_string(), |v| v.to_string()))
            .collect();
        let mut dose_iter = s.dose_events.iter().peekable();
        let mut obs_iter = s.observation_times.iter().enumerate().peekable();
        loop {
            let next_dose = dose_iter.peek().map(|d| d.time);
            let next_obs = obs_iter.peek().map(|(_, t)| **t);
            let row = match (next_dose, next_obs) {
                (None, None) => break,
                (Some(_), None) => Row::Dose(dose_iter.next().unwrap()),
                (None, Some(_)) => Row::Obs(obs_iter.next().unwrap()),
                (Some(d), Some(o)) if d <= o => Row::Dose(dose_iter.next().unwrap()),
                _ => Row::Obs(obs_iter.next().unwrap()),
            };
            match row {
                Row::Dose(d) => {
                    out.push_str(&format!("{},{},1,{},{}", s.id, d.time, d.amount, d.compartment));
                    for _ in 0..n_resp {
                        out.push(',');
                        out.push_str(MISSING);
                    }
                }
                Row::Obs((i, t)) => {
                    out.push_str(&format!("{},{t},0,{MISSING},{MISSING}", s.id));
                    // Design subjects carry no response columns; pad with
                    // missing so rows always match the header.
                    for k in 0..n_resp {
                        out.push(',');
                        match s.observations.get(k).and_then(|column| column[i]) {
                            Some(v) => out.push_str(&v.to_string()),
                            None => out.push_str(MISSING),
                        }
                    }
                }
            }
            for field in &cov_fields {
                out.push(',');
                out.push_str(field);
            }
            out.push('\n');
        }
    }
    out
}

enum Row<'a> {
    Dose(&'a DoseEvent),
    Obs((usize, &'a f64)),
}

pub fn write_subjects_to<M: Model>(path: &Path, subjects: &[Subject], model: &M) -> Result<()> {
    std::fs::write(path, write_subjects(subjects, model)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nlmevem::model::{by_name, simulate_population, LinearGaussian, OneCmtPk};

    fn design(times: &[f64], doses: Vec<DoseEvent>) -> Subject {
        Subject::design("d", times.to_vec(), doses, BTreeMap::new()).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let model = OneCmtPk;
        let d = design(
            &[0.5, 1.0, 2.0, 4.0],
            vec![DoseEvent {
                time: 0.0,
                amount: 100.0,
                compartment: 0,
                lag_name: None,
            }],
        );
        let (subjects, _) =
            simulate_population(&model, 5, &d, &model.theta_init(), 42).unwrap();
        let text = write_subjects(&subjects, &model);
        let back = parse_subjects(&text, Path::new("mem"), &model).unwrap();
        assert_eq!(subjects.len(), back.len());
        for (a, b) in subjects.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.observation_times, b.observation_times);
            assert_eq!(a.observations, b.observations);
            assert_eq!(a.dose_events.len(), b.dose_events.len());
            for (da, db) in a.dose_events.iter().zip(&b.dose_events) {
                assert_eq!(da.time.to_bits(), db.time.to_bits());
                assert_eq!(da.amount.to_bits(), db.amount.to_bits());
                assert_eq!(da.compartment, db.compartment);
            }
        }
    }

    #[test]
    fn missing_and_covariates_round_trip() {
        let model = by_name("warfarin_pkpd").unwrap();
        let mut covs = BTreeMap::new();
        covs.insert("WT".to_string(), 70.0);
        let subject = Subject::new(
            "w1",
            vec![1.0, 2.0],
            vec![vec![Some(1.25), None], vec![None, Some(97.0)]],
            vec![DoseEvent {
                time: 0.0,
                amount: 105.0,
                compartment: 0,
                lag_name: model.dose_lag_name(0).map(String::from),
            }],
            covs,
        )
        .unwrap();
        let text = write_subjects(core::slice::from_ref(&subject), &model);
        assert!(text.contains("cov.WT"));
        let back = parse_subjects(&text, Path::new("mem"), &model).unwrap();
        assert_eq!(back[0].observations, subject.observations);
        assert_eq!(back[0].covariates.get("WT"), Some(&70.0));
        // Lag names are reattached from the model's dosing contract.
        assert_eq!(back[0].dose_events[0].lag_name, subject.dose_events[0].lag_name);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let model = LinearGaussian;
        let text = "id,time,evid,amt,cmt,y\n1,0.0,0,.,.,1.5\n1,oops,0,.,.,2.0\n";
        let err = parse_subjects(text, Path::new("bad.csv"), &model).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("line 3"), "{message}");
        assert!(message.contains("time"), "{message}");

        let text = "id,time,evid,amt,cmt,y\n1,0.0,7,.,.,1.5\n";
        let err = parse_subjects(text, Path::new("bad.csv"), &model).unwrap_err();
        assert!(err.to_string().contains("evid"), "{err}");

        let text = "id,time,evid,amt,cmt,z\n";
        let err = parse_subjects(text, Path::new("bad.csv"), &model).unwrap_err();
        assert!(err.to_string().contains("unexpected column"), "{err}");
    }

    #[test]
    fn conflicting_covariates_are_rejected() {
        let model = by_name("warfarin_pkpd").unwrap();
        let text = "id,time,evid,amt,cmt,conc,pca,cov.WT\n\
                    1,1.0,0,.,.,1.0,90,70\n\
                    1,2.0,0,.,.,1.1,91,71\n";
        let err = parse_subjects(text, Path::new("bad.csv"), &model).unwrap_err();
        assert!(err.to_string().contains("cov.WT"), "{err}");
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
