//! Energy-ratio SDR, per-instrument medians over tracks, and means over runs.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::data::Track;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::spectrogram::Waveform;

pub const SDR_EPS: f64 = 1e-10;
pub const SDR_CAP: f64 = 60.0;

/// `10·log10(Σs² / (Σ(s−ŝ)² + ε))`, capped to ±60 dB; `None` for a silent
/// reference. Channels are compared up to the shorter length.
pub fn sdr(estimate: &Waveform<f32>, reference: &Waveform<f32>) -> Option<f64> {
    let channels = estimate.channels().min(reference.channels());
    let (mut signal, mut error) = (0.0f64, 0.0f64);
    for c in 0..channels {
        for (&e, &s) in estimate.channel(c).iter().zip(reference.channel(c)) {
            let (e, s) = (e as f64, s as f64);
            signal += s * s;
            error += (s - e) * (s - e);
        }
    }
    if signal == 0.0 {
        return None;
    }
    Some((10.0 * (signal / (error + SDR_EPS)).log10()).clamp(-SDR_CAP, SDR_CAP))
}

/// Middle value; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Rounds half to even at `decimals` places.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let y = x * scale;
    let r = y.round();
    let r = if (y - y.trunc()).abs() == 0.5 && r % 2.0 != 0.0 { r - y.signum() } else { r };
    r / scale
}

/// A track/instrument pair that produced no score.
#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub track: String,
    pub instrument: String,
    pub reason: String,
}

/// Per-track SDRs of one run and their per-instrument medians.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub run: String,
    pub instruments: Vec<String>,
    /// track → instrument → dB.
    pub scores: IndexMap<String, IndexMap<String, f64>>,
    pub medians: IndexMap<String, f64>,
    pub skipped: Vec<Skipped>,
}

impl EvalReport {
    pub fn new(run: impl Into<String>, instruments: &[String]) -> Self {
        EvalReport {
            run: run.into(),
            instruments: instruments.to_vec(),
            ..Default::default()
        }
    }

    pub fn record(&mut self, track: &str, instrument: &str, score: f64) {
        self.scores
            .entry(track.to_string())
            .or_default()
            .insert(instrument.to_string(), score);
    }

    /// Recomputes the per-instrument medians over every scored track.
    pub fn finish(&mut self) {
        self.medians.clear();
        for inst in &self.instruments {
            let vals: Vec<f64> = self.scores.values().filter_map(|m| m.get(inst).copied()).collect();
            if let Some(m) = median(&vals) {
                self.medians.insert(inst.clone(), m);
            }
        }
    }

    /// Mean of the per-instrument medians.
    pub fn average(&self) -> f64 {
        mean(self.medians.values().copied())
    }

    /// Rows `run,kind,track,instrument,sdr`; `kind` is `track` or `median`.
    pub fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let e = |e: csv::Error| Error::Validation(format!("writing report: {e}"));
        for (track, m) in &self.scores {
            for (inst, v) in m {
                w.write_record([self.run.as_str(), "track", track, inst, &v.to_string()]).map_err(e)?;
            }
        }
        for (inst, v) in &self.medians {
            w.write_record([self.run.as_str(), "median", "", inst, &v.to_string()]).map_err(e)?;
        }
        Ok(())
    }

    /// Reads every run in a report CSV; medians are taken from the file.
    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<EvalReport>> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut runs: IndexMap<String, EvalReport> = IndexMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Validation(format!("reading report: {e}")))?;
            if row.len() != 5 {
                return Err(Error::Validation(format!("report row has {} fields, expected 5", row.len())));
            }
            let value: f64 = row[4]
                .parse()
                .map_err(|_| Error::Validation(format!("bad SDR value `{}`", &row[4])))?;
            let report = runs.entry(row[0].to_string()).or_insert_with(|| EvalReport::new(&row[0], &[]));
            let inst = row[3].to_string();
            if !report.instruments.contains(&inst) {
                report.instruments.push(inst.clone());
            }
            match &row[1] {
                "track" => report.record(&row[2], &inst, value),
                "median" => {
                    report.medians.insert(inst, value);
                }
                k => return Err(Error::Validation(format!("unknown report row kind `{k}`"))),
            }
        }
        Ok(runs.into_values().collect())
    }
}

pub const CSV_HEADER: [&str; 5] = ["run", "kind", "track", "instrument", "sdr"];

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores `estimate(track, instrument)` against each track's reference
/// source; tracks run in parallel.
pub fn evaluate_with<F>(run: &str, tracks: &[Track], instruments: &[String], estimate: F) -> Result<EvalReport>
where
    F: Fn(&Track, &str) -> Result<Waveform<f32>> + Sync,
{
    let rows: Vec<Vec<(String, std::result::Result<f64, String>)>> = tracks
        .par_iter()
        .map(|t| {
            instruments
                .iter()
                .map(|inst| {
                    let r = match t.sources.get(inst) {
                        None => Err("missing reference source".to_string()),
                        Some(reference) => match estimate(t, inst) {
                            Err(e) => return Err(e),
                            Ok(est) => sdr(&est, reference).ok_or_else(|| "silent reference".to_string()),
                        },
                    };
                    Ok((inst.clone(), r))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::new(run, instruments);
    for (t, row) in tracks.iter().zip(rows) {
        for (inst, r) in row {
            match r {
                Ok(v) => report.record(&t.id, &inst, v),
                Err(reason) => {
                    log::warn!("skipping {} / {inst}: {reason}", t.id);
                    report.skipped.push(Skipped {
                        track: t.id.clone(),
                        instrument: inst,
                        reason,
                    });
                }
            }
        }
    }
    report.finish();
    Ok(report)
}

/// Median SDR of the model's separations over `tracks`.
pub fn evaluate_model(model: &Model<f32>, tracks: &[Track], run: &str) -> Result<EvalReport> {
    let instruments = model.config.instruments.clone();
    evaluate_with(run, tracks, &instruments, |t, inst| model.separate(&t.mixture, inst))
}

/// The mixture itself as every source's estimate.
pub fn evaluate_mixture_baseline(tracks: &[Track], instruments: &[String]) -> Result<EvalReport> {
    evaluate_with("mixture", tracks, instruments, |t, _| Ok(t.mixture.clone()))
}

/// Mean over runs of each instrument's median, and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub means: IndexMap<String, f64>,
    pub avg: f64,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Aggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no evaluation runs to aggregate".into()))?;
    let mut names: Vec<&String> = first.medians.keys().collect();
    names.sort();
    for r in &reports[1..] {
        let mut other: Vec<&String> = r.medians.keys().collect();
        other.sort();
        if other != names {
            return Err(Error::Validation(format!(
                "run `{}` covers instruments {other:?}, run `{}` covers {names:?}",
                r.run, first.run
            )));
        }
    }
    let means: IndexMap<String, f64> = first
        .medians
        .keys()
        .map(|k| (k.clone(), mean(reports.iter().map(|r| r.medians[k]))))
        .collect();
    let avg = mean(means.values().copied());
    Ok(Aggregate {
        runs: reports.len(),
        means,
        avg,
    })
}

/// Plain-text table with one column per instrument and a trailing AVG.
pub fn format_table(instruments: &[String], rows: &[(String, Aggregate)]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_width$}", "model");
    for inst in instruments {
        out.push_str(&format!(" {inst:>8}"));
    }
    out.push_str(&format!(" {:>8}\n", "AVG"));
    for (label, agg) in rows {
        out.push_str(&format!("{label:<label_width$}"));
        for inst in instruments {
            match agg.means.get(inst) {
                Some(v) => out.push_str(&format!(" {:>8.2}", round_half_even(*v, 2))),
                None => out.push_str(&format!(" {:>8}", "-")),
            }
        }
        out.push_str(&format!(" {:>8.2}\n", round_half_even(agg.avg, 2)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_rules() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[4.0]), Some(4.0));
        assert_eq!(median(&[9.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn half_even() {
        assert_eq!(round_half_even(0.125, 2), 0.12);
        assert_eq!(round_half_even(2.5, 0), 2.0);
        assert_eq!(round_half_even(3.5, 0), 4.0);
        assert_eq!(round_half_even(-2.5, 0), -2.0);
        assert_eq!(round_half_even(5.8775, 2), 5.88);
    }
}
