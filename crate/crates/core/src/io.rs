//! CSV files for samples, meeting records and diagnostics.
//!
//! Every file starts with a `# config_hash: <hex>` line tying it to the
//! config that produced it. Floats are written in shortest round-trip form,
//! so a file read back gives bit-identical values.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chains::{MeetingRecord, SampleRow};
use crate::diagnostics::{AsdsfPoint, TvCurve};
use crate::tree::Split;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}")]
    Csv(String),
}

const HASH_PREFIX: &str = "# config_hash: ";

pub const SAMPLE_COLUMNS: [&str; 7] = ["iteration", "log_posterior", "root_age", "mu", "kappa", "n_total", "newick"];
pub const RECORD_COLUMNS: [&str; 6] = ["pair", "lag", "tau", "censored", "wall_seconds", "error"];

fn header_line(hash: &str) -> String {
    format!("{HASH_PREFIX}{hash}\n")
}

/// The hash on the first line, if any.
pub fn read_config_hash(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix(HASH_PREFIX).map(str::trim)
}

fn finish(hash: &str, w: csv::Writer<Vec<u8>>) -> String {
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 fields");
    header_line(hash) + &body
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![])
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_reader(text.as_bytes())
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes thinned samples with columns `iteration, log_posterior, root_age,
/// mu, kappa, n_total, newick, xi_1 … xi_L`.
pub fn write_samples(hash: &str, rows: &[SampleRow], n_leaves: usize) -> String {
    let mut w = writer();
    let mut head: Vec<String> = SAMPLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    head.extend((1..=n_leaves).map(|i| format!("xi_{i}")));
    w.write_record(&head).expect("in-memory write");
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            fmt_f64(r.log_posterior),
            fmt_f64(r.root_age),
            fmt_f64(r.mu),
            fmt_f64(r.kappa),
            r.n_total.to_string(),
            r.newick.clone(),
        ];
        rec.extend(r.xi.iter().map(|&x| fmt_f64(x)));
        w.write_record(&rec).expect("in-memory write");
    }
    finish(hash, w)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, name: &str) -> Result<T, IoError> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(k).ok_or_else(|| IoError::Parse { line, message: format!("missing column {name}") })?;
    raw.parse().map_err(|_| IoError::Parse { line, message: format!("bad {name} '{raw}'") })
}

fn csv_err(e: csv::Error) -> IoError {
    match e.position() {
        Some(p) => IoError::Parse { line: p.line(), message: e.to_string() },
        None => IoError::Csv(e.to_string()),
    }
}

fn check_header(r: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<usize, IoError> {
    let h = r.headers().map_err(csv_err)?.clone();
    let line = h.position().map_or(1, |p| p.line());
    if h.len() < expected.len() || expected.iter().zip(h.iter()).any(|(a, b)| *a != b) {
        return Err(IoError::Parse { line, message: format!("expected columns {}", expected.join(",")) });
    }
    Ok(h.len())
}

pub fn read_samples(text: &str) -> Result<Vec<SampleRow>, IoError> {
    let mut r = reader(text);
    let width = check_header(&mut r, &SAMPLE_COLUMNS)?;
    let mut rows = vec![];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let xi = (SAMPLE_COLUMNS.len()..width).map(|k| field(&rec, k, "xi")).collect::<Result<Vec<f64>, _>>()?;
        rows.push(SampleRow {
            iteration: field(&rec, 0, "iteration")?,
            log_posterior: field(&rec, 1, "log_posterior")?,
            root_age: field(&rec, 2, "root_age")?,
            mu: field(&rec, 3, "mu")?,
            kappa: field(&rec, 4, "kappa")?,
            n_total: field(&rec, 5, "n_total")?,
            newick: rec[6].to_string(),
            xi,
        });
    }
    Ok(rows)
}

/// Writes meeting records with columns `pair, lag, tau, censored,
/// wall_seconds, error`; `error` is empty for pairs that ran cleanly.
pub fn write_records(hash: &str, records: &[MeetingRecord]) -> String {
    let mut w = writer();
    w.write_record(RECORD_COLUMNS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.pair.to_string(),
            r.lag.to_string(),
            r.tau.to_string(),
            r.censored.to_string(),
            fmt_f64(r.wall_seconds),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    finish(hash, w)
}

pub fn read_records(text: &str) -> Result<Vec<MeetingRecord>, IoError> {
    let mut r = reader(text);
    check_header(&mut r, &RECORD_COLUMNS)?;
    let mut out = vec![];
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let error = rec.get(5).filter(|e| !e.is_empty()).map(str::to_string);
        let rec = MeetingRecord {
            pair: field(&rec, 0, "pair")?,
            lag: field(&rec, 1, "lag")?,
            tau: field(&rec, 2, "tau")?,
            censored: field(&rec, 3, "censored")?,
            wall_seconds: field(&rec, 4, "wall_seconds")?,
            error,
        };
        out.push(rec);
    }
    Ok(out)
}

/// Tidy `lag, s, bound` rows, with bootstrap columns when the curve has a band.
pub fn write_tv_curves(hash: &str, curves: &[TvCurve]) -> String {
    let mut w = writer();
    let banded = curves.iter().any(|c| c.band.is_some());
    let mut head = vec!["lag", "s", "bound"];
    if banded {
        head.extend(["lower", "upper"]);
    }
    w.write_record(&head).expect("in-memory write");
    for c in curves {
        for (k, (&s, &b)) in c.s.iter().zip(&c.bound).enumerate() {
            let mut rec = vec![c.lag.to_string(), s.to_string(), fmt_f64(b)];
            if banded {
                let (lo, hi) = c.band.as_ref().map_or((f64::NAN, f64::NAN), |band| band[k]);
                rec.extend([fmt_f64(lo), fmt_f64(hi)]);
            }
            w.write_record(&rec).expect("in-memory write");
        }
    }
    finish(hash, w)
}

/// `lag, s, survival, log_survival` rows; the log is empty where survival is 0.
pub fn write_survival(hash: &str, tables: &[(u64, Vec<(u64, f64)>)]) -> String {
    let mut w = writer();
    w.write_record(["lag", "s", "survival", "log_survival"]).expect("in-memory write");
    for (lag, table) in tables {
        for &(s, p) in table {
            let log = if p > 0.0 { fmt_f64(p.ln()) } else { String::new() };
            w.write_record([lag.to_string(), s.to_string(), fmt_f64(p), log]).expect("in-memory write");
        }
    }
    finish(hash, w)
}

pub fn write_asdsf(hash: &str, series: &[AsdsfPoint]) -> String {
    let mut w = writer();
    w.write_record(["window_end", "asdsf", "n_splits", "no_splits"]).expect("in-memory write");
    for p in series {
        w.write_record([p.window_end.to_string(), fmt_f64(p.value), p.n_splits.to_string(), p.no_splits.to_string()])
            .expect("in-memory write");
    }
    finish(hash, w)
}

/// Split frequencies as `bitset-hex,frequency` rows.
pub fn write_splits(hash: &str, freqs: &BTreeMap<Split, f64>, n_leaves: usize) -> String {
    let mut w = writer();
    w.write_record(["split", "frequency"]).expect("in-memory write");
    for (s, f) in freqs {
        w.write_record([s.side().to_hex(n_leaves), fmt_f64(*f)]).expect("in-memory write");
    }
    finish(hash, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> SampleRow {
        SampleRow {
            iteration: i,
            log_posterior: -123.456789012345 - i as f64,
            root_age: 1.0 / 3.0,
            mu: 2.5e-4,
            kappa: 0.05,
            n_total: 2,
            newick: "((a:1,b:1):0.5,c:1.5);".into(),
            xi: vec![0.1, 1.0, 0.7],
        }
    }

    #[test]
    fn samples_round_trip_exactly() {
        let rows: Vec<_> = (0..3).map(row).collect();
        let text = write_samples("abc", &rows, 3);
        assert!(text.starts_with("# config_hash: abc\niteration,log_posterior,root_age,mu,kappa,n_total,newick,xi_1,xi_2,xi_3\n"));
        assert_eq!(read_config_hash(&text), Some("abc"));
        assert_eq!(read_samples(&text).unwrap(), rows);
    }

    #[test]
    fn records_round_trip_exactly() {
        let recs = vec![
            MeetingRecord { pair: 0, lag: 100, tau: 1300, censored: false, wall_seconds: 0.25, error: None },
            MeetingRecord { pair: 1, lag: 100, tau: 5000, censored: true, wall_seconds: 1.5, error: Some("bad, \"x\"".into()) },
        ];
        let text = write_records("h", &recs);
        assert_eq!(read_records(&text).unwrap(), recs);
    }

    #[test]
    fn parse_errors_give_lines() {
        let text = "# config_hash: h\npair,lag,tau,censored,wall_seconds,error\n0,10,20,false,0.1,\n1,10,x,false,0.1,\n";
        assert_eq!(read_records(text), Err(IoError::Parse { line: 4, message: "bad tau 'x'".into() }));
        assert!(matches!(read_records("a,b\n1,2\n"), Err(IoError::Parse { line: 1, .. })));
        assert!(read_samples("").is_err());
    }

    #[test]
    fn tv_and_survival_tables() {
        let c = TvCurve { lag: 10, s: vec![0, 10], bound: vec![2.0, 1.0], variance: vec![0.0; 2], n_pairs: 3, n_censored: 0, band: None };
        assert_eq!(write_tv_curves("h", &[c]), "# config_hash: h\nlag,s,bound\n10,0,2\n10,10,1\n");
        let s = write_survival("h", &[(10, vec![(0, 1.0), (5, 0.0)])]);
        assert_eq!(s, "# config_hash: h\nlag,s,survival,log_survival\n10,0,1,0\n10,5,0,\n");
    }
}
