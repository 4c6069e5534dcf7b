//! CSV layout: header `series_id,period_id,step,f0,...,f{d-1}`, rows
//! sorted by `(series_id, period_id, step)`, all ids zero-based.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TimeSeriesCorpus;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const KEYS: [&str; 3] = ["series_id", "period_id", "step"];

fn check_header(h: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = h.iter().map(str::trim).collect();
    if cols.len() < 4 || cols[..3] != KEYS {
        return Err(Error::Data(format!(
            "header must start with series_id,period_id,step and have a feature column, got `{}`",
            cols.join(",")
        )));
    }
    for (k, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{k}") {
            return Err(Error::Data(format!("feature column {k} must be named f{k}, got `{c}`")));
        }
    }
    Ok(cols.len() - 3)
}

pub fn read_csv(reader: impl Read) -> Result<TimeSeriesCorpus> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("reading header: {e}")))?
        .clone();
    let dim = check_header(&header)?;
    let mut series: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut prev: Option<(usize, usize, usize)> = None;
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        if rec.len() != dim + 3 {
            return Err(Error::Data(format!(
                "row {line}: expected {} cells, got {}",
                dim + 3,
                rec.len()
            )));
        }
        let mut ids = [0usize; 3];
        for (c, id) in ids.iter_mut().enumerate() {
            let cell = rec[c].trim();
            *id = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {line}: `{}` is not a non-negative integer: `{cell}`",
                    KEYS[c]
                ))
            })?;
        }
        let [s, p, t] = ids;
        let ok = match prev {
            None => s == 0 && p == 0 && t == 0,
            Some((ps, pp, pt)) => {
                (s == ps && p == pp && t == pt + 1)
                    || (s == ps && p == pp + 1 && t == 0)
                    || (s == ps + 1 && p == 0 && t == 0)
            }
        };
        if !ok {
            return Err(Error::Data(format!(
                "row {line}: ids ({s}, {p}, {t}) are not contiguous and sorted by (series_id, period_id, step)"
            )));
        }
        prev = Some((s, p, t));
        if s == series.len() {
            series.push(Vec::new());
        }
        if p == series[s].len() {
            series[s].push(Vec::new());
        }
        let block = &mut series[s][p];
        for c in 3..dim + 3 {
            let cell = rec[c].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("row {line}: column f{} is not numeric: `{cell}`", c - 3)))?;
            block.push(v);
        }
    }
    if series.is_empty() {
        return Err(Error::Data("csv has no observations".into()));
    }
    let periods = series
        .into_iter()
        .map(|s| s.into_iter().map(|b| Tensor::new(&[b.len() / dim, dim], b)).collect())
        .collect();
    TimeSeriesCorpus::new(periods)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesCorpus> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
    read_csv(BufReader::new(f))
}

pub fn write_csv_to(mut w: impl Write, corpus: &TimeSeriesCorpus) -> Result<()> {
    let mut header = KEYS.join(",");
    for f in 0..corpus.dim() {
        header.push_str(&format!(",f{f}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..corpus.series() {
        for j in 0..corpus.periods() {
            let p = corpus.period(i, j);
            for t in 0..p.rows() {
                write!(w, "{i},{j},{t}")?;
                for v in p.row(t) {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, corpus: &TimeSeriesCorpus) -> Result<()> {
    write_csv_to(BufWriter::new(File::create(path)?), corpus)
}
