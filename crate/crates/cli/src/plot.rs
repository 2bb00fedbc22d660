use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fhspec::grid::RGrid;
use fhspec::io::{self, Series};
use fhspec::tf::{Axis, AxisKind};

use crate::Failure;

const CHART_W: usize = 320;
const CHART_H: usize = 200;

fn csv_files(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            csv_files(&p, found)?;
        } else if p.extension().is_some_and(|x| x == "csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn axis_kind(name: &str) -> Option<AxisKind> {
    Some(match name {
        "lag" => AxisKind::Lag,
        "doppler" => AxisKind::Doppler,
        "time" => AxisKind::Time,
        "frequency" => AxisKind::Frequency,
        _ => return None,
    })
}

/// A matrix CSV written by `io::matrix_csv`, or `None` for other tables.
fn read_matrix(path: &Path) -> Option<(RGrid, Axis, Axis)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).ok()?;
    let mut records = rdr.records();
    let header = records.next()?.ok()?;
    let (rk, ck) = header.get(0)?.split_once('\\')?;
    let (rk, ck) = (axis_kind(rk)?, axis_kind(ck)?);
    let cols: Vec<f64> = header.iter().skip(1).map(|v| v.parse().ok()).collect::<Option<_>>()?;
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for rec in records {
        let rec = rec.ok()?;
        let vals: Vec<f64> = rec.iter().map(|v| v.parse().ok()).collect::<Option<_>>()?;
        if vals.len() != cols.len() + 1 {
            return None;
        }
        rows.push(vals[0]);
        data.extend_from_slice(&vals[1..]);
    }
    let m = RGrid::from_fn(rows.len(), cols.len(), |r, c| data[r * cols.len() + c]);
    Some((m, Axis { kind: rk, values: rows }, Axis { kind: ck, values: cols }))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(&path, bytes).map_err(|e| Failure::stage("plot", format!("cannot write {}: {e}", path.display())))
}

/// `p_t` and `e_f` against SNR, one series per method and rate.
fn sweep_charts(path: &Path) -> Result<usize, Failure> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::validation(e.to_string()))?;
    let mut p_t: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut e_f: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::validation(e.to_string()))?;
        let num = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
        let (Some(snr), Some(rate), Some(method), Some(pt), Some(ef)) = (num(0), num(1), rec.get(2), num(3), num(4))
        else {
            eprintln!("warning: skipping malformed row in {}", path.display());
            continue;
        };
        let name = format!("{method}@{rate}");
        p_t.entry(name.clone()).or_default().push((snr, pt));
        e_f.entry(name).or_default().push((snr, ef));
    }
    if p_t.is_empty() {
        eprintln!("warning: {} has no rows; no charts written", path.display());
        return Ok(0);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    for (stat, table) in [("p_t", p_t), ("e_f", e_f)] {
        let series: Vec<Series> = table
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        write(
            dir.join(format!("{stat}_vs_snr.csv")),
            io::series_csv(&series).as_bytes(),
        )?;
        let img = io::line_chart(&series, CHART_W, CHART_H).map_err(Failure::from_core)?;
        write(dir.join(format!("{stat}_vs_snr.pgm")), &img)?;
    }
    Ok(2)
}

/// A two-column `index,<value>` trace as a chart.
fn trace_chart(path: &Path) -> Result<usize, Failure> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::validation(e.to_string()))?;
    let name = rdr
        .headers()
        .ok()
        .and_then(|h| h.get(1).map(str::to_string))
        .unwrap_or_default();
    let mut points = Vec::new();
    for rec in rdr.records().map_while(Result::ok) {
        if let (Some(x), Some(y)) = (
            rec.get(0).and_then(|v| v.parse().ok()),
            rec.get(1).and_then(|v| v.parse().ok()),
        ) {
            points.push((x, y));
        }
    }
    if points.is_empty() {
        eprintln!("warning: {} is empty; no chart written", path.display());
        return Ok(0);
    }
    let img = io::line_chart(&[Series { name, points }], CHART_W, CHART_H).map_err(Failure::from_core)?;
    write(path.with_extension("pgm"), &img)?;
    Ok(1)
}

pub fn plot(dir: &Path) -> Result<PathBuf, Failure> {
    if !dir.is_dir() {
        return Err(Failure::validation(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    csv_files(dir, &mut files).map_err(|e| Failure::validation(e.to_string()))?;
    if files.is_empty() {
        eprintln!("warning: no CSV artifacts under {}", dir.display());
    }
    let mut images = 0;
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == "sweep.csv" {
            images += sweep_charts(&f)?;
        } else if matches!(name, "delta.csv" | "chain_trace.csv" | "de_history.csv") {
            images += trace_chart(&f)?;
        } else if let Some((m, rows, cols)) = read_matrix(&f) {
            write(f.with_extension("pgm"), &io::pgm(&m))?;
            write(f.with_extension("axes.json"), io::axis_sidecar(&rows, &cols).as_bytes())?;
            images += 1;
        }
    }
    eprintln!("{images} images written");
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = RGrid::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.5);
        let (ra, ca) = (Axis::lags(1), Axis::time(2));
        let p = dir.path().join("m.csv");
        std::fs::write(&p, io::matrix_csv(&m, &ra, &ca).unwrap()).unwrap();
        let (back, r, c) = read_matrix(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!((r, c), (ra, ca));
        std::fs::write(&p, "n,re\n0,1\n").unwrap();
        assert!(read_matrix(&p).is_none());
    }

    #[test]
    fn empty_sweep_gives_no_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        std::fs::write(&p, "snr_db,missing_rate,method,p_t,e_f,n_trials\n").unwrap();
        assert_eq!(sweep_charts(&p).unwrap(), 0);
        assert!(!dir.path().join("p_t_vs_snr.pgm").exists());
        std::fs::write(
            &p,
            "snr_db,missing_rate,method,p_t,e_f,n_trials\n0,0.25,proposed,0.1,0.9,2\n5,0.25,proposed,0.3,0.5,2\n",
        )
        .unwrap();
        assert_eq!(sweep_charts(&p).unwrap(), 2);
        assert!(dir.path().join("e_f_vs_snr.pgm").exists());
    }
}
