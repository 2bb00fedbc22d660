//! Text and raster exports: axis-labelled CSV matrices, 8-bit PGM images
//! and small line charts.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::grid::{Grid, RGrid};
use crate::kernels::ColumnDiagnostics;
use crate::tf::{Axis, JointRep};

/// Which real quantity to export from a complex representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
    Abs,
}

/// CSV with the column axis in the header row and the row axis in the
/// first column. The corner cell names both axes as `row\col`.
pub fn matrix_csv(m: &RGrid, rows: &Axis, cols: &Axis) -> Result<String> {
    if m.rows() != rows.len() || m.cols() != cols.len() {
        return invalid(format!(
            "matrix is {}×{} but axes are {}×{}",
            m.rows(),
            m.cols(),
            rows.len(),
            cols.len()
        ));
    }
    let mut out = format!("{}\\{}", rows.kind.name(), cols.kind.name());
    for v in &cols.values {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
    for (r, rv) in rows.values.iter().enumerate() {
        out.push_str(&rv.to_string());
        for v in m.row(r) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn rep_csv(rep: &JointRep, part: Part) -> String {
    let m = rep.data.map(|z| match part {
        Part::Re => z.re,
        Part::Im => z.im,
        Part::Abs => z.norm(),
    });
    matrix_csv(&m, &rep.row_axis, &rep.col_axis).expect("JointRep axes match its data")
}

pub fn support_grid(s: &Grid<bool>) -> RGrid {
    s.map(|&b| if b { 1.0 } else { 0.0 })
}

/// Binary (P5) 8-bit image of `|m|`, row-major, scaled so the largest
/// magnitude is 255. An all-zero matrix gives a black image.
pub fn pgm(m: &RGrid) -> Vec<u8> {
    let peak = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.as_slice().iter().map(|v| {
        if peak > 0.0 && v.is_finite() {
            (v.abs() / peak * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[derive(Serialize)]
struct Sidecar<'a> {
    rows: &'a Axis,
    cols: &'a Axis,
    scale: &'static str,
}

/// JSON describing the axes of an image written by [`pgm`].
pub fn axis_sidecar(rows: &Axis, cols: &Axis) -> String {
    serde_json::to_string_pretty(&Sidecar {
        rows,
        cols,
        scale: "max-normalized magnitude",
    })
    .expect("axes serialize")
}

/// Two-column CSV `index,<name>`.
pub fn trace_csv(name: &str, values: &[f64]) -> String {
    let mut out = format!("index,{name}\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Adaptive-kernel diagnostics: one row per instant with the objective and
/// the optimized spread at each angle.
pub fn aok_diagnostics_csv(diag: &[ColumnDiagnostics]) -> String {
    let angles = diag.first().map_or(0, |d| d.sigma2_psi.len());
    let mut out = String::from("n,converged,objective");
    for a in 0..angles {
        out.push_str(&format!(",sigma2_{a}"));
    }
    out.push('\n');
    for d in diag {
        out.push_str(&format!("{},{},{}", d.n, u8::from(d.converged), d.objective));
        for v in &d.sigma2_psi {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// A named polyline for [`line_chart`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Long-format CSV `series,x,y`.
pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            out.push_str(&format!("{},{x},{y}\n", s.name));
        }
    }
    out
}

/// Grayscale PGM line chart on a white background with a black frame.
/// Each series gets its own gray level and a dot on every data point.
pub fn line_chart(series: &[Series], width: usize, height: usize) -> Result<Vec<u8>> {
    if width < 8 || height < 8 {
        return invalid("chart must be at least 8×8 pixels");
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return invalid("chart has no finite points");
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let margin = 3usize;
    let (pw, ph) = (width - 2 * margin, height - 2 * margin);
    let px = |x: f64| margin as f64 + (x - x0) / (x1 - x0) * (pw - 1) as f64;
    let py = |y: f64| margin as f64 + (y1 - y) / (y1 - y0) * (ph - 1) as f64;

    let mut img = vec![255u8; width * height];
    for c in margin - 1..=width - margin {
        img[(margin - 1) * width + c] = 0;
        img[(height - margin) * width + c] = 0;
    }
    for r in margin - 1..=height - margin {
        img[r * width + margin - 1] = 0;
        img[r * width + width - margin] = 0;
    }
    let mut put = |x: i64, y: i64, v: u8| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            img[y as usize * width + x as usize] = v;
        }
    };
    for (i, s) in series.iter().enumerate() {
        let shade = (160 * i / series.len().max(1)) as u8;
        let p: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x).round() as i64, py(y).round() as i64))
            .collect();
        for w in p.windows(2) {
            let (mut x, mut y) = w[0];
            let (xe, ye) = w[1];
            let (dx, dy) = ((xe - x).abs(), -(ye - y).abs());
            let (sx, sy) = (if x < xe { 1 } else { -1 }, if y < ye { 1 } else { -1 });
            let mut err = dx + dy;
            loop {
                put(x, y, shade);
                if x == xe && y == ye {
                    break;
                }
                let e2 = 2 * err;
                if e2 >= dy {
                    err += dy;
                    x += sx;
                }
                if e2 <= dx {
                    err += dx;
                    y += sy;
                }
            }
        }
        for &(x, y) in &p {
            for d in [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)] {
                put(x + d.0, y + d.1, shade);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(img);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tf::AxisKind;

    fn axes() -> (Axis, Axis) {
        (Axis::lags(1), Axis::time(2))
    }

    #[test]
    fn csv_carries_both_axes() {
        let (r, c) = axes();
        let m = RGrid::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let csv = matrix_csv(&m, &r, &c).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lag\\time,0,1");
        assert_eq!(lines[1], "-1,0,1");
        assert_eq!(lines[3], "1,4,5");
    }

    #[test]
    fn csv_rejects_mismatched_axes() {
        let (r, c) = axes();
        assert!(matrix_csv(&RGrid::zeros(2, 2), &r, &c).is_err());
    }

    #[test]
    fn pgm_is_max_normalized() {
        let m = RGrid::from_fn(2, 3, |i, j| -((i * 3 + j) as f64));
        let img = pgm(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 6);
        assert_eq!(px[0], 0);
        assert_eq!(px[5], 255);
        assert_eq!(px[1], 51);
    }

    #[test]
    fn zero_matrix_is_black() {
        let img = pgm(&RGrid::zeros(2, 2));
        assert!(img.ends_with(&[0, 0, 0, 0]));
    }

    #[test]
    fn sidecar_names_axes() {
        let (r, c) = axes();
        let s = axis_sidecar(&r, &c);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["rows"]["kind"], "lag");
        assert_eq!(v["cols"]["values"][1], 1.0);
        assert_eq!(Axis::time(1).kind, AxisKind::Time);
    }

    #[test]
    fn chart_draws_inside_frame() {
        let s = [Series {
            name: "p_t".into(),
            points: vec![(0.0, 0.0), (15.0, 1.0)],
        }];
        let img = line_chart(&s, 40, 30).unwrap();
        let px = &img[b"P5\n40 30\n255\n".len()..];
        assert_eq!(px.len(), 1200);
        assert!(px.iter().filter(|&&v| v == 0).count() > 100);
        assert!(line_chart(&[], 40, 30).is_err());
        assert_eq!(series_csv(&s), "series,x,y\np_t,0,0\np_t,15,1\n");
    }
}
