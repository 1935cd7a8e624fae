//! Plain-text artifacts: field snapshots, trajectories, descent reports and
//! matrix paths as CSV, with a JSON sidecar carrying field grid metadata.
//!
//! Reals are written with 17 significant digits so that every `f64` value
//! round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::descent::IterationRecord;
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::grid::{Grid, GridField, TimeGrid};
use crate::lqr::MatrixPath;
use crate::scalar::Real;

pub const FIELD_FORMAT: &str = "feedback-field";
pub const FIELD_FORMAT_VERSION: u32 = 1;

fn fmt<T: Real>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

fn parse<T: Real>(s: &str) -> Result<T> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("not a number: {s:?}")))?;
    T::from_f64(v).ok_or_else(|| Error::invalid(format!("value {v} not representable")))
}

fn check_header(found: &csv::StringRecord, expected: &[String]) -> Result<()> {
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::invalid(format!(
            "unexpected CSV header {:?}, expected {:?}",
            found.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(())
}

/// Grid and time metadata written next to a field CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMeta {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    pub t0: f64,
    pub t_final: f64,
    pub steps: usize,
    pub components: usize,
}

impl FieldMeta {
    pub fn of<T: Real>(field: &GridField<T>, name: &str) -> Self {
        let grid = field.grid();
        let tg = field.time_grid();
        Self {
            format: FIELD_FORMAT.into(),
            version: FIELD_FORMAT_VERSION,
            name: name.into(),
            lo: grid.lo().iter().map(|v| v.as_f64()).collect(),
            hi: grid.hi().iter().map(|v| v.as_f64()).collect(),
            nodes: grid.nodes_per_axis().to_vec(),
            t0: tg.t0().as_f64(),
            t_final: tg.t_final().as_f64(),
            steps: tg.steps(),
            components: field.components(),
        }
    }

    fn grids<T: Real>(&self) -> Result<(Grid<T>, TimeGrid<T>)> {
        if self.format != FIELD_FORMAT || self.version != FIELD_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported field format {} v{}",
                self.format, self.version
            )));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let grid = Grid::new(conv(&self.lo), conv(&self.hi), self.nodes.clone())?;
        let tg = TimeGrid::new(T::lit(self.t0), T::lit(self.t_final), self.steps)?;
        Ok((grid, tg))
    }
}

pub fn field_header(dim: usize, components: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=dim).map(|i| format!("x{i}")))
        .chain((1..=components).map(|i| format!("c{i}")))
        .collect()
}

/// Rows over (time, node) with node order as in the grid (first axis slowest).
pub fn write_field_csv<T: Real, W: Write>(field: &GridField<T>, out: W) -> Result<()> {
    let grid = field.grid();
    let tg = field.time_grid();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(field_header(grid.dim(), field.components()))?;
    let mut row = Vec::with_capacity(1 + grid.dim() + field.components());
    for k in 0..=tg.steps() {
        let t = fmt(tg.time(k));
        for node in 0..grid.len() {
            row.clear();
            row.push(t.clone());
            row.extend(grid.node_coords(node).iter().map(|&x| fmt(x)));
            row.extend(field.node(k, node).iter().map(|&v| fmt(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a field CSV against known metadata; coordinates must match the grid.
pub fn read_field_csv<T: Real, R: Read>(meta: &FieldMeta, input: R) -> Result<GridField<T>> {
    let (grid, tg) = meta.grids::<T>()?;
    let dim = grid.dim();
    let comps = meta.components;
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, &field_header(dim, comps))?;
    let expected = (tg.steps() + 1) * grid.len();
    let mut values = Vec::with_capacity(expected * comps);
    let mut count = 0;
    for rec in r.records() {
        let rec = rec?;
        if count >= expected {
            return Err(Error::invalid("field CSV has extra rows"));
        }
        let (k, node) = (count / grid.len(), count % grid.len());
        let t: T = parse(&rec[0])?;
        let coords = grid.node_coords(node);
        let aligned = t == tg.time(k) && (0..dim).all(|a| parse::<T>(&rec[1 + a]).map_or(false, |x| x == coords[a]));
        if !aligned {
            return Err(Error::invalid(format!("field CSV row {} does not match the grid", count + 1)));
        }
        for c in 0..comps {
            values.push(parse(&rec[1 + dim + c])?);
        }
        count += 1;
    }
    if count != expected {
        return Err(Error::invalid(format!("field CSV has {count} rows, expected {expected}")));
    }
    GridField::from_values(grid, tg, comps, values)
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `path` and its JSON sidecar.
pub fn write_field<T: Real>(field: &GridField<T>, name: &str, path: &Path) -> Result<()> {
    write_field_csv(field, BufWriter::new(File::create(path)?))?;
    let meta = FieldMeta::of(field, name);
    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut side, &meta)?;
    side.write_all(b"\n")?;
    side.flush()?;
    Ok(())
}

pub fn read_field<T: Real>(path: &Path) -> Result<(FieldMeta, GridField<T>)> {
    let meta: FieldMeta = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let field = read_field_csv(&meta, BufReader::new(File::open(path)?))?;
    Ok((meta, field))
}

pub fn trajectory_header(state_dim: usize, control_dim: usize) -> Vec<String> {
    std::iter::once("s".to_string())
        .chain((1..=state_dim).map(|i| format!("x{i}")))
        .chain((1..=control_dim).map(|i| format!("u{i}")))
        .collect()
}

/// Node points of a trajectory as `s,x1..xN,u1..um`.
pub fn write_trajectory_csv<T: Real, W: Write>(traj: &Trajectory<T>, out: W) -> Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.controls.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(n, m))?;
    for ((t, x), u) in traj.times.iter().zip(&traj.states).zip(&traj.controls) {
        let row: Vec<String> = std::iter::once(fmt(*t))
            .chain(x.iter().map(|&v| fmt(v)))
            .chain(u.iter().map(|&v| fmt(v)))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `(s, x, u)` of a trajectory CSV.
pub fn read_trajectory_csv<T: Real, R: Read>(
    state_dim: usize,
    control_dim: usize,
    input: R,
) -> Result<Vec<(T, Vec<T>, Vec<T>)>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, &trajectory_header(state_dim, control_dim))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec.iter().map(parse::<T>).collect::<Result<Vec<T>>>()?;
        out.push((vals[0], vals[1..1 + state_dim].to_vec(), vals[1 + state_dim..].to_vec()));
    }
    Ok(out)
}

pub const REPORT_HEADER: [&str; 6] = ["iter", "objective", "eps", "descent_inner", "residual", "seconds"];

/// One line of the descent report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub iter: usize,
    pub objective: f64,
    pub eps: f64,
    pub descent_inner: f64,
    pub residual: f64,
    pub seconds: f64,
}

impl<T: Real> From<&IterationRecord<T>> for ReportRow {
    fn from(r: &IterationRecord<T>) -> Self {
        Self {
            iter: r.iter,
            objective: r.objective.as_f64(),
            eps: r.eps.as_f64(),
            descent_inner: r.descent_inner.as_f64(),
            residual: r.residual.as_f64(),
            seconds: r.seconds,
        }
    }
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            fmt(r.objective),
            fmt(r.eps),
            fmt(r.descent_inner),
            fmt(r.residual),
            format!("{:.6}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = REPORT_HEADER.iter().map(|s| s.to_string()).collect();
    check_header(r.headers()?, &header)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let iter = rec[0]
            .parse()
            .map_err(|_| Error::invalid(format!("bad iteration index {:?}", &rec[0])))?;
        out.push(ReportRow {
            iter,
            objective: parse(&rec[1])?,
            eps: parse(&rec[2])?,
            descent_inner: parse(&rec[3])?,
            residual: parse(&rec[4])?,
            seconds: parse(&rec[5])?,
        });
    }
    Ok(out)
}

pub fn matrix_header(n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=n).flat_map(|i| (1..=n).map(move |j| format!("F{i}{j}"))))
        .collect()
}

/// `t,F11..FNN` with entries row-major.
pub fn write_matrix_path_csv<T: Real, W: Write>(path: &MatrixPath<T>, out: W) -> Result<()> {
    let n = path.values()[0].nrows();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(matrix_header(n))?;
    for (k, m) in path.values().iter().enumerate() {
        let row: Vec<String> = std::iter::once(fmt(path.time_grid().time(k)))
            .chain((0..n).flat_map(|i| (0..n).map(move |j| fmt(m[(i, j)]))))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix path; the time column must be uniform from its first to
/// its last entry.
pub fn read_matrix_path_csv<T: Real, R: Read>(input: R) -> Result<MatrixPath<T>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let n = (headers.len().saturating_sub(1) as f64).sqrt().round() as usize;
    check_header(&headers, &matrix_header(n))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec.iter().map(parse::<T>).collect::<Result<Vec<T>>>()?;
        times.push(vals[0]);
        values.push(DMatrix::from_row_slice(n, n, &vals[1..]));
    }
    if times.len() < 2 {
        return Err(Error::invalid("matrix path needs at least two rows"));
    }
    let tg = TimeGrid::new(times[0], *times.last().unwrap(), times.len() - 1)?;
    if times.iter().enumerate().any(|(k, &t)| t != tg.time(k)) {
        return Err(Error::invalid("matrix path times are not a uniform grid"));
    }
    MatrixPath::new(tg, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::integrate_flow;
    use crate::lqr::{derive_lqr, solve_riccati};
    use crate::problem::{lqr_to_problem, LqrSpec};
    use nalgebra::DVector;

    fn sample_field() -> GridField<f64> {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 0.3], vec![5, 4]).unwrap();
        let tg = TimeGrid::new(0.0, 0.7, 6).unwrap();
        GridField::from_fn(g, tg, 2, |t: f64, x: &DVector<f64>| {
            DVector::from_vec(vec![(t * x[0]).sin() / 3.0, x[1].exp() - t])
        })
    }

    #[test]
    fn field_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        let field = sample_field();
        write_field(&field, "u", &path).unwrap();
        let (meta, back) = read_field::<f64>(&path).unwrap();
        assert_eq!(meta.name, "u");
        assert_eq!(back, field);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x1,x2,c1,c2\n"));
        assert_eq!(text.lines().count(), 1 + 7 * 20);
    }

    #[test]
    fn f32_field_round_trips() {
        let g: Grid<f32> = Grid::uniform(1, 0.0, 1.0, 7).unwrap();
        let tg = TimeGrid::new(0.0f32, 1.0, 3).unwrap();
        let field = GridField::from_fn(g, tg, 1, |t: f32, x: &DVector<f32>| DVector::from_element(1, t / 3.0 + x[0]));
        let mut buf = Vec::new();
        write_field_csv(&field, &mut buf).unwrap();
        let back: GridField<f32> = read_field_csv(&FieldMeta::of(&field, "u"), buf.as_slice()).unwrap();
        assert_eq!(back, field);
    }

    #[test]
    fn mismatched_rows_are_rejected() {
        let field = sample_field();
        let mut buf = Vec::new();
        write_field_csv(&field, &mut buf).unwrap();
        let mut meta = FieldMeta::of(&field, "u");
        meta.hi[0] = 2.0;
        assert!(read_field_csv::<f64, _>(&meta, buf.as_slice()).is_err());
        let truncated = &buf[..buf.len() / 2];
        let truncated = &truncated[..truncated.iter().rposition(|&b| b == b'\n').unwrap() + 1];
        assert!(read_field_csv::<f64, _>(&FieldMeta::of(&field, "u"), truncated).is_err());
    }

    #[test]
    fn trajectory_round_trips() {
        let spec = LqrSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        let prob = lqr_to_problem(&spec).unwrap();
        let g: Grid<f64> = Grid::uniform(1, -2.0, 2.0, 21).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let field = GridField::from_fn(g, tg, 1, |t: f64, x: &DVector<f64>| x * (t - 1.0));
        let tr = integrate_flow(&prob, &field, 0.25, &DVector::from_element(1, 0.8)).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&tr, &mut buf).unwrap();
        let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = read_trajectory_csv(1, 1, buf.as_slice()).unwrap();
        assert_eq!(rows.len(), tr.times.len());
        for (k, (s, x, u)) in rows.iter().enumerate() {
            assert_eq!(*s, tr.times[k]);
            assert_eq!(x[0], tr.states[k][0]);
            assert_eq!(u[0], tr.controls[k][0]);
        }
    }

    #[test]
    fn report_round_trips() {
        let rows = vec![
            ReportRow {
                iter: 0,
                objective: 0.374,
                eps: 0.0,
                descent_inner: 0.0,
                residual: 1.0,
                seconds: 0.012345,
            },
            ReportRow {
                iter: 1,
                objective: 0.3312345678901234,
                eps: 4.0,
                descent_inner: -1.25e-3,
                residual: 0.2,
                seconds: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"iter,objective,eps,descent_inner,residual,seconds\n"));
        assert_eq!(read_report_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn riccati_path_round_trips() {
        let spec = LqrSpec::<f64>::scalar(0.3, 1.0, 1.0, 2.0, 0.5);
        let ric = solve_riccati(&derive_lqr(&spec).unwrap(), 1.0, 20).unwrap();
        let mut buf = Vec::new();
        write_matrix_path_csv(&ric, &mut buf).unwrap();
        assert!(buf.starts_with(b"t,F11\n"));
        let back: MatrixPath<f64> = read_matrix_path_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), ric.values());
        assert_eq!(matrix_header(2), ["t", "F11", "F12", "F21", "F22"]);
    }
}
