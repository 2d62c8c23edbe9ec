//! File formats: ESRI ASCII rasters, gauge registry and discharge CSVs,
//! packed binary forcing.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{DrainagePlan, Gauge, GaugeSet};
use crate::model::ForcingSeries;

pub const DEFAULT_NODATA: f64 = -9999.0;

/// An ESRI ASCII grid held in memory, row-major from the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct AsciiGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub data: Vec<f64>,
}

impl AsciiGrid {
    pub fn new(nrows: usize, ncols: usize, cellsize: f64, data: Vec<f64>) -> Self {
        Self {
            ncols,
            nrows,
            xllcorner: 0.0,
            yllcorner: 0.0,
            cellsize,
            nodata: DEFAULT_NODATA,
            data,
        }
    }

    /// Grid over the plan's geometry with inactive cells set to no-data.
    pub fn from_plan(plan: &DrainagePlan, values: &[f64]) -> Self {
        let data = (0..plan.n_cells())
            .map(|c| {
                if plan.is_active(c) {
                    values[c]
                } else {
                    DEFAULT_NODATA
                }
            })
            .collect();
        Self::new(plan.nrows(), plan.ncols(), plan.cell_size(), data)
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || v.is_nan()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut tokens = text.split_ascii_whitespace().peekable();
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = 0.0;
        let mut yll = 0.0;
        let mut cellsize = None;
        let mut nodata = DEFAULT_NODATA;
        while let Some(tok) = tokens.peek() {
            if tok.parse::<f64>().is_ok() {
                break;
            }
            let key = tokens.next().unwrap().to_ascii_lowercase();
            let value = tokens
                .next()
                .ok_or_else(|| format!("header key '{key}' without value"))?;
            let num: f64 = value
                .parse()
                .map_err(|_| format!("bad header value '{value}' for '{key}'"))?;
            match key.as_str() {
                "ncols" => ncols = Some(num as usize),
                "nrows" => nrows = Some(num as usize),
                "xllcorner" | "xllcenter" => xll = num,
                "yllcorner" | "yllcenter" => yll = num,
                "cellsize" => cellsize = Some(num),
                "nodata_value" => nodata = num,
                _ => return Err(format!("unknown header key '{key}'")),
            }
        }
        let ncols = ncols.ok_or("missing ncols")?;
        let nrows = nrows.ok_or("missing nrows")?;
        let cellsize = cellsize.ok_or("missing cellsize")?;
        let mut data = Vec::with_capacity(ncols * nrows);
        for tok in tokens {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| format!("bad cell value '{tok}'"))?,
            );
        }
        if data.len() != ncols * nrows {
            return Err(format!(
                "expected {} values, found {}",
                ncols * nrows,
                data.len()
            ));
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner: xll,
            yllcorner: yll,
            cellsize,
            nodata,
            data,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 24 + 128);
        s.push_str(&format!("ncols {}\n", self.ncols));
        s.push_str(&format!("nrows {}\n", self.nrows));
        s.push_str(&format!("xllcorner {}\n", fmt_f64(self.xllcorner)));
        s.push_str(&format!("yllcorner {}\n", fmt_f64(self.yllcorner)));
        s.push_str(&format!("cellsize {}\n", fmt_f64(self.cellsize)));
        s.push_str(&format!("NODATA_value {}\n", fmt_f64(self.nodata)));
        for row in self.data.chunks(self.ncols.max(1)) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| fmt_f64(if v.is_nan() { self.nodata } else { v }))
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

/// Exact text form of a float: integers verbatim, otherwise 17 significant
/// digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 && v.is_sign_negative() {
        "-0".to_string()
    } else if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.16e}")
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a D8 flow-direction raster; no-data cells are outside the domain.
pub fn read_drainage(path: &Path) -> Result<DrainagePlan> {
    let grid = AsciiGrid::read(path)?;
    let mut codes = Vec::with_capacity(grid.data.len());
    for (i, &v) in grid.data.iter().enumerate() {
        if grid.is_nodata(v) {
            codes.push(None);
        } else if v.fract() == 0.0 && (0.0..=8.0).contains(&v) {
            codes.push(Some(v as u8));
        } else {
            return Err(Error::InvalidFlowCode {
                row: i / grid.ncols,
                col: i % grid.ncols,
                code: v as i64,
            });
        }
    }
    DrainagePlan::new(grid.nrows, grid.ncols, grid.cellsize, codes)
}

pub fn write_drainage(plan: &DrainagePlan, path: &Path) -> Result<()> {
    let data: Vec<f64> = plan
        .flow_dir()
        .iter()
        .map(|c| c.map_or(DEFAULT_NODATA, f64::from))
        .collect();
    AsciiGrid::new(plan.nrows(), plan.ncols(), plan.cell_size(), data).write(path)
}

/// Reads a raster aligned with `plan`, returning the full-grid values.
pub fn read_map(plan: &DrainagePlan, path: &Path) -> Result<Vec<f64>> {
    let grid = AsciiGrid::read(path)?;
    if grid.nrows != plan.nrows() || grid.ncols != plan.ncols() {
        return Err(Error::parse(
            path,
            format!(
                "grid is {}x{}, drainage plan is {}x{}",
                grid.nrows,
                grid.ncols,
                plan.nrows(),
                plan.ncols()
            ),
        ));
    }
    let mut data = grid.data.clone();
    for (c, v) in data.iter_mut().enumerate() {
        if plan.is_active(c) {
            if grid.is_nodata(*v) {
                let (row, col) = plan.coords(c);
                return Err(Error::parse(
                    path,
                    format!("no-data value at active cell ({row}, {col})"),
                ));
            }
        } else {
            *v = f64::NAN;
        }
    }
    Ok(data)
}

pub fn write_map(plan: &DrainagePlan, values: &[f64], path: &Path) -> Result<()> {
    AsciiGrid::from_plan(plan, values).write(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeRecord {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Reads `gauge_id,row,col,weight`.
pub fn read_gauge_registry(path: &Path) -> Result<Vec<GaugeRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    check_header(path, rdr.headers(), &["gauge_id", "row", "col", "weight"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::parse(path, format!("bad number '{}'", field(i))))
        };
        out.push(GaugeRecord {
            id: field(0).to_string(),
            row: num(1)? as usize,
            col: num(2)? as usize,
            weight: num(3)?,
        });
    }
    Ok(out)
}

pub fn write_gauge_registry(records: &[GaugeRecord], path: &Path) -> Result<()> {
    let mut s = String::from("gauge_id,row,col,weight\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.id,
            r.row,
            r.col,
            fmt_f64(r.weight)
        ));
    }
    write_text(path, &s)
}

fn check_header(
    path: &Path,
    headers: csv::Result<&csv::StringRecord>,
    expected: &[&str],
) -> Result<()> {
    let headers = headers.map_err(|e| Error::parse(path, e.to_string()))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(
            path,
            format!(
                "expected columns {}, found {}",
                expected.join(","),
                got.join(",")
            ),
        ));
    }
    Ok(())
}

/// Discharge series keyed by gauge id, from `time,gauge_id,q_m3s`.
pub fn read_discharge(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    check_header(path, rdr.headers(), &["time", "gauge_id", "q_m3s"])?;
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("bad time '{}'", &rec[0])))?;
        let id = rec[1].trim().to_string();
        let q: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("bad discharge '{}'", &rec[2])))?;
        match series.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push((t, q)),
            None => series.push((id, vec![(t, q)])),
        }
    }
    let mut out = Vec::with_capacity(series.len());
    for (id, mut values) in series {
        values.sort_by_key(|(t, _)| *t);
        for (i, (t, _)) in values.iter().enumerate() {
            if *t != i {
                return Err(Error::parse(
                    path,
                    format!("gauge '{id}': timesteps must be contiguous from 0"),
                ));
            }
        }
        out.push((id, values.into_iter().map(|(_, q)| q).collect()));
    }
    Ok(out)
}

pub fn write_discharge(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let mut s = String::from("time,gauge_id,q_m3s\n");
    let n_t = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for t in 0..n_t {
        for (id, v) in series {
            if let Some(q) = v.get(t) {
                s.push_str(&format!("{t},{id},{}\n", fmt_f64(*q)));
            }
        }
    }
    write_text(path, &s)
}

/// Joins the registry with observed series into a [`GaugeSet`].
///
/// Gauges are sorted by id so the set is independent of file row order.
pub fn build_gauge_set(
    plan: &DrainagePlan,
    registry: &[GaugeRecord],
    observed: &[(String, Vec<f64>)],
) -> Result<GaugeSet> {
    let mut gauges = Vec::with_capacity(registry.len());
    for r in registry {
        if r.row >= plan.nrows() || r.col >= plan.ncols() {
            return Err(Error::InactiveCell {
                row: r.row,
                col: r.col,
            });
        }
        let obs = observed
            .iter()
            .find(|(id, _)| *id == r.id)
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        gauges.push(Gauge {
            id: r.id.clone(),
            cell: plan.index(r.row, r.col),
            weight: r.weight,
            observed: obs,
        });
    }
    gauges.sort_by(|a, b| a.id.cmp(&b.id));
    GaugeSet::new(plan, gauges)
}

const FORCING_MAGIC: &[u8; 8] = b"HYDFRC01";

/// Packed forcing layout (all little-endian):
///
/// ```text
/// magic  8 bytes  "HYDFRC01"
/// nrows  u32
/// ncols  u32
/// n_t    u64
/// dt     f64      seconds
/// precip n_t * nrows * ncols f64, time-major then row-major
/// pet    n_t * nrows * ncols f64
/// ```
pub fn write_forcing_bin(
    forcing: &ForcingSeries,
    nrows: usize,
    ncols: usize,
    path: &Path,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FORCING_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(nrows as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(ncols as u32).map_err(io)?;
    w.write_u64::<LittleEndian>(forcing.n_steps() as u64)
        .map_err(io)?;
    w.write_f64::<LittleEndian>(forcing.dt).map_err(io)?;
    for v in forcing.precip.iter().chain(&forcing.pet) {
        w.write_f64::<LittleEndian>(*v).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_forcing_bin(path: &Path) -> Result<(ForcingSeries, usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != FORCING_MAGIC {
        return Err(Error::parse(path, "not a packed forcing file"));
    }
    let nrows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let ncols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let n_t = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let dt = r.read_f64::<LittleEndian>().map_err(io)?;
    let n = n_t * nrows * ncols;
    let mut precip = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut precip).map_err(io)?;
    let mut pet = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut pet).map_err(io)?;
    let forcing = ForcingSeries::new(nrows * ncols, precip, pet, dt)?;
    Ok((forcing, nrows, ncols))
}

/// Reads `prcp/<t>.asc` and `pet/<t>.asc` for t = 0, 1, … until the first
/// missing step.
pub fn read_forcing_dir(plan: &DrainagePlan, dir: &Path, dt: f64) -> Result<ForcingSeries> {
    let mut precip = Vec::new();
    let mut pet = Vec::new();
    let mut t = 0usize;
    loop {
        let p = dir.join("prcp").join(format!("{t}.asc"));
        let e = dir.join("pet").join(format!("{t}.asc"));
        if !p.exists() {
            break;
        }
        for (path, sink) in [(p, &mut precip), (e, &mut pet)] {
            let map = read_map(plan, &path)?;
            sink.extend(map.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }));
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::parse(dir, "no forcing grids found under prcp/"));
    }
    ForcingSeries::new(plan.n_cells(), precip, pet, dt)
}

/// Picks the forcing reader from the path: directories use the per-step
/// raster layout, files the packed binary.
pub fn read_forcing(plan: &DrainagePlan, path: &Path, dt: f64) -> Result<ForcingSeries> {
    if path.is_dir() {
        return read_forcing_dir(plan, path, dt);
    }
    let (forcing, nrows, ncols) = read_forcing_bin(path)?;
    if nrows != plan.nrows() || ncols != plan.ncols() {
        return Err(Error::parse(
            path,
            "forcing geometry differs from drainage plan",
        ));
    }
    Ok(forcing)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_header_and_values() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1000\nNODATA_value -9999\n1 2\n-9999 4.5\n";
        let g = AsciiGrid::parse(text).unwrap();
        assert_eq!((g.nrows, g.ncols), (2, 2));
        assert_eq!(g.data, vec![1.0, 2.0, -9999.0, 4.5]);
        assert!(g.is_nodata(g.data[2]));
    }

    #[test]
    fn rejects_short_body() {
        let text = "ncols 2\nnrows 2\ncellsize 1\n1 2 3\n";
        assert!(AsciiGrid::parse(text).is_err());
    }

    proptest! {
        #[test]
        fn raster_text_round_trips(values in proptest::collection::vec(-1e12f64..1e12, 6)) {
            let g = AsciiGrid::new(2, 3, 1000.0, values.clone());
            let back = AsciiGrid::parse(&g.to_text()).unwrap();
            for (a, b) in values.iter().zip(&back.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
