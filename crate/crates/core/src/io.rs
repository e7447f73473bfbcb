//! File formats: plain-text and long-CSV rasters, point-pattern CSVs with
//! a JSON sidecar descriptor, and atomic writes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussfield::FieldRaster;
use crate::geometry::Window;
use crate::pattern::PointPattern;

/// What a data file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Pattern,
    Raster,
    Sample,
}

/// Sidecar JSON written next to every data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: DataKind,
    pub window: Window,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
}

/// Path of the sidecar descriptor of `data`: same stem, `.json` extension.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // temp files are private by default
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Text raster: `nx ny`, then `x_min y_min x_max y_max`, then `ny` rows of
/// `nx` values, bottom row first.
pub fn raster_to_text(r: &FieldRaster) -> String {
    let w = &r.window;
    let mut out = format!("{} {}\n{} {} {} {}\n", r.nx, r.ny, w.x_min, w.y_min, w.x_max, w.y_max);
    for row in r.values.chunks(r.nx) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn raster_from_text<R: Read>(reader: R) -> Result<FieldRaster> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        loop {
            match lines.next() {
                Some((_, Ok(l))) if l.trim().is_empty() => continue,
                Some((i, Ok(l))) => return Ok((i + 1, l)),
                Some((_, Err(e))) => return Err(e.into()),
                None => return Err(Error::Parse(format!("raster ends before the {what}"))),
            }
        }
    };
    let num = |line: usize, tok: &str| -> Result<f64> {
        tok.parse()
            .map_err(|_| Error::Parse(format!("line {line}: `{tok}` is not a number")))
    };
    let (l1, head) = next_line("header")?;
    let dims: Vec<&str> = head.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!("line {l1}: expected `nx ny`")));
    }
    let parse_dim = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Parse(format!("line {l1}: `{t}` is not a grid size")))
    };
    let (nx, ny) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    let (l2, bounds) = next_line("window bounds")?;
    let b: Vec<f64> = bounds.split_whitespace().map(|t| num(l2, t)).collect::<Result<_>>()?;
    if b.len() != 4 {
        return Err(Error::Parse(format!("line {l2}: expected `x_min y_min x_max y_max`")));
    }
    let window = Window::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::Parse(format!("line {l2}: {e}")))?;
    let mut values = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let (li, line) = next_line(&format!("row {row}"))?;
        let vals: Vec<f64> = line.split_whitespace().map(|t| num(li, t)).collect::<Result<_>>()?;
        if vals.len() != nx {
            return Err(Error::Parse(format!("line {li}: expected {nx} values, found {}", vals.len())));
        }
        values.extend(vals);
    }
    FieldRaster::new(window, nx, ny, values).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct LongRow {
    x: f64,
    y: f64,
    value: f64,
}

/// Long CSV `x,y,value` of cell centres.
pub fn raster_to_csv(r: &FieldRaster) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for iy in 0..r.ny {
        for ix in 0..r.nx {
            let c = r.cell_center(ix, iy);
            wtr.serialize(LongRow {
                x: c[0],
                y: c[1],
                value: r.get(ix, iy),
            })
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn distinct_sorted(mut v: Vec<f64>, tol: f64) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::new();
    for x in v {
        if out.last().is_none_or(|&l| x - l > tol) {
            out.push(x);
        }
    }
    out
}

/// Reads a long CSV of cell centres on a regular grid. The window is taken
/// from `window` when given, otherwise inferred as the centres' hull padded
/// by half a cell.
pub fn raster_from_csv<R: Read>(reader: R, window: Option<Window>) -> Result<FieldRaster> {
    let mut rdr = csv::Reader::from_reader(reader);
    let rows: Vec<LongRow> = rdr
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse(format!("row {}: {e}", i + 2))))
        .collect::<Result<_>>()?;
    if rows.len() < 4 {
        return Err(Error::Parse("raster CSV needs at least a 2x2 grid".into()));
    }
    let span = rows.iter().map(|r| r.x.abs().max(r.y.abs())).fold(1.0, f64::max);
    let tol = 1e-9 * span;
    let xs = distinct_sorted(rows.iter().map(|r| r.x).collect(), tol);
    let ys = distinct_sorted(rows.iter().map(|r| r.y).collect(), tol);
    let (nx, ny) = (xs.len(), ys.len());
    if nx < 2 || ny < 2 || nx * ny != rows.len() {
        return Err(Error::Parse(format!(
            "{} rows do not form a complete grid ({nx} x {ny})",
            rows.len()
        )));
    }
    let dx = (xs[nx - 1] - xs[0]) / (nx - 1) as f64;
    let dy = (ys[ny - 1] - ys[0]) / (ny - 1) as f64;
    let window = match window {
        Some(w) => w,
        None => Window::new(xs[0] - dx / 2.0, ys[0] - dy / 2.0, xs[nx - 1] + dx / 2.0, ys[ny - 1] + dy / 2.0)?,
    };
    let mut values = vec![f64::NAN; nx * ny];
    for (i, r) in rows.iter().enumerate() {
        let ix = ((r.x - xs[0]) / dx).round();
        let iy = ((r.y - ys[0]) / dy).round();
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= nx || iy >= ny || (xs[0] + ix as f64 * dx - r.x).abs() > 1e-6 * dx.max(dy) {
            return Err(Error::Parse(format!("row {}: ({}, {}) is off the regular grid", i + 2, r.x, r.y)));
        }
        if !values[iy * nx + ix].is_nan() {
            return Err(Error::Parse(format!("row {}: duplicate cell ({}, {})", i + 2, r.x, r.y)));
        }
        values[iy * nx + ix] = r.value;
    }
    FieldRaster::new(window, nx, ny, values)
}

/// Pattern CSV with header `x,y` or `x,y,label`.
pub fn pattern_to_csv(p: &PointPattern) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    match &p.labels {
        Some(labels) => {
            wtr.write_record(["x", "y", "label"]).map_err(io)?;
            for (q, l) in p.points.iter().zip(labels) {
                wtr.write_record([q[0].to_string(), q[1].to_string(), l.clone()]).map_err(io)?;
            }
        }
        None => {
            wtr.write_record(["x", "y"]).map_err(io)?;
            for q in &p.points {
                wtr.write_record([q[0].to_string(), q[1].to_string()]).map_err(io)?;
            }
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

pub fn pattern_from_csv<R: Read>(reader: R, window: Window) -> Result<PointPattern> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let labelled = match names.as_slice() {
        ["x", "y"] => false,
        ["x", "y", "label"] => true,
        _ => return Err(Error::Parse(format!("expected header `x,y[,label]`, found `{}`", names.join(",")))),
    };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("line {line}: column {} is not a number", k + 1)))
        };
        let p = [num(0)?, num(1)?];
        if !window.contains(p) {
            return Err(Error::Parse(format!("line {line}: point ({}, {}) lies outside the window", p[0], p[1])));
        }
        points.push(p);
        if labelled {
            labels.push(rec.get(2).unwrap_or("").trim().to_string());
        }
    }
    let pattern = PointPattern::new(window, points)?;
    if labelled {
        pattern.with_labels(labels)
    } else {
        Ok(pattern)
    }
}

/// Writes a pattern CSV and its sidecar descriptor.
pub fn save_pattern(path: &Path, p: &PointPattern, model: Option<&str>, seed: Option<u64>) -> Result<()> {
    write_atomic(path, pattern_to_csv(p)?.as_bytes())?;
    write_json(
        &sidecar_path(path),
        &Descriptor {
            kind: DataKind::Pattern,
            window: p.window,
            model: model.map(str::to_string),
            seed,
            count: Some(p.len()),
            grid: None,
        },
    )
}

/// Writes a raster (long CSV for a `.csv` path, text otherwise) and its
/// sidecar descriptor.
pub fn save_raster(path: &Path, r: &FieldRaster, model: Option<&str>, seed: Option<u64>) -> Result<()> {
    let body = if is_csv(path) { raster_to_csv(r)? } else { raster_to_text(r) };
    write_atomic(path, body.as_bytes())?;
    write_json(
        &sidecar_path(path),
        &Descriptor {
            kind: DataKind::Raster,
            window: r.window,
            model: model.map(str::to_string),
            seed,
            count: None,
            grid: Some([r.nx, r.ny]),
        },
    )
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Loaded data of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Pattern(PointPattern),
    Raster(FieldRaster),
}

impl Dataset {
    pub fn kind(&self) -> DataKind {
        match self {
            Dataset::Pattern(_) => DataKind::Pattern,
            Dataset::Raster(_) => DataKind::Raster,
        }
    }

    pub fn window(&self) -> Window {
        match self {
            Dataset::Pattern(p) => p.window,
            Dataset::Raster(r) => r.window,
        }
    }
}

/// Loads a data file. Patterns need their sidecar descriptor for the
/// window; rasters are recognised by a `.csv` extension (long format) or
/// otherwise read as text rasters.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let desc: Option<Descriptor> = if side.exists() && side != path {
        Some(read_json(&side)?)
    } else {
        None
    };
    let open = || fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())));
    let is_csv = is_csv(path);
    match desc.as_ref().map(|d| d.kind) {
        Some(DataKind::Pattern) => Ok(Dataset::Pattern(pattern_from_csv(open()?, desc.expect("some").window)?)),
        Some(DataKind::Raster) if is_csv => Ok(Dataset::Raster(raster_from_csv(open()?, desc.map(|d| d.window))?)),
        Some(DataKind::Raster) => Ok(Dataset::Raster(raster_from_text(open()?)?)),
        Some(DataKind::Sample) => Err(Error::Parse("sample files cannot be tested directly".into())),
        None if is_csv => {
            let mut first = String::new();
            BufReader::new(open()?).read_line(&mut first)?;
            if first.trim().split(',').map(str::trim).eq(["x", "y", "value"]) {
                Ok(Dataset::Raster(raster_from_csv(open()?, None)?))
            } else {
                Err(Error::Parse(format!(
                    "{}: pattern files need a sidecar descriptor with the window",
                    path.display()
                )))
            }
        }
        None => Ok(Dataset::Raster(raster_from_text(open()?)?)),
    }
}
