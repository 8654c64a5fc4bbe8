//! File formats: sample CSV, IDX arrays, model JSON and trajectory CSV.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::net::{Architecture, ModelFile, Params, Sample};
use crate::train::Trajectory;

/// Reads a sample stored one example per column, one input coordinate per row.
///
/// A first row that does not parse as numbers is treated as a header.
pub fn read_sample_csv<R: Read>(reader: R) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(Error::Config(format!("row {}: {e}", k + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("sample file has no numeric rows".into()));
    }
    let n = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Sample::new(DMatrix::from_row_slice(rows.len(), n, &flat))
}

pub fn read_sample_file(path: &Path) -> Result<Sample> {
    read_sample_csv(fs::File::open(path)?)
}

pub fn write_sample_csv<W: Write>(sample: &Sample, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in sample.matrix().row_iter() {
        w.write_record(row.iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<(Architecture, Params)> {
    ModelFile::from_json(&fs::read_to_string(path)?)?.into_model()
}

pub fn write_model_file(path: &Path, arch: &Architecture, params: &Params) -> Result<()> {
    fs::write(path, ModelFile::from_model(arch, params).to_json()?)?;
    Ok(())
}

/// A dense array read from an IDX file, converted to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parses the IDX format: two zero bytes, a type code, the number of
/// dimensions, big-endian `u32` sizes, then big-endian data.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bad = |m: &str| Error::Config(format!("invalid IDX data: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing magic number"));
    }
    let (code, ndim) = (bytes[2], bytes[3] as usize);
    let width = match code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        _ => return Err(bad(&format!("unknown type code {code:#04x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("four bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(bad(&format!("expected {} data bytes, found {}", count * width, body.len())));
    }
    let data = body
        .chunks_exact(width)
        .map(|c| match code {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().expect("four bytes")) as f64,
            0x0D => f32::from_be_bytes(c.try_into().expect("four bytes")) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("eight bytes")),
        })
        .collect();
    Ok(IdxArray { dims, data })
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

/// Writes one row per snapshot:
/// `iteration,loss,region,local_dim,seen_regions,proj_x,proj_y`.
/// Missing measurements are left empty.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "loss", "region", "local_dim", "seen_regions", "proj_x", "proj_y"])?;
    for s in &traj.snapshots {
        let a = &s.annotation;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let (px, py) = a
            .projected
            .map(|(x, y)| (format!("{x:?}"), format!("{y:?}")))
            .unwrap_or_default();
        w.write_record([
            s.iteration.to_string(),
            format!("{:?}", s.loss),
            a.region.clone().unwrap_or_default(),
            opt(a.local_dim),
            opt(a.seen_regions),
            px,
            py,
        ])?;
    }
    w.flush()?;
    Ok(())
}
