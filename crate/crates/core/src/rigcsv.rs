//! Rig CSV: a header of controller names, then one row per 60 fps frame
//! with values printed to 9 significant digits.

use std::io::{Read, Write};

use ndarray::Array2;
use thiserror::Error;

use crate::rig::{ControllerMap, RigError, RigSequence};

#[derive(Debug, Error)]
pub enum RigCsvError {
    #[error("rig CSV has {found} columns, the controller map has {expected}")]
    Width { expected: usize, found: usize },
    #[error("unknown controller {0:?} in rig CSV header")]
    UnknownController(String),
    #[error("controller {0:?} appears twice in rig CSV header")]
    DuplicateController(String),
    #[error("row {row}, column {col}: {value:?} is not a number")]
    Parse { row: usize, col: usize, value: String },
    #[error("row {row} has {found} fields, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("rig CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("rig CSV i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// `printf("%.9g")` formatting.
pub fn format_sig9(v: f64) -> String {
    const P: i32 = 9;
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (P - 1 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_rig_csv<W: Write>(seq: &RigSequence, map: &ControllerMap, out: W) -> Result<(), RigCsvError> {
    let width = seq.values().ncols();
    if map.len() != width {
        return Err(RigCsvError::Width { expected: map.len(), found: width });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(map.names())?;
    let mut row = Vec::with_capacity(width);
    for frame in seq.values().rows() {
        row.clear();
        row.extend(frame.iter().map(|&v| format_sig9(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rig CSV whose header names every controller of `map` once, in
/// any order; columns are placed by name.
pub fn read_rig_csv<R: Read>(input: R, map: &ControllerMap) -> Result<RigSequence, RigCsvError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.len() != map.len() {
        return Err(RigCsvError::Width { expected: map.len(), found: header.len() });
    }
    let mut slots = Vec::with_capacity(header.len());
    let mut seen = vec![false; map.len()];
    for name in header.iter() {
        let idx = map.index_of(name).ok_or_else(|| RigCsvError::UnknownController(name.to_string()))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(RigCsvError::DuplicateController(name.to_string()));
        }
        slots.push(idx);
    }
    let mut values = Vec::new();
    let mut frames = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != slots.len() {
            return Err(RigCsvError::Ragged { row, expected: slots.len(), found: record.len() });
        }
        let mut frame = vec![0.0; map.len()];
        for (col, (field, &idx)) in record.iter().zip(&slots).enumerate() {
            frame[idx] = field
                .trim()
                .parse()
                .map_err(|_| RigCsvError::Parse { row, col, value: field.to_string() })?;
        }
        values.extend(frame);
        frames += 1;
    }
    let values = Array2::from_shape_vec((frames, map.len()), values).expect("row-major frames");
    Ok(RigSequence::new(values)?)
}
