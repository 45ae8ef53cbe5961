//! Versioned dumps for golden-file regression: a little-endian binary matrix
//! format and a JSON rendering of a [`ChannelSet`].
//!
//! Binary layout: magic `JSCEMAT\0`, u32 version, u64 rows, u64 cols, then
//! rows·cols complex128 entries in row-major order as (re, im) f64 pairs.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, C64};
use crate::measurement::{MeasurementModel, Observation};

pub const MAGIC: &[u8; 8] = b"JSCEMAT\0";
pub const VERSION: u32 = 1;

pub fn write_matrix<W: Write>(w: &mut W, m: &CMat) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let z = m[(r, c)];
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<CMat> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let v = u32::from_le_bytes(b4);
    if v != VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let mut buf = vec![0u8; n.checked_mul(16).ok_or_else(|| Error::Format("dimension overflow".into()))?];
    r.read_exact(&mut buf)?;
    let f = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().expect("8-byte slice"));
    Ok(CMat::from_fn(rows, cols, |i, j| {
        let k = i * cols + j;
        C64::new(f(2 * k), f(2 * k + 1))
    }))
}

pub fn write_vector<W: Write>(w: &mut W, v: &CVec) -> Result<()> {
    write_matrix(w, &CMat::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Row-major interleaved re/im.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&CMat> for DenseDump {
    fn from(m: &CMat) -> Self {
        let mut data = Vec::with_capacity(2 * m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)].re);
                data.push(m[(r, c)].im);
            }
        }
        DenseDump { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl From<&CVec> for DenseDump {
    fn from(v: &CVec) -> Self {
        (&CMat::from_column_slice(v.len(), 1, v.as_slice())).into()
    }
}

impl DenseDump {
    pub fn to_matrix(&self) -> Result<CMat> {
        if self.data.len() != 2 * self.rows * self.cols {
            return Err(Error::Format("dense dump length mismatch".into()));
        }
        Ok(CMat::from_fn(self.rows, self.cols, |i, j| {
            let k = i * self.cols + j;
            C64::new(self.data[2 * k], self.data[2 * k + 1])
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDump {
    pub version: u32,
    pub matrices: BTreeMap<String, DenseDump>,
}

pub fn channel_dump(ch: &ChannelSet) -> ChannelDump {
    let mut m = BTreeMap::new();
    m.insert("h_ci".to_string(), (&ch.h_ci).into());
    m.insert("h_iu".to_string(), (&ch.h_iu).into());
    m.insert("h_bu".to_string(), (&ch.h_bu).into());
    m.insert("h_su".to_string(), (&ch.h_su).into());
    m.insert("h_ib".to_string(), (&ch.h_ib).into());
    m.insert("h_cb".to_string(), (&ch.h_cb).into());
    for (k, t) in ch.targets.iter().enumerate() {
        m.insert(format!("h_its_{k}"), (&t.h_its).into());
        m.insert(format!("h_cts_{k}"), (&t.h_cts).into());
        m.insert(format!("h_itb_{k}"), (&t.h_itb).into());
        m.insert(format!("h_ctb_{k}"), (&t.h_ctb).into());
    }
    ChannelDump { version: VERSION, matrices: m }
}

/// The three group matrices, in sensor-sensing, BS-sensing, comm order.
pub fn write_model<W: Write>(w: &mut W, model: &MeasurementModel) -> Result<()> {
    for f in [&model.f_sr, &model.f_br, &model.f_c] {
        write_matrix(w, f)?;
    }
    Ok(())
}

pub fn write_observation<W: Write>(w: &mut W, y: &Observation) -> Result<()> {
    write_vector(w, &y.stacked())
}
