//! Trajectory containers and their file formats.
//!
//! Binary format: little-endian, magic "LMTR", format version u16, u32 n,
//! u32 T, u8 kind (0 = macro, 1 = micro), then the float64 payload.
//! Macro payload: T rows of 4n indicators (e_1..e_n, u_1..u_n, v_1..v_n,
//! d_1..d_n). Micro payload: per step, an n x (n+4) row-major matrix whose
//! row i holds the n transition counts out of occupation i followed by its
//! four indicators.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::sim::MarketState;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"LMTR";
pub const TRAJECTORY_FORMAT_VERSION: u16 = 1;

/// Macro trajectory X_A: T x 4n matrix of indicator values.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTrajectory {
    pub n: usize,
    pub steps: usize,
    /// Row-major, steps rows of width 4n.
    pub data: Vec<f64>,
}

impl MacroTrajectory {
    pub fn empty(n: usize, steps: usize) -> Self {
        MacroTrajectory {
            n,
            steps,
            data: vec![0.0; steps * 4 * n],
        }
    }

    pub fn width(&self) -> usize {
        4 * self.n
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub(crate) fn record(&mut self, t: usize, state: &MarketState) {
        let n = self.n;
        let w = self.width();
        let row = &mut self.data[t * w..(t + 1) * w];
        for i in 0..n {
            row[i] = state.e[i] as f64;
            row[n + i] = state.u[i] as f64;
            row[2 * n + i] = state.v[i] as f64;
            row[3 * n + i] = state.d[i];
        }
    }

    /// Aggregate unemployment rate at step t.
    pub fn unemployment_rate(&self, t: usize) -> f64 {
        let row = self.row(t);
        let n = self.n;
        let employed: f64 = row[..n].iter().sum();
        let unemployed: f64 = row[n..2 * n].iter().sum();
        if employed + unemployed == 0.0 {
            0.0
        } else {
            unemployed / (employed + unemployed)
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.n, self.steps, 0)?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (n, steps, kind) = read_header(r)?;
        if kind != 0 {
            return Err(Error::Format(format!(
                "expected macro trajectory (kind 0), found kind {kind}"
            )));
        }
        let data = read_f64s(r, steps * 4 * n)?;
        Ok(MacroTrajectory { n, steps, data })
    }

    /// CSV export: one row per step, header names each indicator column.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.n;
        let mut header = Vec::with_capacity(4 * n);
        for tag in ["e", "u", "v", "d"] {
            for i in 1..=n {
                header.push(format!("{tag}_{i}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.steps {
            let row: Vec<String> = self.row(t).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Micro trajectory X_B: per-step job-transition matrices plus the
/// companion macro indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTrajectory {
    pub indicators: MacroTrajectory,
    /// One row-major n*n matrix per step; entry i*n+j counts moves i -> j.
    pub transitions: Vec<Vec<u64>>,
}

impl MicroTrajectory {
    pub fn n(&self) -> usize {
        self.indicators.n
    }

    pub fn steps(&self) -> usize {
        self.indicators.steps
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.n();
        write_header(w, n, self.steps(), 1)?;
        for t in 0..self.steps() {
            let row = self.indicators.row(t);
            let j = &self.transitions[t];
            for i in 0..n {
                for col in 0..n {
                    w.write_all(&(j[i * n + col] as f64).to_le_bytes())?;
                }
                for k in 0..4 {
                    w.write_all(&row[k * n + i].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (n, steps, kind) = read_header(r)?;
        if kind != 1 {
            return Err(Error::Format(format!(
                "expected micro trajectory (kind 1), found kind {kind}"
            )));
        }
        let payload = read_f64s(r, steps * n * (n + 4))?;
        let mut indicators = MacroTrajectory::empty(n, steps);
        let mut transitions = Vec::with_capacity(steps);
        for t in 0..steps {
            let base = t * n * (n + 4);
            let mut j = vec![0u64; n * n];
            for i in 0..n {
                let row = &payload[base + i * (n + 4)..base + (i + 1) * (n + 4)];
                for col in 0..n {
                    let x = row[col];
                    if x < 0.0 || x.fract() != 0.0 {
                        return Err(Error::Format(format!(
                            "transition count at step {t}, ({i},{col}) is not a nonnegative integer: {x}"
                        )));
                    }
                    j[i * n + col] = x as u64;
                }
                let w = 4 * n;
                let out = &mut indicators.data[t * w..(t + 1) * w];
                for k in 0..4 {
                    out[k * n + i] = row[n + k];
                }
            }
            transitions.push(j);
        }
        Ok(MicroTrajectory {
            indicators,
            transitions,
        })
    }

    /// CSV export: one row per step, the n x (n+4) step matrix flattened.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.n();
        let mut header = Vec::new();
        for i in 1..=n {
            for j in 1..=n {
                header.push(format!("j_{i}_{j}"));
            }
            for tag in ["e", "u", "v", "d"] {
                header.push(format!("{tag}_{i}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.steps() {
            let row = self.indicators.row(t);
            let jm = &self.transitions[t];
            let mut fields = Vec::with_capacity(n * (n + 4));
            for i in 0..n {
                for j in 0..n {
                    fields.push(jm[i * n + j].to_string());
                }
                for k in 0..4 {
                    fields.push(row[k * n + i].to_string());
                }
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn write_header<W: Write>(w: &mut W, n: usize, steps: usize, kind: u8) -> Result<()> {
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&TRAJECTORY_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(steps as u32).to_le_bytes())?;
    w.write_all(&[kind])?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(usize, usize, u8)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::Format("bad magic, not a trajectory file".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported trajectory format version {version}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let steps = u32::from_le_bytes(b4) as usize;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    Ok((n, steps, kind[0]))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads a trajectory file of either kind, returning the macro view
/// (micro files contribute their indicator slices).
pub fn read_macro_view(bytes: &[u8]) -> Result<MacroTrajectory> {
    let mut cur = std::io::Cursor::new(bytes);
    let (_, _, kind) = read_header(&mut cur)?;
    let mut cur = std::io::Cursor::new(bytes);
    match kind {
        0 => MacroTrajectory::read_from(&mut cur),
        1 => Ok(MicroTrajectory::read_from(&mut cur)?.indicators),
        k => Err(Error::Format(format!("unknown trajectory kind {k}"))),
    }
}
