//! Trajectory files: JSON lines (one record per epoch) and a compact
//! little-endian binary layout.
//!
//! Binary layout: magic `SGSTRJ01`, `n_servers: u32`, `len: u64`, then per
//! epoch `state: [u32; n]`, `action: u32`, `event tag: u8`, `event server: u32`,
//! `dt: f64`, `cost: f64`, and finally `final_state: [u32; n]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queueing::{Event, State, Trajectory};

pub const MAGIC: &[u8; 8] = b"SGSTRJ01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    Jsonl,
    Binary,
}

impl TrajectoryFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TrajectoryFormat::Jsonl => "jsonl",
            TrajectoryFormat::Binary => "bin",
        }
    }

    /// Guesses the format from the file's first bytes.
    pub fn sniff(path: &Path) -> Result<Self> {
        let mut head = [0u8; 8];
        let mut f = File::open(path)?;
        let n = f.read(&mut head)?;
        Ok(if n == 8 && &head == MAGIC {
            TrajectoryFormat::Binary
        } else {
            TrajectoryFormat::Jsonl
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n_servers: usize,
    len: usize,
    final_state: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    k: u64,
    state: Vec<u32>,
    action: usize,
    event: Event,
    dt: f64,
    cost: f64,
}

pub fn write_trajectory(t: &Trajectory, path: &Path, format: TrajectoryFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        TrajectoryFormat::Jsonl => {
            let header = Header {
                n_servers: t.n_servers,
                len: t.len(),
                final_state: t.final_state.0.clone(),
            };
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
            for r in t.records() {
                let line = Line {
                    k: r.k,
                    state: r.state.to_vec(),
                    action: r.action,
                    event: r.event,
                    dt: r.dt,
                    cost: r.cost,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        TrajectoryFormat::Binary => {
            out.write_all(MAGIC)?;
            out.write_all(&(t.n_servers as u32).to_le_bytes())?;
            out.write_all(&(t.len() as u64).to_le_bytes())?;
            for r in t.records() {
                for &x in r.state {
                    out.write_all(&x.to_le_bytes())?;
                }
                out.write_all(&(r.action as u32).to_le_bytes())?;
                let (tag, server) = match r.event {
                    Event::Arrival(n) => (0u8, n as u32),
                    Event::Departure(n) => (1, n as u32),
                    Event::Idle => (2, 0),
                };
                out.write_all(&[tag])?;
                out.write_all(&server.to_le_bytes())?;
                out.write_all(&r.dt.to_le_bytes())?;
                out.write_all(&r.cost.to_le_bytes())?;
            }
            for &x in &t.final_state.0 {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::arg(format!("malformed trajectory file: {}", msg.into()))
}

struct Le<R: Read>(R);

impl<R: Read> Le<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut b = [0u8; K];
        self.0.read_exact(&mut b).map_err(|_| corrupt("unexpected end of file"))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    match TrajectoryFormat::sniff(path)? {
        TrajectoryFormat::Binary => read_binary(path),
        TrajectoryFormat::Jsonl => read_jsonl(path),
    }
}

fn read_binary(path: &Path) -> Result<Trajectory> {
    let mut r = Le(BufReader::new(File::open(path)?));
    if &r.bytes::<8>()? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let n = r.u32()? as usize;
    let len = r.u64()? as usize;
    let mut t = Trajectory::new(n);
    let mut state = vec![0u32; n];
    for _ in 0..len {
        for x in state.iter_mut() {
            *x = r.u32()?;
        }
        let action = r.u32()? as usize;
        let [tag] = r.bytes::<1>()?;
        let server = r.u32()? as usize;
        let event = match tag {
            0 => Event::Arrival(server),
            1 => Event::Departure(server),
            2 => Event::Idle,
            other => return Err(corrupt(format!("unknown event tag {other}"))),
        };
        let dt = r.f64()?;
        let cost = r.f64()?;
        t.push(&state, action, event, dt, cost);
    }
    for x in state.iter_mut() {
        *x = r.u32()?;
    }
    t.final_state = State(state);
    Ok(t)
}

fn read_jsonl(path: &Path) -> Result<Trajectory> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(corrupt("empty file")),
    };
    let mut t = Trajectory::new(header.n_servers);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        if l.state.len() != header.n_servers || l.k != t.len() as u64 {
            return Err(corrupt(format!("record {} is inconsistent with the header", l.k)));
        }
        t.push(&l.state, l.action, l.event, l.dt, l.cost);
    }
    if t.len() != header.len || header.final_state.len() != header.n_servers {
        return Err(corrupt(format!("header promises {} records, found {}", header.len, t.len())));
    }
    t.final_state = State(header.final_state);
    Ok(t)
}
