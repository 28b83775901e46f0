//! Event stream serialization.
//!
//! Binary `EVT1` layout (little-endian): a 16-byte header — magic `EVT1`,
//! `u16` width, `u16` height, `u32` reserved (zero), `u32` event count —
//! followed by 13 bytes per event: `u64` timestamp in microseconds, `u16` x,
//! `u16` y, `i8` polarity.
//!
//! The text debug format holds one `t x y p` line per event.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::events::Event;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";

pub fn write_evt1(path: &Path, width: u16, height: u16, events: &[Event]) -> Result<()> {
    let display = path.display().to_string();
    if events.len() > u32::MAX as usize {
        return Err(Error::Config(format!(
            "event stream of {} records exceeds the format's u32 count",
            events.len()
        )));
    }
    for e in events {
        if e.x >= width || e.y >= height {
            return Err(Error::Bounds(format!(
                "event at ({}, {}) outside sensor {width}x{height}",
                e.x, e.y
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&display, e);

    w.write_all(EVT1_MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(width).map_err(io)?;
    w.write_u16::<LittleEndian>(height).map_err(io)?;
    w.write_u32::<LittleEndian>(0).map_err(io)?; // reserved
    w.write_u32::<LittleEndian>(events.len() as u32).map_err(io)?;
    for e in events {
        w.write_u64::<LittleEndian>(e.t).map_err(io)?;
        w.write_u16::<LittleEndian>(e.x).map_err(io)?;
        w.write_u16::<LittleEndian>(e.y).map_err(io)?;
        w.write_i8(e.polarity).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_evt1(path: &Path) -> Result<(u16, u16, Vec<Event>)> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(&display, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EVT1_MAGIC {
        return Err(Error::format(&display, "bad magic, not an event file"));
    }
    let width = r.read_u16::<LittleEndian>().map_err(io)?;
    let height = r.read_u16::<LittleEndian>().map_err(io)?;
    let _reserved = r.read_u32::<LittleEndian>().map_err(io)?;
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut events = Vec::with_capacity(count as usize);
    for i in 0..count {
        let t = r.read_u64::<LittleEndian>().map_err(io)?;
        let x = r.read_u16::<LittleEndian>().map_err(io)?;
        let y = r.read_u16::<LittleEndian>().map_err(io)?;
        let polarity = r.read_i8().map_err(io)?;
        if polarity != -1 && polarity != 1 {
            return Err(Error::format(
                &display,
                format!("record {i} has polarity {polarity}"),
            ));
        }
        if x >= width || y >= height {
            return Err(Error::format(
                &display,
                format!("record {i} at ({x}, {y}) outside sensor {width}x{height}"),
            ));
        }
        events.push(Event { x, y, t, polarity });
    }
    Ok((width, height, events))
}

pub fn write_events_text(path: &Path, events: &[Event]) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    for e in events {
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.polarity)
            .map_err(|er| Error::io(&display, er))?;
    }
    w.flush().map_err(|er| Error::io(&display, er))
}

pub fn read_events_text(path: &Path) -> Result<Vec<Event>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut events = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |field: Option<&str>, what: &str| -> Result<i128> {
            field
                .and_then(|s| s.parse::<i128>().ok())
                .ok_or_else(|| Error::format(&display, format!("line {}: bad {what}", lineno + 1)))
        };
        let t = parse(parts.next(), "timestamp")? as u64;
        let x = parse(parts.next(), "x")? as u16;
        let y = parse(parts.next(), "y")? as u16;
        let p = parse(parts.next(), "polarity")? as i8;
        events.push(Event::new(x, y, t, p)?);
    }
    Ok(events)
}
