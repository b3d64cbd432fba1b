//! Event points, their dense voxel-grid representation, and the `.evs`
//! binary container.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sign of the log-intensity change that triggered an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Slab index inside a voxel grid: positive first.
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(v: i8) -> Result<Self> {
        match v {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::Range(format!("polarity must be +1 or -1, got {other}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// One asynchronous event: pixel column/row, timestamp in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventPoint {
    pub x: u16,
    pub y: u16,
    pub t: i64,
    pub p: Polarity,
}

impl EventPoint {
    pub fn new(x: u16, y: u16, t: i64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub num_bins: usize,
    pub sensor_width: usize,
    pub sensor_height: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            num_bins: 10,
            sensor_width: 128,
            sensor_height: 96,
        }
    }
}

impl VoxelConfig {
    pub fn new(num_bins: usize, sensor_width: usize, sensor_height: usize) -> Result<Self> {
        let c = Self {
            num_bins,
            sensor_width,
            sensor_height,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 || self.sensor_width == 0 || self.sensor_height == 0 {
            return Err(Error::Config(format!("voxel config needs positive sizes: {self:?}")));
        }
        Ok(())
    }

    /// Input channels of the flattened grid (`2 T`).
    pub fn channels(&self) -> usize {
        2 * self.num_bins
    }
}

/// Per-polarity, per-bin event counts over one time window.
///
/// Layout is polarity-major: `[polarity][bin][row][col]`, so flattening
/// gives `2 T` channels with the positive slab first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventVoxelGrid {
    counts: Vec<u32>,
    num_bins: usize,
    height: usize,
    width: usize,
    window: (i64, i64),
}

impl EventVoxelGrid {
    pub fn zeros(config: &VoxelConfig, window: (i64, i64)) -> Self {
        Self {
            counts: vec![0; 2 * config.num_bins * config.sensor_height * config.sensor_width],
            num_bins: config.num_bins,
            height: config.sensor_height,
            width: config.sensor_width,
            window,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> (i64, i64) {
        self.window
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    fn offset(&self, polarity: usize, bin: usize, y: usize, x: usize) -> usize {
        ((polarity * self.num_bins + bin) * self.height + y) * self.width + x
    }

    pub fn get(&self, polarity: usize, bin: usize, y: usize, x: usize) -> u32 {
        self.counts[self.offset(polarity, bin, y, x)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Cell-wise sum with another grid of the same geometry.
    pub fn accumulate(&mut self, other: &EventVoxelGrid) -> Result<()> {
        if (self.num_bins, self.height, self.width)
            != (other.num_bins, other.height, other.width)
        {
            return Err(shape_err!("voxel grids differ in geometry"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Flatten to a `2T x H x W` network input.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[2 * self.num_bins, self.height, self.width],
            self.counts.iter().map(|&c| F::of(c as f64)).collect(),
        )
        .expect("voxel geometry")
    }
}

/// Temporal bin of an event inside `[t_a, t_b]`: `floor((t_k - t_a) / (t_b - t_a) * T)`,
/// with the right edge clamped into the last bin.
pub fn bin_index(t_k: i64, t_a: i64, t_b: i64, num_bins: usize) -> Result<usize> {
    if t_a >= t_b {
        return Err(Error::Range(format!("empty window [{t_a}, {t_b}]")));
    }
    if num_bins == 0 {
        return Err(Error::Range("number of bins must be positive".into()));
    }
    if t_k < t_a || t_k > t_b {
        return Err(Error::Range(format!("timestamp {t_k} outside [{t_a}, {t_b}]")));
    }
    // exact integer floor
    let num = (t_k - t_a) as i128 * num_bins as i128;
    let bin = (num / (t_b - t_a) as i128) as usize;
    Ok(bin.min(num_bins - 1))
}

/// Accumulate `events` into a fresh grid over `[t_a, t_b]`.
pub fn voxelize(events: &[EventPoint], t_a: i64, t_b: i64, config: &VoxelConfig) -> Result<EventVoxelGrid> {
    config.validate()?;
    if t_a >= t_b {
        return Err(Error::Range(format!("empty window [{t_a}, {t_b}]")));
    }
    let mut grid = EventVoxelGrid::zeros(config, (t_a, t_b));
    for e in events {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= config.sensor_width || y >= config.sensor_height {
            return Err(Error::Range(format!(
                "event at ({x}, {y}) outside {}x{} sensor",
                config.sensor_width, config.sensor_height
            )));
        }
        let bin = bin_index(e.t, t_a, t_b, config.num_bins)?;
        let o = grid.offset(e.p.index(), bin, y, x);
        grid.counts[o] += 1;
    }
    Ok(grid)
}

/// Split a time-sorted stream into `num_ticks` half-open windows
/// `[start + k P, start + (k + 1) P)`.
pub fn slice_stream(
    stream: &[EventPoint],
    tick_period: i64,
    start: i64,
    num_ticks: usize,
) -> Result<Vec<&[EventPoint]>> {
    if tick_period <= 0 {
        return Err(Error::Range(format!("tick period must be positive, got {tick_period}")));
    }
    if let Some(i) = stream.windows(2).position(|w| w[0].t > w[1].t) {
        return Err(Error::Invalid(format!("event stream not sorted at index {}", i + 1)));
    }
    let mut out = Vec::with_capacity(num_ticks);
    let mut lo = stream.partition_point(|e| e.t < start);
    for k in 0..num_ticks {
        let end = start + (k as i64 + 1) * tick_period;
        let hi = lo + stream[lo..].partition_point(|e| e.t < end);
        out.push(&stream[lo..hi]);
        lo = hi;
    }
    Ok(out)
}

const EVS_MAGIC: &[u8; 4] = b"EVS0";
const EVS_RECORD: usize = 13;

/// Header of an `.evs` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvsHeader {
    pub width: u16,
    pub height: u16,
    pub count: u64,
}

/// Write events as `.evs`: 16-byte header (`EVS0`, width u16, height u16,
/// count u64) followed by packed little-endian 13-byte records
/// (x u16, y u16, t i64, p i8).
pub fn write_evs<W: Write>(mut w: W, width: u16, height: u16, events: &[EventPoint]) -> Result<()> {
    let mut header = [0u8; 16];
    header[..4].copy_from_slice(EVS_MAGIC);
    header[4..6].copy_from_slice(&width.to_le_bytes());
    header[6..8].copy_from_slice(&height.to_le_bytes());
    header[8..16].copy_from_slice(&(events.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(events.len() * EVS_RECORD);
    for e in events {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.push(e.p.as_i8() as u8);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_evs<R: Read>(mut r: R) -> Result<(EvsHeader, Vec<EventPoint>)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != EVS_MAGIC {
        return Err(Error::Format("bad .evs magic".into()));
    }
    let h = EvsHeader {
        width: u16::from_le_bytes([header[4], header[5]]),
        height: u16::from_le_bytes([header[6], header[7]]),
        count: u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")),
    };
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() as u64 != h.count * EVS_RECORD as u64 {
        return Err(Error::Format(format!(
            "expected {} records, found {} bytes",
            h.count,
            body.len()
        )));
    }
    let events = body
        .chunks_exact(EVS_RECORD)
        .map(|rec| {
            let e = EventPoint {
                x: u16::from_le_bytes([rec[0], rec[1]]),
                y: u16::from_le_bytes([rec[2], rec[3]]),
                t: i64::from_le_bytes(rec[4..12].try_into().expect("8 bytes")),
                p: Polarity::from_i8(rec[12] as i8)?,
            };
            if e.x >= h.width || e.y >= h.height {
                return Err(Error::Range(format!("event at ({}, {}) outside sensor", e.x, e.y)));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((h, events))
}
