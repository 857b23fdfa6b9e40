//! Event streams and event voxel grids.
//!
//! Two on-disk formats are supported:
//!
//! * CSV, one `t_us,x,y,p` record per line with `p` in `{0, 1}` mapped to
//!   polarity `{-1, +1}`. Blank lines and lines starting with `#` are skipped.
//! * Binary, packed little-endian records of `(u64 t_us, u16 x, u16 y, i8 p)`,
//!   13 bytes each, with `p` in `{-1, +1}`.

use std::io::Write;

use crate::error::{Error, Result};

pub const BINARY_RECORD_BYTES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1.
    pub polarity: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: i8) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guess the format from a file extension (`.csv`/`.txt` vs anything else).
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

/// Sensor resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

/// Parse and validate a complete event stream.
pub fn parse_event_stream(
    source: &[u8],
    format: EventFormat,
    resolution: Resolution,
) -> Result<Vec<Event>> {
    let events = match format {
        EventFormat::Csv => parse_csv(source)?,
        EventFormat::Binary => parse_binary(source)?,
    };
    validate_events(&events, resolution)?;
    Ok(events)
}

fn parse_csv(source: &[u8]) -> Result<Vec<Event>> {
    let text = std::str::from_utf8(source).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        message: "input is not valid UTF-8".into(),
    })?;
    let mut events = Vec::new();
    let mut offset = 0usize;
    for raw_line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += raw_line.len();
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            offset: line_offset,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| bad(format!("invalid timestamp `{}`", fields[0])))?;
        let x: u16 = fields[1]
            .parse()
            .map_err(|_| bad(format!("invalid x coordinate `{}`", fields[1])))?;
        let y: u16 = fields[2]
            .parse()
            .map_err(|_| bad(format!("invalid y coordinate `{}`", fields[2])))?;
        let polarity = match fields[3] {
            "1" => 1,
            "0" => -1,
            other => return Err(bad(format!("polarity must be 0 or 1, found `{other}`"))),
        };
        events.push(Event { t, x, y, polarity });
    }
    Ok(events)
}

fn parse_binary(source: &[u8]) -> Result<Vec<Event>> {
    let full = source.len() / BINARY_RECORD_BYTES * BINARY_RECORD_BYTES;
    if full != source.len() {
        return Err(Error::Parse {
            offset: full,
            message: format!(
                "truncated record: {} trailing bytes",
                source.len() - full
            ),
        });
    }
    let mut events = Vec::with_capacity(source.len() / BINARY_RECORD_BYTES);
    for (i, rec) in source.chunks_exact(BINARY_RECORD_BYTES).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let polarity = rec[12] as i8;
        if polarity != 1 && polarity != -1 {
            return Err(Error::Parse {
                offset: i * BINARY_RECORD_BYTES + 12,
                message: format!("polarity must be -1 or +1, found {polarity}"),
            });
        }
        events.push(Event { t, x, y, polarity });
    }
    Ok(events)
}

fn validate_events(events: &[Event], res: Resolution) -> Result<()> {
    let mut prev = 0u64;
    for (i, ev) in events.iter().enumerate() {
        if ev.x as usize >= res.width || ev.y as usize >= res.height {
            return Err(Error::Validation(format!(
                "event {i} at ({}, {}) lies outside the {}x{} sensor",
                ev.x, ev.y, res.width, res.height
            )));
        }
        if i > 0 && ev.t < prev {
            return Err(Error::Ordering {
                index: i,
                prev,
                t: ev.t,
            });
        }
        prev = ev.t;
    }
    Ok(())
}

pub fn write_csv<W: Write>(mut out: W, events: &[Event]) -> std::io::Result<()> {
    for ev in events {
        let p = if ev.polarity > 0 { 1 } else { 0 };
        writeln!(out, "{},{},{},{}", ev.t, ev.x, ev.y, p)?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(mut out: W, events: &[Event]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(events.len() * BINARY_RECORD_BYTES);
    for ev in events {
        buf.extend_from_slice(&ev.t.to_le_bytes());
        buf.extend_from_slice(&ev.x.to_le_bytes());
        buf.extend_from_slice(&ev.y.to_le_bytes());
        buf.push(ev.polarity as u8);
    }
    out.write_all(&buf)
}

/// Spatio-temporal accumulation of signed events into `bins` temporal slices.
///
/// Layout is bin-major, then row-major: `data[(b * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventVoxelGrid {
    pub bins: usize,
    pub width: usize,
    pub height: usize,
    pub t_start: u64,
    pub t_end: u64,
    pub frame_id: u64,
    pub data: Vec<f64>,
}

impl EventVoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize, t_start: u64, t_end: u64) -> Self {
        Self {
            bins,
            width,
            height,
            t_start,
            t_end,
            frame_id: 0,
            data: vec![0.0; bins * width * height],
        }
    }

    pub fn at(&self, bin: usize, x: usize, y: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Window midpoint time in seconds.
    pub fn timestamp_s(&self) -> f64 {
        (self.t_start as f64 + self.t_end as f64) * 0.5e-6
    }
}

/// Accumulate events into a voxel grid with bilinear temporal weights.
///
/// Events are sorted before accumulation so that the result does not depend
/// on their input order.
pub fn build_voxel_grid(
    events: &[Event],
    t_start: u64,
    t_end: u64,
    bins: usize,
    resolution: Resolution,
) -> Result<EventVoxelGrid> {
    if bins == 0 {
        return Err(Error::Config("voxel grid needs at least one bin".into()));
    }
    if t_end <= t_start {
        return Err(Error::Config(format!(
            "empty time window [{t_start}, {t_end})"
        )));
    }
    let Resolution { width, height } = resolution;
    let mut grid = EventVoxelGrid::zeros(bins, width, height, t_start, t_end);

    let mut sorted = events.to_vec();
    sorted.sort_unstable();

    let span = (t_end - t_start) as f64;
    let scale = (bins - 1) as f64 / span;
    let plane = width * height;
    for ev in &sorted {
        if ev.t < t_start || ev.t >= t_end {
            return Err(Error::Validation(format!(
                "event at t={} outside window [{t_start}, {t_end})",
                ev.t
            )));
        }
        let (x, y) = (ev.x as usize, ev.y as usize);
        if x >= width || y >= height {
            return Err(Error::Validation(format!(
                "event at ({x}, {y}) outside {width}x{height} sensor"
            )));
        }
        let tau = (ev.t - t_start) as f64 * scale;
        let lower = (tau.floor() as usize).min(bins - 1);
        let frac = tau - lower as f64;
        let p = ev.polarity as f64;
        let pix = y * width + x;
        grid.data[lower * plane + pix] += p * (1.0 - frac);
        if frac > 0.0 && lower + 1 < bins {
            grid.data[(lower + 1) * plane + pix] += p * frac;
        }
    }
    Ok(grid)
}

/// How a stream is cut into voxel-grid windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Consecutive windows of fixed duration in microseconds, starting at the
    /// first event.
    FixedDuration(u64),
    /// Windows holding a fixed number of events (the last may hold fewer).
    FixedCount(usize),
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::FixedDuration(50_000)
    }
}

/// A `[t_start, t_end)` slice of a sorted event stream.
#[derive(Debug, Clone, Copy)]
pub struct EventWindow<'a> {
    pub t_start: u64,
    pub t_end: u64,
    pub events: &'a [Event],
}

pub fn slice_windows(events: &[Event], policy: WindowPolicy) -> Result<Vec<EventWindow<'_>>> {
    let mut windows = Vec::new();
    if events.is_empty() {
        return Ok(windows);
    }
    match policy {
        WindowPolicy::FixedDuration(d) => {
            if d == 0 {
                return Err(Error::Config("window duration must be positive".into()));
            }
            let t0 = events[0].t;
            let mut start = 0usize;
            let mut k = 0u64;
            while start < events.len() {
                let t_start = t0 + k * d;
                let t_end = t_start + d;
                let end = start + events[start..].partition_point(|e| e.t < t_end);
                windows.push(EventWindow {
                    t_start,
                    t_end,
                    events: &events[start..end],
                });
                start = end;
                k += 1;
            }
        }
        WindowPolicy::FixedCount(n) => {
            if n == 0 {
                return Err(Error::Config("events per window must be positive".into()));
            }
            let chunks: Vec<&[Event]> = events.chunks(n).collect();
            for (i, chunk) in chunks.iter().enumerate() {
                let t_start = chunk[0].t;
                let last = chunk[chunk.len() - 1].t;
                let t_end = chunks
                    .get(i + 1)
                    .map(|next| next[0].t)
                    .unwrap_or(last + 1)
                    .max(last + 1);
                windows.push(EventWindow {
                    t_start,
                    t_end,
                    events: chunk,
                });
            }
        }
    }
    Ok(windows)
}

/// Slice a stream and voxelize every window, assigning consecutive frame ids.
pub fn voxelize_stream(
    events: &[Event],
    policy: WindowPolicy,
    bins: usize,
    resolution: Resolution,
) -> Result<Vec<EventVoxelGrid>> {
    slice_windows(events, policy)?
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut g = build_voxel_grid(w.events, w.t_start, w.t_end, bins, resolution)?;
            g.frame_id = i as u64;
            Ok(g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RES: Resolution = Resolution {
        width: 240,
        height: 180,
    };

    fn random_events(n: usize, seed: u64, t_max: u64) -> Vec<Event> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut evs: Vec<Event> = (0..n)
            .map(|_| Event {
                t: rng.random_range(0..t_max),
                x: rng.random_range(0..RES.width as u16),
                y: rng.random_range(0..RES.height as u16),
                polarity: if rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        evs.sort_by_key(|e| e.t);
        evs
    }

    #[test]
    fn empty_input_parses_to_nothing() {
        assert!(parse_event_stream(b"", EventFormat::Csv, RES).unwrap().is_empty());
        assert!(parse_event_stream(b"", EventFormat::Binary, RES)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_record_maps_fields() {
        let evs = parse_event_stream(b"1000,10,20,1", EventFormat::Csv, RES).unwrap();
        assert_eq!(evs, vec![Event::new(1000, 10, 20, 1)]);
        let evs = parse_event_stream(b"5,1,2,0\n", EventFormat::Csv, RES).unwrap();
        assert_eq!(evs[0].polarity, -1);
    }

    #[test]
    fn csv_errors_report_offsets() {
        let src = b"1,1,1,1\n2,1,x,1\n";
        match parse_event_stream(src, EventFormat::Csv, RES) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_event_stream(b"1,1,1,2", EventFormat::Csv, RES),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn out_of_range_and_unsorted_rejected() {
        assert!(matches!(
            parse_event_stream(b"1,240,0,1", EventFormat::Csv, RES),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_event_stream(b"10,0,0,1\n9,0,0,1", EventFormat::Csv, RES),
            Err(Error::Ordering { index: 1, .. })
        ));
    }

    #[test]
    fn binary_round_trip() {
        let evs = random_events(10_000, 7, 1_000_000);
        let mut buf = Vec::new();
        write_binary(&mut buf, &evs).unwrap();
        assert_eq!(buf.len(), evs.len() * BINARY_RECORD_BYTES);
        let back = parse_event_stream(&buf, EventFormat::Binary, RES).unwrap();
        assert_eq!(back, evs);
    }

    #[test]
    fn truncated_binary_is_a_parse_error() {
        let mut buf = Vec::new();
        write_binary(&mut buf, &[Event::new(1, 2, 3, 1)]).unwrap();
        buf.push(0);
        assert!(matches!(
            parse_event_stream(&buf, EventFormat::Binary, RES),
            Err(Error::Parse { offset: 13, .. })
        ));
    }

    #[test]
    fn empty_window_gives_zero_grid() {
        let g = build_voxel_grid(&[], 0, 100, 5, RES).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert_eq!(g.data.len(), 5 * 240 * 180);
    }

    #[test]
    fn event_on_bin_centre_lands_in_one_bin() {
        // tau = 50 * 4 / 100 = 2 exactly
        let g = build_voxel_grid(&[Event::new(50, 3, 4, 1)], 0, 100, 5, RES).unwrap();
        assert_eq!(g.at(2, 3, 4), 1.0);
        assert_eq!(g.total(), 1.0);
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn voxel_mass_is_conserved() {
        let evs = random_events(1000, 3, 10_000);
        let g = build_voxel_grid(&evs, 0, 10_000, 5, RES).unwrap();
        let polarity_sum: f64 = evs.iter().map(|e| e.polarity as f64).sum();
        assert!((g.total() - polarity_sum).abs() < 1e-6);
    }

    #[test]
    fn accumulation_ignores_event_order() {
        let evs = random_events(500, 11, 10_000);
        let mut shuffled = evs.clone();
        shuffled.reverse();
        shuffled.swap(3, 100);
        let a = build_voxel_grid(&evs, 0, 10_000, 5, RES).unwrap();
        let b = build_voxel_grid(&shuffled, 0, 10_000, 5, RES).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn voxel_grid_rejects_bad_inputs() {
        assert!(matches!(
            build_voxel_grid(&[], 0, 10, 0, RES),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_voxel_grid(&[Event::new(10, 0, 0, 1)], 0, 10, 5, RES),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duration_windows_cover_stream() {
        let evs = random_events(2000, 5, 1_000_000);
        let wins = slice_windows(&evs, WindowPolicy::FixedDuration(100_000)).unwrap();
        let total: usize = wins.iter().map(|w| w.events.len()).sum();
        assert_eq!(total, evs.len());
        for w in &wins {
            assert!(w.events.iter().all(|e| e.t >= w.t_start && e.t < w.t_end));
        }
    }

    #[test]
    fn count_windows_hold_n_events() {
        let evs = random_events(1050, 9, 1_000_000);
        let wins = slice_windows(&evs, WindowPolicy::FixedCount(100)).unwrap();
        assert_eq!(wins.len(), 11);
        assert!(wins[..10].iter().all(|w| w.events.len() == 100));
        for w in &wins {
            assert!(w.t_end > w.t_start);
            assert!(w.events.iter().all(|e| e.t >= w.t_start && e.t < w.t_end));
        }
    }
}
