//! Event records and the `EVT1` / CSV file formats.
//!
//! `EVT1` is `"EVT1"`, an optional little-endian `u32` record count, then
//! 13-byte records `u64 t | u16 x | u16 y | i8 p`. Because 4 is not a multiple
//! of 13 the presence of the count is decided by the payload length alone.
//! CSV files hold `t,x,y,p` rows with an optional header line.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_RECORD_LEN: usize = 13;
/// Default window length in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// Pseudo-frame channel: 0 for positive, 1 for negative.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Events ordered by non-decreasing timestamp.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    /// Stable-sorts by timestamp if needed.
    pub fn new(mut events: Vec<Event>) -> Self {
        if !is_sorted(&events) {
            events.sort_by_key(|e| e.t);
        }
        Self { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn is_sorted(events: &[Event]) -> bool {
    events.windows(2).all(|w| w[0].t <= w[1].t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Evt1,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseWarning {
    /// Timestamps decreased at this record index; the stream was stable-sorted.
    Unsorted { first_index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub stream: EventStream,
    pub warnings: Vec<ParseWarning>,
}

fn finish(events: Vec<Event>) -> Parsed {
    let mut warnings = Vec::new();
    if let Some(i) = events.windows(2).position(|w| w[0].t > w[1].t) {
        log::warn!("event timestamps decrease at record {}; sorting stream", i + 1);
        warnings.push(ParseWarning::Unsorted { first_index: i + 1 });
    }
    Parsed {
        stream: EventStream::new(events),
        warnings,
    }
}

pub fn parse_evt1(bytes: &[u8]) -> Result<Parsed, DataError> {
    if bytes.len() < 4 || &bytes[..4] != EVT1_MAGIC {
        return Err(DataError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let payload = &bytes[4..];
    let records = if payload.len() % EVT1_RECORD_LEN == 0 {
        payload
    } else if payload.len() >= 4 && (payload.len() - 4) % EVT1_RECORD_LEN == 0 {
        let header = u32::from_le_bytes(payload[..4].try_into().expect("four bytes"));
        let actual = (payload.len() - 4) / EVT1_RECORD_LEN;
        if header as usize != actual {
            return Err(DataError::CountMismatch { header, actual });
        }
        &payload[4..]
    } else {
        return Err(DataError::Truncated(payload.len() % EVT1_RECORD_LEN));
    };
    let mut events = Vec::with_capacity(records.len() / EVT1_RECORD_LEN);
    for (i, r) in records.chunks_exact(EVT1_RECORD_LEN).enumerate() {
        let raw_p = r[12] as i8;
        let p = Polarity::from_i64(raw_p as i64).ok_or(DataError::Polarity {
            location: format!("record {i}"),
            value: raw_p as i64,
        })?;
        events.push(Event {
            t: u64::from_le_bytes(r[..8].try_into().expect("eight bytes")),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p,
        });
    }
    Ok(finish(events))
}

pub fn parse_csv(bytes: &[u8]) -> Result<Parsed, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(bytes);
    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && record.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            continue; // header row
        }
        if record.len() != 4 {
            return Err(DataError::Csv {
                line,
                message: format!("expected 4 fields t,x,y,p, found {}", record.len()),
            });
        }
        let field = |k: usize, name: &str| -> Result<i64, DataError> {
            record[k].parse::<i64>().map_err(|_| DataError::Csv {
                line,
                message: format!("{name} {:?} is not an integer", &record[k]),
            })
        };
        let (t, x, y, p) = (field(0, "t")?, field(1, "x")?, field(2, "y")?, field(3, "p")?);
        let coord = |v: i64, name: &str| {
            u16::try_from(v).map_err(|_| DataError::Csv {
                line,
                message: format!("{name} {v} outside 0..=65535"),
            })
        };
        let t = u64::try_from(t).map_err(|_| DataError::Csv {
            line,
            message: format!("negative timestamp {t}"),
        })?;
        let p = Polarity::from_i64(p).ok_or(DataError::Polarity {
            location: format!("line {line}"),
            value: p,
        })?;
        events.push(Event::new(t, coord(x, "x")?, coord(y, "y")?, p));
    }
    Ok(finish(events))
}

/// Parse either format, choosing by the magic bytes.
pub fn parse_events(bytes: &[u8]) -> Result<(Parsed, EventFormat), DataError> {
    if bytes.starts_with(EVT1_MAGIC) {
        Ok((parse_evt1(bytes)?, EventFormat::Evt1))
    } else if bytes.len() >= 4 && !bytes[..4].iter().all(|b| b.is_ascii()) {
        Err(DataError::BadMagic(bytes[..4].to_vec()))
    } else {
        Ok((parse_csv(bytes)?, EventFormat::Csv))
    }
}

pub fn read_event_file(path: impl AsRef<Path>) -> Result<Parsed, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::from(e).in_file(path))?;
    parse_events(&bytes).map(|(p, _)| p).map_err(|e| e.in_file(path))
}

/// Canonical `EVT1` encoding, always with the count header.
pub fn write_evt1<W: Write>(mut out: W, stream: &EventStream) -> Result<(), DataError> {
    let count = u32::try_from(stream.len()).map_err(|_| DataError::Invalid("more than 2^32 events".into()))?;
    let mut buf = Vec::with_capacity(8 + stream.len() * EVT1_RECORD_LEN);
    buf.extend_from_slice(EVT1_MAGIC);
    buf.extend_from_slice(&count.to_le_bytes());
    for e in stream.events() {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p.as_i8() as u8);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_csv<W: Write>(out: W, stream: &EventStream) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| DataError::Csv {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["t", "x", "y", "p"]).map_err(csv_err)?;
    for e in stream.events() {
        w.write_record(&[e.t.to_string(), e.x.to_string(), e.y.to_string(), e.p.as_i8().to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Events with `start <= t < start + duration`, order preserved.
pub fn window_events(stream: &EventStream, start: u64, duration: u64) -> Result<EventStream, DataError> {
    if duration == 0 {
        return Err(DataError::Invalid("window duration must be positive".into()));
    }
    let end = start.saturating_add(duration);
    let ev = stream.events();
    let lo = ev.partition_point(|e| e.t < start);
    let hi = ev.partition_point(|e| e.t < end);
    Ok(EventStream {
        events: ev[lo..hi].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i64) -> Event {
        Event::new(t, x, y, Polarity::from_i64(p).unwrap())
    }

    fn encode(stream: &EventStream) -> Vec<u8> {
        let mut buf = Vec::new();
        write_evt1(&mut buf, stream).unwrap();
        buf
    }

    #[test]
    fn empty_body_is_empty_stream() {
        assert!(parse_evt1(b"EVT1").unwrap().stream.is_empty());
        assert!(parse_evt1(b"EVT1\0\0\0\0").unwrap().stream.is_empty());
    }

    #[test]
    fn single_record_round_trip() {
        let s = EventStream::new(vec![ev(1000, 5, 7, 1)]);
        let bytes = encode(&s);
        assert_eq!(bytes.len(), 8 + 13);
        let back = parse_evt1(&bytes).unwrap();
        assert_eq!(back.stream.events(), &[ev(1000, 5, 7, 1)]);
        assert!(back.warnings.is_empty());
    }

    #[test]
    fn byte_layout_is_little_endian() {
        let bytes = encode(&EventStream::new(vec![ev(0x0102030405060708, 0x090a, 0x0b0c, -1)]));
        assert_eq!(
            bytes,
            [
                b'E', b'V', b'T', b'1', 1, 0, 0, 0, 8, 7, 6, 5, 4, 3, 2, 1, 0x0a, 0x09, 0x0c, 0x0b, 0xff
            ]
        );
    }

    #[test]
    fn headerless_records_accepted() {
        let with = encode(&EventStream::new(vec![ev(1, 2, 3, 1), ev(4, 5, 6, -1)]));
        let mut without = with[..4].to_vec();
        without.extend_from_slice(&with[8..]);
        assert_eq!(parse_evt1(&without).unwrap().stream, parse_evt1(&with).unwrap().stream);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(matches!(parse_evt1(b"EVT2"), Err(DataError::BadMagic(_))));
        assert!(matches!(parse_evt1(b"EV"), Err(DataError::BadMagic(_))));
        let good = encode(&EventStream::new(vec![ev(1, 2, 3, 1)]));
        assert!(matches!(parse_evt1(&good[..good.len() - 1]), Err(DataError::Truncated(_))));
        let mut lying = good.clone();
        lying[4] = 2;
        assert!(matches!(parse_evt1(&lying), Err(DataError::CountMismatch { header: 2, actual: 1 })));
        let mut zero_p = good;
        *zero_p.last_mut().unwrap() = 0;
        assert!(matches!(parse_evt1(&zero_p), Err(DataError::Polarity { value: 0, .. })));
    }

    #[test]
    fn shuffled_input_warns_and_sorts() {
        let raw = [ev(30, 1, 1, 1), ev(10, 2, 2, -1), ev(20, 3, 3, 1)];
        let mut bytes = b"EVT1".to_vec();
        for e in raw {
            bytes.extend_from_slice(&e.t.to_le_bytes());
            bytes.extend_from_slice(&e.x.to_le_bytes());
            bytes.extend_from_slice(&e.y.to_le_bytes());
            bytes.push(e.p.as_i8() as u8);
        }
        let parsed = parse_evt1(&bytes).unwrap();
        assert_eq!(parsed.warnings, vec![ParseWarning::Unsorted { first_index: 1 }]);
        let mut oracle = raw.to_vec();
        oracle.sort_by_key(|e| e.t);
        assert_eq!(parsed.stream.events(), oracle.as_slice());
    }

    #[test]
    fn csv_with_header_and_comments() {
        let text = b"t,x,y,p\n# comment\n 10, 1, 2, 1\n20,3,4,-1\n";
        let (parsed, fmt) = parse_events(text).unwrap();
        assert_eq!(fmt, EventFormat::Csv);
        assert_eq!(parsed.stream.events(), &[ev(10, 1, 2, 1), ev(20, 3, 4, -1)]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_csv(b"1,2,3,1\n2,2,3,0\n") {
            Err(DataError::Polarity { location, value: 0 }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        match parse_csv(b"1,2,3,1\n2,x,3,1\n") {
            Err(DataError::Csv { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv(b"1,2,3\n"), Err(DataError::Csv { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = EventStream::new(vec![ev(5, 1, 2, -1), ev(9, 65535, 0, 1)]);
        let mut buf = Vec::new();
        write_csv(&mut buf, &s).unwrap();
        assert_eq!(parse_csv(&buf).unwrap().stream, s);
    }

    #[test]
    fn window_is_half_open() {
        let s = EventStream::new(vec![ev(0, 0, 0, 1), ev(50_000, 0, 0, 1)]);
        let w = window_events(&s, 0, DEFAULT_WINDOW_US).unwrap();
        assert_eq!(w.events(), &[ev(0, 0, 0, 1)]);
        assert!(window_events(&EventStream::default(), 0, 10).unwrap().is_empty());
        assert!(window_events(&s, 0, 0).is_err());
    }

    #[test]
    fn kilohertz_stream_gives_fifty_events_per_window() {
        let s = EventStream::new((0..1000).map(|i| ev(i * 1000, 0, 0, 1)).collect());
        for start in [0, 1, 999, 12_345, 950_000] {
            // counting oracle: multiples of 1000 in [start, start + 50000)
            let expected = (start..start + 50_000).filter(|t| t % 1000 == 0 && *t < 1_000_000).count();
            assert_eq!(window_events(&s, start, 50_000).unwrap().len(), expected);
        }
        assert_eq!(window_events(&s, 12_345, 50_000).unwrap().len(), 50);
    }
}
