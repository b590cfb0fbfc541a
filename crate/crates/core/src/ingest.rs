//! Packet-header record parsing, validity filtering and fixed-count windowing.
//!
//! Two on-disk formats are understood:
//!
//! * CSV: optional `timestamp_us,src,dst` header, decimal rows, `#` comments.
//! * Binary: magic `TLNS`, one version byte, then 24-byte little-endian
//!   records `(u64 timestamp, u64 src, u64 dst)`.
//!
//! Either may be gzip-compressed; [`open_records`] detects that from a `.gz`
//! suffix.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

/// Address identifier. Wide enough for IPv6.
pub type Addr = u128;

pub const BINARY_MAGIC: &[u8; 4] = b"TLNS";
pub const BINARY_VERSION: u8 = 1;
const BINARY_RECORD_LEN: usize = 24;
const CSV_HEADER: [&str; 3] = ["timestamp_us", "src", "dst"];

/// One observed packet header event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Microseconds since the epoch.
    pub timestamp: u64,
    pub src: Addr,
    pub dst: Addr,
}

impl PacketRecord {
    pub fn new(timestamp: u64, src: Addr, dst: Addr) -> Self {
        Self { timestamp, src, dst }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },
    #[error("malformed binary input at byte offset {offset}: {reason}")]
    MalformedBinary { offset: u64, reason: String },
    #[error(
        "timestamp regression at record {record} (line {line}): {found} after {previous}, tolerance {tolerance} us"
    )]
    TimestampRegression {
        record: u64,
        line: u64,
        previous: u64,
        found: u64,
        tolerance: u64,
    },
    #[error("address {0} does not fit the 64-bit binary format")]
    AddressTooWide(Addr),
    #[error("invalid interval [{low}, {high}]: low exceeds high")]
    InvalidInterval { low: String, high: String },
    #[error("invalid filter expression: {0}")]
    InvalidFilter(String),
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error("unknown record format `{0}` (expected csv or binary)")]
    UnknownFormat(String),
    #[error("cannot infer record format from path {0}")]
    UnknownSuffix(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// On-disk record encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// Infers the format from a file name, ignoring a trailing `.gz`.
    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let name = path.to_string_lossy();
        let stem = name.strip_suffix(".gz").unwrap_or(&name);
        if stem.ends_with(".csv") || stem.ends_with(".txt") {
            Ok(Format::Csv)
        } else if stem.ends_with(".bin") || stem.ends_with(".tlns") {
            Ok(Format::Binary)
        } else {
            Err(IngestError::UnknownSuffix(name.into_owned()))
        }
    }
}

impl FromStr for Format {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "binary" | "bin" => Ok(Format::Binary),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Largest backwards timestamp step accepted, in microseconds.
    pub regression_tolerance_us: u64,
}

/// Lazily parses records from `reader` with default options.
pub fn parse_records<R: Read>(reader: R, format: Format) -> Records<R> {
    Records::new(reader, format, ParseOptions::default())
}

/// Opens a record file, transparently decompressing `.gz` inputs. When
/// `format` is `None` it is inferred from the file name.
pub fn open_records(
    path: &Path,
    format: Option<Format>,
    options: ParseOptions,
) -> Result<Records<Box<dyn Read>>, IngestError> {
    let format = match format {
        Some(f) => f,
        None => Format::from_path(path)?,
    };
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(MultiGzDecoder::new(BufReader::with_capacity(1 << 16, file)))
    } else {
        Box::new(file)
    };
    Ok(Records::new(reader, format, options))
}

enum Source<R: Read> {
    Csv {
        reader: csv::Reader<R>,
        row: csv::ByteRecord,
        first: bool,
    },
    Binary {
        reader: BufReader<R>,
        offset: u64,
        header_done: bool,
    },
}

/// Lazy record sequence. Yields records in file order; stops after the
/// first error.
pub struct Records<R: Read> {
    source: Source<R>,
    options: ParseOptions,
    last_ts: Option<u64>,
    count: u64,
    done: bool,
}

impl<R: Read> Records<R> {
    pub fn new(reader: R, format: Format, options: ParseOptions) -> Self {
        let source = match format {
            Format::Csv => Source::Csv {
                reader: csv::ReaderBuilder::new()
                    .has_headers(false)
                    .comment(Some(b'#'))
                    .flexible(true)
                    .buffer_capacity(1 << 16)
                    .from_reader(reader),
                row: csv::ByteRecord::new(),
                first: true,
            },
            Format::Binary => Source::Binary {
                reader: BufReader::with_capacity(1 << 16, reader),
                offset: 0,
                header_done: false,
            },
        };
        Self {
            source,
            options,
            last_ts: None,
            count: 0,
            done: false,
        }
    }

    /// Number of records yielded so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    fn next_raw(&mut self) -> Option<Result<(PacketRecord, u64), IngestError>> {
        match &mut self.source {
            Source::Csv { reader, row, first } => loop {
                match reader.read_byte_record(row) {
                    Ok(false) => return None,
                    Ok(true) => {}
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line());
                        return Some(Err(IngestError::MalformedCsv {
                            line,
                            reason: e.to_string(),
                        }));
                    }
                }
                let line = row.position().map_or(0, |p| p.line());
                if std::mem::take(first) && is_csv_header(row) {
                    continue;
                }
                return Some(parse_csv_row(row, line).map(|r| (r, line)));
            },
            Source::Binary {
                reader,
                offset,
                header_done,
            } => {
                if !*header_done {
                    let mut header = [0u8; 5];
                    match read_full(reader, &mut header) {
                        Ok(0) => return None,
                        Ok(5) => {}
                        Ok(n) => {
                            return Some(Err(IngestError::MalformedBinary {
                                offset: n as u64,
                                reason: "truncated header".into(),
                            }))
                        }
                        Err(e) => return Some(Err(e.into())),
                    }
                    if &header[..4] != BINARY_MAGIC {
                        return Some(Err(IngestError::MalformedBinary {
                            offset: 0,
                            reason: "bad magic, expected TLNS".into(),
                        }));
                    }
                    if header[4] != BINARY_VERSION {
                        return Some(Err(IngestError::MalformedBinary {
                            offset: 4,
                            reason: format!("unsupported version {}", header[4]),
                        }));
                    }
                    *offset = 5;
                    *header_done = true;
                }
                let mut buf = [0u8; BINARY_RECORD_LEN];
                match read_full(reader, &mut buf) {
                    Ok(0) => None,
                    Ok(BINARY_RECORD_LEN) => {
                        let word = |i: usize| {
                            u64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap())
                        };
                        let rec = PacketRecord::new(word(0), word(1) as Addr, word(2) as Addr);
                        let at = *offset;
                        *offset += BINARY_RECORD_LEN as u64;
                        Some(Ok((rec, at)))
                    }
                    Ok(n) => Some(Err(IngestError::MalformedBinary {
                        offset: *offset,
                        reason: format!("truncated record ({n} of {BINARY_RECORD_LEN} bytes)"),
                    })),
                    Err(e) => Some(Err(e.into())),
                }
            }
        }
    }
}

impl<R: Read> Iterator for Records<R> {
    type Item = Result<PacketRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.next_raw() {
            None => {
                self.done = true;
                return None;
            }
            Some(Err(e)) => Err(e),
            Some(Ok((rec, line))) => match self.last_ts {
                Some(prev) if rec.timestamp.saturating_add(self.options.regression_tolerance_us) < prev => {
                    Err(IngestError::TimestampRegression {
                        record: self.count + 1,
                        line,
                        previous: prev,
                        found: rec.timestamp,
                        tolerance: self.options.regression_tolerance_us,
                    })
                }
                _ => {
                    self.last_ts = Some(self.last_ts.map_or(rec.timestamp, |p| p.max(rec.timestamp)));
                    self.count += 1;
                    Ok(rec)
                }
            },
        };
        if item.is_err() {
            self.done = true;
        }
        Some(item)
    }
}

fn is_csv_header(row: &csv::ByteRecord) -> bool {
    row.len() == 3
        && row
            .iter()
            .zip(CSV_HEADER)
            .all(|(field, name)| field.trim_ascii().eq_ignore_ascii_case(name.as_bytes()))
}

fn parse_csv_row(row: &csv::ByteRecord, line: u64) -> Result<PacketRecord, IngestError> {
    if row.len() != 3 {
        return Err(IngestError::MalformedCsv {
            line,
            reason: format!("expected 3 fields, found {}", row.len()),
        });
    }
    let field = |i: usize, name: &str| -> Result<u128, IngestError> {
        let raw = &row[i];
        parse_decimal(raw.trim_ascii()).ok_or_else(|| IngestError::MalformedCsv {
                line,
                reason: format!("{name} `{}` is not a non-negative integer", String::from_utf8_lossy(raw)),
            })
    };
    let ts = field(0, "timestamp")?;
    let timestamp = u64::try_from(ts).map_err(|_| IngestError::MalformedCsv {
        line,
        reason: format!("timestamp {ts} exceeds 64 bits"),
    })?;
    Ok(PacketRecord::new(timestamp, field(1, "src")?, field(2, "dst")?))
}

/// Unsigned decimal digits to `u128`; `None` on empty input, any other
/// byte, or overflow.
fn parse_decimal(digits: &[u8]) -> Option<u128> {
    if digits.is_empty() {
        return None;
    }
    let (head, tail) = digits.split_at(digits.len().min(19));
    let mut small = 0u64;
    for &b in head {
        let v = b.wrapping_sub(b'0');
        if v > 9 {
            return None;
        }
        small = small * 10 + v as u64;
    }
    let mut value = small as u128;
    for &b in tail {
        let v = b.wrapping_sub(b'0');
        if v > 9 {
            return None;
        }
        value = value.checked_mul(10)?.checked_add(v as u128)?;
    }
    Some(value)
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes records as CSV with a header row.
pub fn write_csv<'a, W: Write>(
    records: impl IntoIterator<Item = &'a PacketRecord>,
    out: W,
) -> io::Result<()> {
    let mut w = BufWriter::with_capacity(1 << 16, out);
    writeln!(w, "{}", CSV_HEADER.join(","))?;
    for r in records {
        writeln!(w, "{},{},{}", r.timestamp, r.src, r.dst)?;
    }
    w.flush()
}

/// Writes records in the fixed-width binary format.
pub fn write_binary<'a, W: Write>(
    records: impl IntoIterator<Item = &'a PacketRecord>,
    out: W,
) -> Result<(), IngestError> {
    let mut w = BufWriter::with_capacity(1 << 16, out);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&[BINARY_VERSION])?;
    for r in records {
        let src = u64::try_from(r.src).map_err(|_| IngestError::AddressTooWide(r.src))?;
        let dst = u64::try_from(r.dst).map_err(|_| IngestError::AddressTooWide(r.dst))?;
        w.write_all(&r.timestamp.to_le_bytes())?;
        w.write_all(&src.to_le_bytes())?;
        w.write_all(&dst.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Inclusive interval `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval<T> {
    low: T,
    high: T,
}

impl<T: Copy + PartialOrd + ToString> Interval<T> {
    pub fn new(low: T, high: T) -> Result<Self, IngestError> {
        if low > high {
            return Err(IngestError::InvalidInterval {
                low: low.to_string(),
                high: high.to_string(),
            });
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> T {
        self.low
    }

    pub fn high(&self) -> T {
        self.high
    }

    pub fn contains(&self, v: T) -> bool {
        self.low <= v && v <= self.high
    }
}

pub type AddrRange = Interval<Addr>;
pub type TimeRange = Interval<u64>;

/// Validity filter. Empty range lists accept everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketFilter {
    pub src_ranges: Vec<AddrRange>,
    pub dst_ranges: Vec<AddrRange>,
    pub time_range: Option<TimeRange>,
}

impl PacketFilter {
    pub fn accept_all() -> Self {
        Self::default()
    }

    pub fn accepts(&self, r: &PacketRecord) -> bool {
        let in_any = |ranges: &[AddrRange], a: Addr| ranges.is_empty() || ranges.iter().any(|i| i.contains(a));
        in_any(&self.src_ranges, r.src)
            && in_any(&self.dst_ranges, r.dst)
            && self.time_range.is_none_or(|t| t.contains(r.timestamp))
    }
}

impl FromStr for PacketFilter {
    type Err = IngestError;

    /// Parses `src=LO-HI[,LO-HI...];dst=...;time=LO-HI`. Single values
    /// (`src=7`) denote one-element intervals.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        fn bounds<T: FromStr + Copy>(part: &str) -> Result<(T, T), IngestError> {
            let bad = || IngestError::InvalidFilter(format!("bad interval `{part}`"));
            let (lo, hi) = part.split_once('-').unwrap_or((part, part));
            let lo = lo.trim().parse().map_err(|_| bad())?;
            let hi = hi.trim().parse().map_err(|_| bad())?;
            Ok((lo, hi))
        }
        let mut filter = PacketFilter::default();
        for clause in s.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            let (key, value) = clause
                .split_once('=')
                .ok_or_else(|| IngestError::InvalidFilter(format!("missing `=` in `{clause}`")))?;
            match key.trim() {
                "src" | "dst" => {
                    let mut ranges = Vec::new();
                    for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                        let (lo, hi) = bounds::<Addr>(part)?;
                        ranges.push(AddrRange::new(lo, hi)?);
                    }
                    if key.trim() == "src" {
                        filter.src_ranges.extend(ranges);
                    } else {
                        filter.dst_ranges.extend(ranges);
                    }
                }
                "time" => {
                    let (lo, hi) = bounds::<u64>(value)?;
                    filter.time_range = Some(TimeRange::new(lo, hi)?);
                }
                other => return Err(IngestError::InvalidFilter(format!("unknown key `{other}`"))),
            }
        }
        Ok(filter)
    }
}

/// Keeps exactly the records accepted by `filter`, in order.
pub fn filter_valid<'f, I>(records: I, filter: &'f PacketFilter) -> impl Iterator<Item = PacketRecord> + 'f
where
    I: IntoIterator<Item = PacketRecord>,
    I::IntoIter: 'f,
{
    records.into_iter().filter(move |r| filter.accepts(r))
}

/// Number of valid packets per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    n_valid: usize,
}

impl WindowSpec {
    pub fn new(n_valid: usize) -> Result<Self, IngestError> {
        if n_valid == 0 {
            return Err(IngestError::EmptyWindow);
        }
        Ok(Self { n_valid })
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }
}

/// Exactly `n_valid` consecutive valid packets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub index: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub records: Vec<PacketRecord>,
}

impl Window {
    pub fn n_valid(&self) -> usize {
        self.records.len()
    }

    pub fn duration_us(&self) -> u64 {
        self.end_us.saturating_sub(self.start_us)
    }

    /// Joins consecutive windows into one larger window indexed `index`.
    pub fn concat(index: u64, parts: &[Window]) -> Window {
        let records: Vec<_> = parts.iter().flat_map(|w| w.records.iter().copied()).collect();
        Window {
            index,
            start_us: parts.first().map_or(0, |w| w.start_us),
            end_us: parts.last().map_or(0, |w| w.end_us),
            records,
        }
    }
}

/// Bookkeeping for a consumed stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub windows: u64,
    pub consumed: u64,
    /// Size of the discarded trailing partial window.
    pub dropped: u64,
}

/// Iterator of fixed-count windows. The trailing partial window is
/// discarded and counted in [`WindowStream::summary`].
pub struct WindowStream<I> {
    inner: I,
    n_valid: usize,
    summary: StreamSummary,
    finished: bool,
}

pub fn window_stream<I>(records: I, spec: WindowSpec) -> WindowStream<I::IntoIter>
where
    I: IntoIterator<Item = PacketRecord>,
{
    WindowStream {
        inner: records.into_iter(),
        n_valid: spec.n_valid,
        summary: StreamSummary::default(),
        finished: false,
    }
}

impl<I> WindowStream<I> {
    /// Final once the iterator has returned `None`.
    pub fn summary(&self) -> StreamSummary {
        self.summary
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

impl<I: Iterator<Item = PacketRecord>> Iterator for WindowStream<I> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.finished {
            return None;
        }
        let mut records = Vec::with_capacity(self.n_valid);
        records.extend(self.inner.by_ref().take(self.n_valid));
        self.summary.consumed += records.len() as u64;
        if records.len() < self.n_valid {
            self.summary.dropped = records.len() as u64;
            self.finished = true;
            return None;
        }
        let window = Window {
            index: self.summary.windows,
            start_us: records[0].timestamp,
            end_us: records[records.len() - 1].timestamp,
            records,
        };
        self.summary.windows += 1;
        Some(window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse_csv(text: &str) -> Vec<Result<PacketRecord, IngestError>> {
        parse_records(text.as_bytes(), Format::Csv).collect()
    }

    #[test]
    fn csv_line_maps_fields() {
        let recs = parse_csv("1000,4,8\n");
        assert_eq!(recs.len(), 1);
        assert_eq!(*recs[0].as_ref().unwrap(), PacketRecord::new(1000, 4, 8));
    }

    #[test]
    fn empty_file_is_empty_sequence() {
        assert!(parse_csv("").is_empty());
        assert!(parse_records(&b""[..], Format::Binary).next().is_none());
    }

    #[test]
    fn malformed_row_errors_after_valid_rows() {
        let recs = parse_csv("1,1,1\n2,2,2\n3,3,3\nx,y\n4,4,4\n");
        assert_eq!(recs.len(), 4);
        assert!(recs[..3].iter().all(Result::is_ok));
        match &recs[3] {
            Err(IngestError::MalformedCsv { line, .. }) => assert_eq!(*line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_comments_and_blank_lines_are_skipped() {
        let recs = parse_csv("# capture\ntimestamp_us,src,dst\n\n5, 6, 7\n# trailing\n");
        let recs: Vec<_> = recs.into_iter().map(Result::unwrap).collect();
        assert_eq!(recs, vec![PacketRecord::new(5, 6, 7)]);
    }

    #[test]
    fn header_only_allowed_first() {
        let recs = parse_csv("1,2,3\ntimestamp_us,src,dst\n");
        assert!(recs[1].is_err());
    }

    #[test]
    fn wide_addresses_parse() {
        let line = format!("0,{},{}\n", u128::MAX, u128::MAX - 1);
        let rec = parse_csv(&line).remove(0).unwrap();
        assert_eq!(rec.src, u128::MAX);
    }

    #[test]
    fn timestamp_regression_rejected_by_default() {
        let recs = parse_csv("10,1,1\n9,1,1\n");
        assert!(matches!(
            recs[1],
            Err(IngestError::TimestampRegression { record: 2, previous: 10, found: 9, .. })
        ));
    }

    #[test]
    fn timestamp_regression_within_tolerance_passes() {
        let opts = ParseOptions { regression_tolerance_us: 5 };
        let recs: Vec<_> = Records::new(&b"10,1,1\n6,1,1\n3,1,1\n"[..], Format::Csv, opts).collect();
        assert!(recs[0].is_ok() && recs[1].is_ok());
        assert!(recs[2].is_err());
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let recs = vec![PacketRecord::new(1, 2, 3), PacketRecord::new(4, 5, u64::MAX as u128)];
        let mut buf = Vec::new();
        write_binary(&recs, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TLNS");
        assert_eq!(buf.len(), 5 + 48);
        let back: Vec<_> = parse_records(&buf[..], Format::Binary).map(Result::unwrap).collect();
        assert_eq!(back, recs);

        let cut: Vec<_> = parse_records(&buf[..buf.len() - 3], Format::Binary).collect();
        assert!(cut[0].is_ok());
        assert!(matches!(cut[1], Err(IngestError::MalformedBinary { offset: 29, .. })));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(parse_records(&bad[..], Format::Binary).next().unwrap().is_err());
    }

    #[test]
    fn binary_rejects_wide_addresses() {
        let recs = [PacketRecord::new(1, 1 << 64, 0)];
        assert!(matches!(write_binary(&recs, Vec::new()), Err(IngestError::AddressTooWide(_))));
    }

    #[test]
    fn format_inference() {
        assert_eq!(Format::from_path(Path::new("a/b.csv.gz")).unwrap(), Format::Csv);
        assert_eq!(Format::from_path(Path::new("x.tlns")).unwrap(), Format::Binary);
        assert!(Format::from_path(Path::new("x.pcap")).is_err());
        assert_eq!("BINARY".parse::<Format>().unwrap(), Format::Binary);
    }

    #[test]
    fn gzip_input_detected_by_suffix() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.csv.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::fast());
        enc.write_all(b"1,2,3\n4,5,6\n").unwrap();
        enc.finish().unwrap();
        let recs: Vec<_> = open_records(&path, None, ParseOptions::default())
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(recs, vec![PacketRecord::new(1, 2, 3), PacketRecord::new(4, 5, 6)]);
    }

    #[test]
    fn empty_filter_accepts_everything() {
        let recs = vec![PacketRecord::new(0, 1, 2), PacketRecord::new(1, 9, 9)];
        let out: Vec<_> = filter_valid(recs.clone(), &PacketFilter::accept_all()).collect();
        assert_eq!(out, recs);
    }

    #[test]
    fn src_range_filter() {
        let f = PacketFilter {
            src_ranges: vec![AddrRange::new(0, 5).unwrap()],
            ..Default::default()
        };
        let recs = vec![PacketRecord::new(0, 4, 1), PacketRecord::new(1, 9, 1)];
        let out: Vec<_> = filter_valid(recs, &f).collect();
        assert_eq!(out, vec![PacketRecord::new(0, 4, 1)]);
    }

    #[test]
    fn interval_rejects_inverted_bounds() {
        assert!(AddrRange::new(5, 4).is_err());
        assert!(TimeRange::new(3, 3).is_ok());
    }

    #[test]
    fn filter_expression_parses() {
        let f: PacketFilter = "src=0-5,10;dst=7-8;time=100-200".parse().unwrap();
        assert_eq!(f.src_ranges.len(), 2);
        assert!(f.src_ranges[1].contains(10) && !f.src_ranges[1].contains(11));
        assert_eq!(f.time_range, Some(TimeRange::new(100, 200).unwrap()));
        assert!("src=5-4".parse::<PacketFilter>().is_err());
        assert!("port=80".parse::<PacketFilter>().is_err());
        assert_eq!("".parse::<PacketFilter>().unwrap(), PacketFilter::default());
    }

    #[test]
    fn windowing_drops_trailing_partial() {
        let recs: Vec<_> = (0..10).map(|i| PacketRecord::new(i, i as u128, 0)).collect();
        let mut ws = window_stream(recs, WindowSpec::new(4).unwrap());
        let windows: Vec<_> = ws.by_ref().collect();
        assert_eq!(windows.len(), 2);
        assert!(windows.iter().all(|w| w.n_valid() == 4));
        assert_eq!(windows[1].index, 1);
        assert_eq!((windows[1].start_us, windows[1].end_us), (4, 7));
        assert_eq!(ws.summary(), StreamSummary { windows: 2, consumed: 10, dropped: 2 });
    }

    #[test]
    fn exact_fit_window() {
        let recs: Vec<_> = (0..4).map(|i| PacketRecord::new(i, 0, 0)).collect();
        let mut ws = window_stream(recs, WindowSpec::new(4).unwrap());
        assert_eq!(ws.by_ref().count(), 1);
        assert_eq!(ws.summary().dropped, 0);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(matches!(WindowSpec::new(0), Err(IngestError::EmptyWindow)));
    }

    fn arb_record() -> impl Strategy<Value = PacketRecord> {
        (0u64..1000, 0u128..64, 0u128..64).prop_map(|(t, s, d)| PacketRecord::new(t, s, d))
    }

    fn arb_filter() -> impl Strategy<Value = PacketFilter> {
        let range = (0u128..64, 0u128..32).prop_map(|(lo, w)| AddrRange::new(lo, lo + w).unwrap());
        (
            prop::collection::vec(range.clone(), 0..3),
            prop::collection::vec(range, 0..3),
            prop::option::of((0u64..1000, 0u64..500).prop_map(|(lo, w)| TimeRange::new(lo, lo + w).unwrap())),
        )
            .prop_map(|(src_ranges, dst_ranges, time_range)| PacketFilter {
                src_ranges,
                dst_ranges,
                time_range,
            })
    }

    #[test]
    fn decimal_edges() {
        assert_eq!(parse_decimal(b"0"), Some(0));
        assert_eq!(parse_decimal(u128::MAX.to_string().as_bytes()), Some(u128::MAX));
        assert_eq!(parse_decimal(b"340282366920938463463374607431768211456"), None);
        assert_eq!(parse_decimal(b""), None);
        assert_eq!(parse_decimal(b"1x"), None);
        assert_eq!(parse_decimal(b"-1"), None);
    }

    #[test]
    fn padded_fields_are_trimmed() {
        let r = parse_csv(" timestamp_us , src , dst \n 7 , 1 ,2\n");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].as_ref().unwrap(), &PacketRecord::new(7, 1, 2));
    }

    proptest! {
        #[test]
        fn decimal_parser_matches_std(v in any::<u128>()) {
            prop_assert_eq!(parse_decimal(v.to_string().as_bytes()), Some(v));
        }

        #[test]
        fn filter_is_idempotent(recs in prop::collection::vec(arb_record(), 0..200), f in arb_filter()) {
            let once: Vec<_> = filter_valid(recs, &f).collect();
            let twice: Vec<_> = filter_valid(once.clone(), &f).collect();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn windowing_conserves_packets(n in 0usize..500, w in 1usize..40) {
            let recs: Vec<_> = (0..n as u64).map(|i| PacketRecord::new(i, 0, 0)).collect();
            let mut ws = window_stream(recs.clone(), WindowSpec::new(w).unwrap());
            let windows: Vec<_> = ws.by_ref().collect();
            let s = ws.summary();
            prop_assert_eq!(windows.len() as u64 * w as u64 + s.dropped, n as u64);
            prop_assert!(s.dropped < w as u64);
            let joined: Vec<_> = windows.iter().flat_map(|w| w.records.clone()).collect();
            prop_assert_eq!(&joined[..], &recs[..joined.len()]);
        }

        #[test]
        fn csv_round_trip(mut recs in prop::collection::vec(arb_record(), 0..100)) {
            recs.sort_by_key(|r| r.timestamp);
            let mut buf = Vec::new();
            write_csv(&recs, &mut buf).unwrap();
            let back: Vec<_> = parse_records(&buf[..], Format::Csv).map(Result::unwrap).collect();
            prop_assert_eq!(back, recs);
        }
    }
}
