//! Append-only change log shared by all tables of one database.
//!
//! The log is a directory of segments `cdc-NNNNNN.log`, one JSON record per
//! line in sequence order. A tailer follows one table: it scans every line of
//! every segment and emits only its own table's records.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use nrtetl_core::record::ChangeRecord;
use nrtetl_core::table::TableConfig;

pub const DEFAULT_SEGMENT_RECORDS: u64 = 100_000;

/// Position in the log: the last consumed sequence number within a segment.
/// The zero offset starts from the beginning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogOffset {
    pub segment: u64,
    pub seq: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("segment {segment}, byte {byte_offset}: {message}")]
    Decode {
        segment: u64,
        byte_offset: u64,
        message: String,
    },
    #[error("bad checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn segment_path(dir: &Path, segment: u64) -> PathBuf {
    dir.join(format!("cdc-{segment:06}.log"))
}

/// Segment ids present in `dir`, ascending.
pub fn segments(dir: &Path) -> Result<Vec<u64>, LogError> {
    let mut ids = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ids),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let name = entry.map_err(io_err(dir))?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("cdc-")
            .and_then(|s| s.strip_suffix(".log"))
            .and_then(|s| s.parse().ok())
        {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

fn row_keys(tables: &[TableConfig]) -> BTreeMap<String, String> {
    tables
        .iter()
        .map(|t| (t.table.clone(), t.row_key_column.clone()))
        .collect()
}

/// The single writer of a log directory.
pub struct CdcLogWriter {
    dir: PathBuf,
    row_keys: BTreeMap<String, String>,
    segment_records: u64,
    segment: u64,
    in_segment: u64,
    last_seq: u64,
    out: BufWriter<File>,
}

impl CdcLogWriter {
    /// Opens `dir` for appending, creating it if needed. An existing log is
    /// continued after its last complete line; a torn trailing line is cut.
    pub fn open(
        dir: impl AsRef<Path>,
        tables: &[TableConfig],
        segment_records: u64,
    ) -> Result<Self, LogError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let segment_records = segment_records.max(1);
        let (segment, in_segment, last_seq) = match segments(&dir)?.last() {
            None => (0, 0, 0),
            Some(&seg) => {
                let (count, last, good_len) = scan_segment(&dir, seg)?;
                let path = segment_path(&dir, seg);
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                f.set_len(good_len).map_err(io_err(&path))?;
                let mut last = last;
                if count == 0 {
                    // Freshly rotated, still empty: the last seq lives earlier.
                    for prev in segments(&dir)?.into_iter().rev().skip(1) {
                        let (n, l, _) = scan_segment(&dir, prev)?;
                        if n > 0 {
                            last = l;
                            break;
                        }
                    }
                }
                (seg, count, last)
            }
        };
        let path = segment_path(&dir, segment);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(CdcLogWriter {
            dir,
            row_keys: row_keys(tables),
            segment_records,
            segment,
            in_segment,
            last_seq,
            out: BufWriter::new(file),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends one record and flushes it; returns its sequence number.
    pub fn append(&mut self, record: ChangeRecord) -> Result<u64, LogError> {
        let seq = self.write(record)?;
        self.flush()?;
        Ok(seq)
    }

    /// Appends a batch with a single flush; returns the last sequence number.
    pub fn append_all(
        &mut self,
        records: impl IntoIterator<Item = ChangeRecord>,
    ) -> Result<u64, LogError> {
        for r in records {
            self.write(r)?;
        }
        self.flush()?;
        Ok(self.last_seq)
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        let path = segment_path(&self.dir, self.segment);
        self.out.flush().map_err(io_err(&path))
    }

    fn write(&mut self, mut record: ChangeRecord) -> Result<u64, LogError> {
        let col = self
            .row_keys
            .get(&record.table)
            .ok_or_else(|| LogError::UnknownTable(record.table.clone()))?;
        record
            .validate(col)
            .map_err(|e| LogError::Invalid(e.to_string()))?;
        if self.in_segment >= self.segment_records {
            self.rotate()?;
        }
        record.seq = self.last_seq + 1;
        let path = segment_path(&self.dir, self.segment);
        let mut line = serde_json::to_vec(&record).expect("records always serialize");
        line.push(b'\n');
        self.out.write_all(&line).map_err(io_err(&path))?;
        self.last_seq = record.seq;
        self.in_segment += 1;
        Ok(record.seq)
    }

    fn rotate(&mut self) -> Result<(), LogError> {
        self.flush()?;
        self.segment += 1;
        self.in_segment = 0;
        let path = segment_path(&self.dir, self.segment);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        self.out = BufWriter::new(file);
        Ok(())
    }
}

/// Record count, last seq and byte length of the complete lines of a segment.
fn scan_segment(dir: &Path, segment: u64) -> Result<(u64, u64, u64), LogError> {
    let path = segment_path(dir, segment);
    let mut reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
    let (mut count, mut last, mut pos) = (0, 0, 0u64);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(&path))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        last = line_seq(&line).ok_or_else(|| LogError::Decode {
            segment,
            byte_offset: pos,
            message: "line does not start with a sequence number".into(),
        })?;
        pos += n as u64;
        count += 1;
    }
    Ok((count, last, pos))
}

/// Reads `seq` from the fixed line prefix without decoding the record.
fn line_seq(line: &str) -> Option<u64> {
    let rest = line.strip_prefix("{\"seq\":")?;
    let end = rest.find(|c: char| !c.is_ascii_digit())?;
    rest[..end].parse().ok()
}

/// Emulated storage device holding the log: every chunk read costs a fixed
/// latency, and at most `channels` reads are in flight.
#[derive(Debug)]
pub struct LogDevice {
    latency: Duration,
    chunk_records: usize,
    free: Mutex<usize>,
    cv: Condvar,
}

impl LogDevice {
    pub fn new(latency: Duration, chunk_records: usize, channels: usize) -> Self {
        LogDevice {
            latency,
            chunk_records: chunk_records.max(1),
            free: Mutex::new(channels.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn chunk_records(&self) -> usize {
        self.chunk_records
    }

    /// Blocks for one chunk read.
    pub fn read_chunk(&self) {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        drop(free);
        thread::sleep(self.latency);
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// Follows one table through the shared log.
pub struct CdcTailer {
    dir: PathBuf,
    table: String,
    row_key_column: String,
    needle: String,
    offset: LogOffset,
    reader: Option<BufReader<File>>,
    byte_pos: u64,
    pending: String,
    lookahead: Option<(String, u64)>,
    device: Option<std::sync::Arc<LogDevice>>,
    unbilled: usize,
}

impl CdcTailer {
    /// A tailer for `table` resuming after `from`. `table` must be one of
    /// `tables`.
    pub fn open(
        dir: impl AsRef<Path>,
        tables: &[TableConfig],
        table: &str,
        from: LogOffset,
    ) -> Result<Self, LogError> {
        let cfg = tables
            .iter()
            .find(|t| t.table == table)
            .ok_or_else(|| LogError::UnknownTable(table.into()))?;
        Ok(CdcTailer {
            dir: dir.as_ref().to_path_buf(),
            table: table.into(),
            row_key_column: cfg.row_key_column.clone(),
            needle: format!(
                ",\"table\":{},",
                serde_json::to_string(table).expect("strings serialize")
            ),
            offset: from,
            reader: None,
            byte_pos: 0,
            pending: String::new(),
            lookahead: None,
            device: None,
            unbilled: 0,
        })
    }

    /// Charges reads against an emulated device.
    pub fn with_device(mut self, device: std::sync::Arc<LogDevice>) -> Self {
        self.device = Some(device);
        self
    }

    pub fn table(&self) -> &str {
        &self.table
    }

    /// Everything up to and including this offset has been scanned.
    pub fn offset(&self) -> LogOffset {
        self.offset
    }

    /// Returns up to `max` new records of this table without blocking. An
    /// empty result means the tailer is caught up.
    pub fn poll(&mut self, max: usize) -> Result<Vec<ChangeRecord>, LogError> {
        let mut out = Vec::new();
        while out.len() < max {
            if self.reader.is_none() && !self.open_segment()? {
                break;
            }
            match self.next_line()? {
                Some((line, at)) => {
                    self.bill(1);
                    let seq = line_seq(&line).ok_or_else(|| self.decode_err(at, "missing seq"))?;
                    if seq <= self.offset.seq {
                        continue;
                    }
                    self.offset.seq = seq;
                    if !line.contains(&self.needle) {
                        continue;
                    }
                    let mut rec: ChangeRecord = serde_json::from_str(&line)
                        .map_err(|e| self.decode_err(at, &e.to_string()))?;
                    if rec.table != self.table {
                        continue;
                    }
                    rec.validate(&self.row_key_column)
                        .map_err(|e| self.decode_err(at, &e.to_string()))?;
                    out.push(rec);
                }
                None => {
                    if !self.advance_segment()? {
                        break;
                    }
                }
            }
        }
        self.settle_bill();
        Ok(out)
    }

    fn decode_err(&self, at: u64, message: &str) -> LogError {
        LogError::Decode {
            segment: self.offset.segment,
            byte_offset: at,
            message: message.into(),
        }
    }

    fn bill(&mut self, lines: usize) {
        if let Some(dev) = &self.device {
            self.unbilled += lines;
            if self.unbilled >= dev.chunk_records() {
                self.unbilled = 0;
                dev.read_chunk();
            }
        }
    }

    fn settle_bill(&mut self) {
        if let Some(dev) = &self.device {
            if self.unbilled > 0 {
                self.unbilled = 0;
                dev.read_chunk();
            }
        }
    }

    fn open_segment(&mut self) -> Result<bool, LogError> {
        let path = segment_path(&self.dir, self.offset.segment);
        match File::open(&path) {
            Ok(f) => {
                let mut r = BufReader::with_capacity(1 << 16, f);
                r.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
                self.reader = Some(r);
                self.byte_pos = 0;
                self.pending.clear();
                Ok(true)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                // A checkpoint may point at a segment that was never started;
                // a zero offset on an empty log simply waits.
                Ok(false)
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Next complete line and its byte offset, or `None` at the current end.
    fn next_line(&mut self) -> Result<Option<(String, u64)>, LogError> {
        if let Some(l) = self.lookahead.take() {
            return Ok(Some(l));
        }
        let path = segment_path(&self.dir, self.offset.segment);
        let reader = self.reader.as_mut().expect("segment open");
        let n = reader
            .read_line(&mut self.pending)
            .map_err(io_err(&path))?;
        if n == 0 || !self.pending.ends_with('\n') {
            return Ok(None);
        }
        let line = std::mem::take(&mut self.pending);
        let at = self.byte_pos;
        self.byte_pos += line.len() as u64;
        Ok(Some((line, at)))
    }

    /// Moves to the next segment once the current one is finished. The writer
    /// flushes a segment completely before creating the next one, so one more
    /// read after seeing the successor drains anything that raced in.
    fn advance_segment(&mut self) -> Result<bool, LogError> {
        let next = self.offset.segment + 1;
        if !segment_path(&self.dir, next).exists() {
            return Ok(false);
        }
        if let Some(l) = self.next_line()? {
            self.lookahead = Some(l);
            return Ok(true);
        }
        if !self.pending.is_empty() {
            return Err(self.decode_err(self.byte_pos, "segment ends with a torn line"));
        }
        self.offset = LogOffset {
            segment: next,
            seq: self.offset.seq,
        };
        self.reader = None;
        Ok(true)
    }
}

/// Decodes every record of a finished log, all tables, in sequence order.
/// Row keys are filled in for tables listed in `tables`.
pub fn read_log(dir: impl AsRef<Path>, tables: &[TableConfig]) -> Result<Vec<ChangeRecord>, LogError> {
    let dir = dir.as_ref();
    let keys = row_keys(tables);
    let mut out = Vec::new();
    for seg in segments(dir)? {
        let path = segment_path(dir, seg);
        let mut reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        let mut line = String::new();
        let mut pos = 0u64;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io_err(&path))?;
            if n == 0 {
                break;
            }
            let decode = |message: String| LogError::Decode {
                segment: seg,
                byte_offset: pos,
                message,
            };
            if !line.ends_with('\n') {
                return Err(decode("torn trailing line".into()));
            }
            let mut rec: ChangeRecord =
                serde_json::from_str(&line).map_err(|e| decode(e.to_string()))?;
            if let Some(col) = keys.get(&rec.table) {
                rec.validate(col).map_err(|e| decode(e.to_string()))?;
            }
            out.push(rec);
            pos += n as u64;
        }
    }
    Ok(out)
}

/// Stores `offset` atomically as the single line `"segment seq"`.
pub fn save_checkpoint(path: impl AsRef<Path>, offset: LogOffset) -> Result<(), LogError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, format!("{} {}\n", offset.segment, offset.seq)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// The stored offset, or `None` when no checkpoint was ever written.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Option<LogOffset>, LogError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let bad = |message: &str| LogError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    };
    let mut parts = text.split_whitespace();
    let segment = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing segment id"))?;
    let seq = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing seq"))?;
    if parts.next().is_some() {
        return Err(bad("trailing data"));
    }
    Ok(Some(LogOffset { segment, seq }))
}
