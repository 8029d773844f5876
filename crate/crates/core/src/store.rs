//! Event-sequence datasets on disk and CSV import.
//!
//! A dataset is a directory:
//!
//! ```text
//! manifest.json     format tag, count, K, sha256 of the files below
//! sequences.jsonl   one {"events":[{"t":..,"k":..}],"T":..,"K":..,"instance_id":..} per line
//! instances.json    optional generating instances, indexed by instance_id
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hawkes::{Event, EventSequence, HawkesError, HawkesInstance};

pub const DATASET_FORMAT: &str = "fimpp-dataset-v1";
const MANIFEST_FILE: &str = "manifest.json";
const SEQUENCES_FILE: &str = "sequences.jsonl";
const SIDECAR_FILE: &str = "instances.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: bad manifest: {detail}", path.display())]
    Manifest { path: PathBuf, detail: String },
    #[error("{}: line {line}: {detail}", path.display())]
    Line { path: PathBuf, line: usize, detail: String },
    #[error("{}: sha256 mismatch (manifest {expected}, file {actual})", path.display())]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{}: manifest lists {expected} sequences, file has {actual}", path.display())]
    Count { path: PathBuf, expected: usize, actual: usize },
    #[error("sequence {index}: {detail}")]
    Invalid { index: usize, detail: String },
    #[error("{}: {}", path.display(), rows.join("; "))]
    Rows { path: PathBuf, rows: Vec<String> },
    #[error("{found} distinct marks exceed the capacity of {max}")]
    Capacity { found: usize, max: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes via a sibling `.tmp` file and a rename.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    #[serde(flatten)]
    pub sequence: EventSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u64>,
}

impl SequenceRecord {
    pub fn new(sequence: EventSequence, instance_id: Option<u64>) -> Self {
        Self { sequence, instance_id }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub count: usize,
    /// Mark count shared by every sequence; 0 for an empty dataset.
    #[serde(rename = "K")]
    pub num_marks: usize,
    pub sequences: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SequenceRecord>,
    pub instances: Option<Vec<HawkesInstance>>,
}

impl Dataset {
    pub fn sequences(&self) -> Vec<EventSequence> {
        self.records.iter().map(|r| r.sequence.clone()).collect()
    }

    /// Sequences grouped by `instance_id` in ascending id order; records
    /// without an id form one trailing group.
    pub fn groups(&self) -> Vec<Vec<EventSequence>> {
        let mut by_id: std::collections::BTreeMap<Option<u64>, Vec<EventSequence>> = Default::default();
        for r in &self.records {
            by_id.entry(r.instance_id).or_default().push(r.sequence.clone());
        }
        let none = by_id.remove(&None);
        by_id.into_values().chain(none).collect()
    }

    pub fn instance_of(&self, index: usize) -> Option<&HawkesInstance> {
        let id = self.records.get(index)?.instance_id?;
        self.instances.as_ref()?.get(id as usize)
    }
}

fn check_record(rec: &SequenceRecord, num_marks: usize) -> std::result::Result<(), String> {
    rec.sequence.validate().map_err(|e| e.to_string())?;
    if rec.sequence.num_marks() != num_marks {
        return Err(format!("K = {} but the dataset has K = {num_marks}", rec.sequence.num_marks()));
    }
    Ok(())
}

/// Writes `records` (and optionally the generating `instances`) to `dir`.
/// The manifest is written last, so a dataset without one is incomplete.
pub fn write_dataset(
    dir: &Path,
    records: &[SequenceRecord],
    instances: Option<&[HawkesInstance]>,
    time_unit: Option<&str>,
) -> Result<DatasetManifest> {
    let num_marks = records.first().map_or(0, |r| r.sequence.num_marks());
    let mut body = Vec::new();
    for (i, r) in records.iter().enumerate() {
        check_record(r, num_marks).map_err(|detail| StoreError::Invalid {
            index: i,
            detail: format!("line {}: {detail}", i + 1),
        })?;
        if let (Some(id), Some(inst)) = (r.instance_id, instances) {
            if id as usize >= inst.len() {
                return Err(StoreError::Invalid {
                    index: i,
                    detail: format!("instance_id {id} has no entry in the {} sidecar instances", inst.len()),
                });
            }
        }
        serde_json::to_writer(&mut body, r).expect("records serialise");
        body.push(b'\n');
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seq_path = dir.join(SEQUENCES_FILE);
    write_file_atomic(&seq_path, &body).map_err(io_err(&seq_path))?;

    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        count: records.len(),
        num_marks,
        sequences: SEQUENCES_FILE.into(),
        sha256: hex(&Sha256::digest(&body)),
        sidecar: None,
        sidecar_sha256: None,
        time_unit: time_unit.map(str::to_owned),
    };
    let side_path = dir.join(SIDECAR_FILE);
    match instances {
        Some(inst) => {
            let bytes = serde_json::to_vec_pretty(inst).expect("instances serialise");
            write_file_atomic(&side_path, &bytes).map_err(io_err(&side_path))?;
            manifest.sidecar = Some(SIDECAR_FILE.into());
            manifest.sidecar_sha256 = Some(hex(&Sha256::digest(&bytes)));
        }
        None if side_path.exists() => fs::remove_file(&side_path).map_err(io_err(&side_path))?,
        None => {}
    }
    let man_path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_file_atomic(&man_path, &bytes).map_err(io_err(&man_path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if m.format != DATASET_FORMAT {
        return Err(StoreError::Manifest {
            path,
            detail: format!("format `{}`, expected `{DATASET_FORMAT}`", m.format),
        });
    }
    Ok(m)
}

/// Streams and validates records one line at a time. The content hash and
/// record count are checked once the last line has been read, so a caller
/// must drain the iterator before trusting what it yielded.
pub struct DatasetReader<R> {
    manifest: DatasetManifest,
    path: PathBuf,
    reader: R,
    hasher: Sha256,
    line: usize,
    bytes_read: u64,
    buf: String,
    done: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let path = dir.join(&manifest.sequences);
        let file = File::open(&path).map_err(io_err(&path))?;
        Ok(Self::from_reader(manifest, path, BufReader::new(file)))
    }
}

impl<R: BufRead> DatasetReader<R> {
    pub fn from_reader(manifest: DatasetManifest, path: PathBuf, reader: R) -> Self {
        Self {
            manifest,
            path,
            reader,
            hasher: Sha256::new(),
            line: 0,
            bytes_read: 0,
            buf: String::new(),
            done: false,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Bytes consumed from the sequences file so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    fn line_err(&self, detail: String) -> StoreError {
        StoreError::Line {
            path: self.path.clone(),
            line: self.line,
            detail,
        }
    }

    fn finish(&mut self) -> Result<()> {
        let actual = hex(&std::mem::take(&mut self.hasher).finalize());
        if actual != self.manifest.sha256 {
            return Err(StoreError::Integrity {
                path: self.path.clone(),
                expected: self.manifest.sha256.clone(),
                actual,
            });
        }
        if self.line != self.manifest.count {
            return Err(StoreError::Count {
                path: self.path.clone(),
                expected: self.manifest.count,
                actual: self.line,
            });
        }
        Ok(())
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.buf.clear();
        let n = match self.reader.read_line(&mut self.buf) {
            Ok(n) => n,
            Err(e) => {
                self.done = true;
                return Some(Err(io_err(&self.path)(e)));
            }
        };
        if n == 0 {
            self.done = true;
            return self.finish().err().map(Err);
        }
        self.hasher.update(self.buf.as_bytes());
        self.bytes_read += n as u64;
        self.line += 1;
        let parsed = serde_json::from_str::<SequenceRecord>(self.buf.trim_end())
            .map_err(|e| e.to_string())
            .and_then(|r| check_record(&r, self.manifest.num_marks).map(|_| r));
        match parsed {
            Ok(r) => Some(Ok(r)),
            Err(detail) => {
                self.done = true;
                Some(Err(self.line_err(detail)))
            }
        }
    }
}

/// Reads and verifies a whole dataset, including the sidecar when present.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let reader = DatasetReader::open(dir)?;
    let manifest = reader.manifest().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    let instances = match &manifest.sidecar {
        None => None,
        Some(name) => {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let actual = hex(&Sha256::digest(&bytes));
            if let Some(expected) = &manifest.sidecar_sha256 {
                if *expected != actual {
                    return Err(StoreError::Integrity {
                        path,
                        expected: expected.clone(),
                        actual,
                    });
                }
            }
            let inst: Vec<HawkesInstance> = serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            for (i, x) in inst.iter().enumerate() {
                x.validate().map_err(|e| StoreError::Manifest {
                    path: path.clone(),
                    detail: format!("instance {i}: {e}"),
                })?;
            }
            Some(inst)
        }
    };
    Ok(Dataset {
        manifest,
        records,
        instances,
    })
}

/// How mark labels become dense integers.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Vocabulary {
    /// In order of first appearance in the file.
    #[default]
    FirstSeen,
    /// Exactly these labels, in this order; unknown labels are row errors.
    Fixed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvImportOptions {
    pub sequence_column: String,
    pub time_column: String,
    pub mark_column: String,
    pub vocabulary: Vocabulary,
    /// Window end after shifting to 0; defaults to each sequence's last time.
    pub window_end: Option<f64>,
    pub max_marks: usize,
    pub delimiter: u8,
}

impl Default for CsvImportOptions {
    fn default() -> Self {
        Self {
            sequence_column: "sequence_id".into(),
            time_column: "time".into(),
            mark_column: "mark".into(),
            vocabulary: Vocabulary::FirstSeen,
            window_end: None,
            max_marks: 8,
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvImport {
    pub sequences: Vec<EventSequence>,
    /// Source id of each sequence, in order of first appearance.
    pub sequence_ids: Vec<String>,
    /// Label of each dense mark index.
    pub vocabulary: Vec<String>,
    /// Events moved forward to break timestamp ties.
    pub ties_jittered: usize,
}

/// Relative size of the tie-breaking nudge.
pub const TIE_JITTER: f64 = 1e-9;

/// Converts an event log to sequences. Rows are sorted by time within each
/// sequence (stable, so ties keep file order) and shifted to start at 0. The
/// i-th event of a tie group is moved later by `i * TIE_JITTER * s`, with `s`
/// the sequence's mean inter-event time.
pub fn import_csv<R: Read>(input: R, source: &Path, opts: &CsvImportOptions) -> Result<CsvImport> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(opts.delimiter).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| StoreError::Rows {
            path: source.to_path_buf(),
            rows: vec![format!("no column `{name}` in header {:?}", headers.iter().collect::<Vec<_>>())],
        })
    };
    let (ci, ti, mi) = (col(&opts.sequence_column)?, col(&opts.time_column)?, col(&opts.mark_column)?);

    let mut vocab: Vec<String> = match &opts.vocabulary {
        Vocabulary::FirstSeen => Vec::new(),
        Vocabulary::Fixed(v) => v.clone(),
    };
    let mut vocab_index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let mut seq_index: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(f64, usize)>> = Vec::new();
    let mut bad: Vec<String> = Vec::new();

    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // header is row 1
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let time = match field(ti).parse::<f64>() {
            Ok(t) if t.is_finite() => t,
            _ => {
                bad.push(format!("row {row}: bad timestamp `{}`", field(ti)));
                continue;
            }
        };
        let label = field(mi).to_owned();
        let mark = match vocab_index.get(&label) {
            Some(&m) => m,
            None if matches!(opts.vocabulary, Vocabulary::FirstSeen) => {
                vocab.push(label.clone());
                vocab_index.insert(label, vocab.len() - 1);
                vocab.len() - 1
            }
            None => {
                bad.push(format!("row {row}: mark `{label}` is not in the vocabulary"));
                continue;
            }
        };
        let id = field(ci).to_owned();
        let s = *seq_index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[s].push((time, mark));
    }
    if !bad.is_empty() {
        return Err(StoreError::Rows {
            path: source.to_path_buf(),
            rows: bad,
        });
    }
    if vocab.len() > opts.max_marks {
        return Err(StoreError::Capacity {
            found: vocab.len(),
            max: opts.max_marks,
        });
    }
    let k = vocab.len().max(1);
    let mut ties = 0;
    let mut sequences = Vec::with_capacity(rows.len());
    for (s, mut r) in rows.into_iter().enumerate() {
        r.sort_by(|a, b| a.0.total_cmp(&b.0));
        let start = r[0].0;
        let span = r[r.len() - 1].0 - start;
        let scale = if r.len() > 1 && span > 0.0 { span / (r.len() - 1) as f64 } else { 1.0 };
        let mut events: Vec<Event> = Vec::with_capacity(r.len());
        for (t, m) in r {
            let mut t = t - start;
            if let Some(prev) = events.last() {
                if t <= prev.time {
                    t = prev.time + TIE_JITTER * scale;
                    ties += 1;
                }
            }
            events.push(Event::new(t, m));
        }
        let last = events.last().map_or(0.0, |e| e.time);
        let window_end = opts.window_end.unwrap_or(last);
        let seq = EventSequence::new(events, window_end, k).map_err(|e: HawkesError| StoreError::Invalid {
            index: s,
            detail: format!("sequence `{}`: {e}{}", ids[s], if window_end <= 0.0 { "; set a window end" } else { "" }),
        })?;
        sequences.push(seq);
    }
    if ties > 0 {
        warn!("{}: moved {ties} tied events by a relative {TIE_JITTER:e}", source.display());
    }
    Ok(CsvImport {
        sequences,
        sequence_ids: ids,
        vocabulary: vocab,
        ties_jittered: ties,
    })
}

pub fn import_csv_file(path: &Path, opts: &CsvImportOptions) -> Result<CsvImport> {
    let f = File::open(path).map_err(io_err(path))?;
    import_csv(BufReader::new(f), path, opts)
}
