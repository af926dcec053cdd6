//! Append-only telemetry log, dataset assembly and chronological splitting.
//!
//! On disk the log is `telemetry.jsonl`: one canonical telemetry frame per
//! line, the same encoding the device sends over serial.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{PotId, Rain, SensorSnapshot};
use crate::protocol::{encode_telemetry, parse_telemetry, FrameError};

/// Columns of a dataset row.
pub const FEATURES: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURES] = ["temperature", "humidity", "rain", "flow", "zone_moisture_avg"];
/// Index of the target column (the pot's zone average) within a row.
pub const TARGET_FEATURE: usize = 4;

pub const CSV_HEADER: [&str; 15] = [
    "ts", "temp", "hum", "rain", "flow", "soil0", "soil1", "soil2", "soil3", "soil4", "soil5",
    "relay0", "relay1", "relay2", "mode",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("timestamp {new} does not follow last timestamp {last}")]
    NonMonotonic { last: u64, new: u64 },
    #[error("telemetry log is empty")]
    Empty,
    #[error("{path}:{line}: {source}")]
    Corrupt {
        path: String,
        line: usize,
        #[source]
        source: FrameError,
    },
    #[error("telemetry log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Default)]
pub struct TelemetryLog {
    records: Vec<SensorSnapshot>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl TelemetryLog {
    pub fn in_memory() -> TelemetryLog {
        TelemetryLog::default()
    }

    /// Creates (or truncates) a log file.
    pub fn create(path: &Path) -> Result<TelemetryLog, StoreError> {
        let file = File::create(path)?;
        Ok(TelemetryLog {
            records: Vec::new(),
            file: Some(file),
            path: Some(path.to_path_buf()),
        })
    }

    /// Opens an existing log for appending, creating it if absent. A partial
    /// final line (no newline) is discarded and truncated away.
    pub fn open(path: &Path) -> Result<TelemetryLog, StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let (records, complete_len) = read_records(&mut file, path)?;
        file.set_len(complete_len)?;
        file.seek(SeekFrom::End(0))?;
        Ok(TelemetryLog {
            records,
            file: Some(file),
            path: Some(path.to_path_buf()),
        })
    }

    /// Reads a log file without opening it for writing.
    pub fn read(path: &Path) -> Result<Vec<SensorSnapshot>, StoreError> {
        let mut file = File::open(path)?;
        Ok(read_records(&mut file, path)?.0)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends one frame. Timestamps must strictly increase. The line is
    /// written in a single call, so readers see whole lines only.
    pub fn append(&mut self, snap: SensorSnapshot) -> Result<(), StoreError> {
        if let Some(last) = self.records.last() {
            if snap.timestamp <= last.timestamp {
                return Err(StoreError::NonMonotonic {
                    last: last.timestamp,
                    new: snap.timestamp,
                });
            }
        }
        if let Some(f) = self.file.as_mut() {
            f.write_all(encode_telemetry(&snap).as_bytes())?;
        }
        self.records.push(snap);
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[SensorSnapshot] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&SensorSnapshot> {
        self.records.last()
    }

    /// Records with `from <= ts <= to`; either bound may be open.
    pub fn range(&self, from: Option<u64>, to: Option<u64>) -> &[SensorSnapshot] {
        let lo = from.map_or(0, |f| self.records.partition_point(|r| r.timestamp < f));
        let hi = to.map_or(self.records.len(), |t| {
            self.records.partition_point(|r| r.timestamp <= t)
        });
        if lo >= hi {
            &[]
        } else {
            &self.records[lo..hi]
        }
    }

    pub fn to_dataset(&self, pot: PotId) -> Result<Dataset, StoreError> {
        to_dataset(&self.records, pot)
    }

    pub fn export_csv<W: Write>(&self, out: W) -> Result<(), StoreError> {
        export_csv(&self.records, out)
    }
}

fn read_records(file: &mut File, path: &Path) -> Result<(Vec<SensorSnapshot>, u64), StoreError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut complete_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 || !buf.ends_with('\n') {
            break;
        }
        line_no += 1;
        let snap = parse_telemetry(&buf).map_err(|source| StoreError::Corrupt {
            path: path.display().to_string(),
            line: line_no,
            source,
        })?;
        if let Some(last) = records.last().map(|r: &SensorSnapshot| r.timestamp) {
            if snap.timestamp <= last {
                return Err(StoreError::NonMonotonic {
                    last,
                    new: snap.timestamp,
                });
            }
        }
        records.push(snap);
        complete_len += n as u64;
    }
    Ok((records, complete_len))
}

/// Writes `telemetry.csv`: the documented header then one row per frame. An
/// unreadable DHT value is an empty cell.
pub fn export_csv<W: Write>(records: &[SensorSnapshot], out: W) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row: Vec<String> = vec![
            r.timestamp.to_string(),
            r.temperature_c.map(|v| v.to_string()).unwrap_or_default(),
            r.humidity_pct.map(|v| v.to_string()).unwrap_or_default(),
            u8::from(r.rain == Rain::Wet).to_string(),
            format!("{:?}", r.flow_lpm),
        ];
        row.extend(r.soil_adc.iter().map(|v| v.to_string()));
        row.extend(r.relay.iter().map(|s| u8::from(s.is_on()).to_string()));
        row.push(r.mode.code().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-pot feature matrix: `[temperature, humidity, rain, flow,
/// zone_moisture_avg]`, one row per telemetry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pot: PotId,
    pub timestamps: Vec<u64>,
    pub rows: Vec<[f64; FEATURES]>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn target(&self, i: usize) -> f64 {
        self.rows[i][TARGET_FEATURE]
    }

    pub fn slice(&self, range: Range<usize>) -> Dataset {
        Dataset {
            pot: self.pot,
            timestamps: self.timestamps[range.clone()].to_vec(),
            rows: self.rows[range].to_vec(),
        }
    }
}

/// Fills unreadable DHT values with the previous reading (or, for leading
/// gaps, the first reading that follows) so the dataset has no holes.
fn fill_gaps(values: impl Iterator<Item = Option<i32>>) -> Vec<f64> {
    let raw: Vec<Option<i32>> = values.collect();
    let first = raw.iter().flatten().next().copied().unwrap_or(0);
    let mut last = first;
    raw.into_iter()
        .map(|v| {
            if let Some(x) = v {
                last = x;
            }
            f64::from(last)
        })
        .collect()
}

pub fn to_dataset(records: &[SensorSnapshot], pot: PotId) -> Result<Dataset, StoreError> {
    if records.is_empty() {
        return Err(StoreError::Empty);
    }
    let temps = fill_gaps(records.iter().map(|r| r.temperature_c));
    let hums = fill_gaps(records.iter().map(|r| r.humidity_pct));
    let rows = records
        .iter()
        .zip(temps.into_iter().zip(hums))
        .map(|(r, (t, h))| {
            [
                t,
                h,
                if r.rain == Rain::Wet { 1.0 } else { 0.0 },
                r.flow_lpm,
                f64::from(r.zone_average(pot)),
            ]
        })
        .collect();
    Ok(Dataset {
        pot,
        timestamps: records.iter().map(|r| r.timestamp).collect(),
        rows,
    })
}

/// Sizes of the chronological split: `⌊0.70·N⌋`, `⌊0.15·N⌋`, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Chronological train/validation/test split. No shuffling: every training row
/// precedes every validation row, which precedes every test row.
pub fn split(ds: &Dataset) -> (Dataset, Dataset, Dataset) {
    let (train, val, _) = split_sizes(ds.len());
    (
        ds.slice(0..train),
        ds.slice(train..train + val),
        ds.slice(train + val..ds.len()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Mode, RelayState};

    fn snap(ts: u64, soil: [u16; 6]) -> SensorSnapshot {
        SensorSnapshot {
            timestamp: ts,
            temperature_c: Some(24),
            humidity_pct: Some(55),
            rain: Rain::Dry,
            flow_lpm: 0.0,
            soil_adc: soil,
            relay: [RelayState::Off; 3],
            mode: Mode::Auto,
        }
    }

    #[test]
    fn append_enforces_strict_monotonicity() {
        let mut log = TelemetryLog::in_memory();
        log.append(snap(3, [0; 6])).unwrap();
        log.append(snap(5, [0; 6])).unwrap();
        assert_eq!(log.len(), 2);
        assert!(matches!(
            log.append(snap(5, [0; 6])),
            Err(StoreError::NonMonotonic { last: 5, new: 5 })
        ));
        assert!(log.append(snap(4, [0; 6])).is_err());
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn range_queries() {
        let mut log = TelemetryLog::in_memory();
        for ts in [2, 4, 6, 8] {
            log.append(snap(ts, [0; 6])).unwrap();
        }
        let ts = |s: &[SensorSnapshot]| s.iter().map(|r| r.timestamp).collect::<Vec<_>>();
        assert_eq!(ts(log.range(Some(3), Some(6))), vec![4, 6]);
        assert_eq!(ts(log.range(None, Some(4))), vec![2, 4]);
        assert_eq!(ts(log.range(Some(7), None)), vec![8]);
        assert!(log.range(Some(9), None).is_empty());
        assert!(log.range(Some(6), Some(2)).is_empty());
    }

    #[test]
    fn dataset_columns() {
        let records = vec![
            snap(1, [3000, 2980, 2100, 2120, 2600, 2591]),
            snap(2, [3001, 2980, 2100, 2120, 2600, 2590]),
        ];
        let ds = to_dataset(&records, PotId::ALL[0]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.target(0), 2990.0);
        assert_eq!(ds.target(1), 2990.0);
        assert_eq!(ds.rows[0], [24.0, 55.0, 0.0, 0.0, 2990.0]);
        let ds = to_dataset(&records, PotId::ALL[2]).unwrap();
        assert_eq!(ds.target(0), 2595.0);
        assert!(matches!(to_dataset(&[], PotId::ALL[0]), Err(StoreError::Empty)));
    }

    #[test]
    fn dataset_fills_unreadable_dht() {
        let mut a = snap(1, [0; 6]);
        a.temperature_c = None;
        let mut b = snap(2, [0; 6]);
        b.temperature_c = Some(30);
        let mut c = snap(3, [0; 6]);
        c.temperature_c = None;
        let ds = to_dataset(&[a, b, c], PotId::ALL[0]).unwrap();
        let temps: Vec<f64> = ds.rows.iter().map(|r| r[0]).collect();
        assert_eq!(temps, vec![30.0, 30.0, 30.0]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(100), (70, 15, 15));
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(3), (2, 0, 1));
        assert_eq!(split_sizes(1), (0, 0, 1));
    }

    #[test]
    fn file_round_trip_and_partial_line_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.jsonl");
        let mut log = TelemetryLog::create(&path).unwrap();
        for ts in 1..=5 {
            log.append(snap(ts, [ts as u16; 6])).unwrap();
        }
        drop(log);
        assert_eq!(TelemetryLog::read(&path).unwrap().len(), 5);

        // simulate a crash mid-write
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"ts\":6,\"te").unwrap();
        drop(f);

        let mut log = TelemetryLog::open(&path).unwrap();
        assert_eq!(log.len(), 5);
        log.append(snap(6, [6; 6])).unwrap();
        drop(log);
        let back = TelemetryLog::read(&path).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back[5], snap(6, [6; 6]));
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"ts\":1}\n").unwrap();
        let err = TelemetryLog::read(&path).unwrap_err();
        assert!(matches!(err, StoreError::Corrupt { line: 1, .. }));
    }

    #[test]
    fn csv_export() {
        let mut a = snap(1, [1, 2, 3, 4, 5, 6]);
        a.humidity_pct = None;
        a.relay[1] = RelayState::On;
        a.flow_lpm = 2.0;
        let mut out = Vec::new();
        export_csv(&[a], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "ts,temp,hum,rain,flow,soil0,soil1,soil2,soil3,soil4,soil5,relay0,relay1,relay2,mode\n\
             1,24,,0,2.0,1,2,3,4,5,6,0,1,0,2\n"
        );
    }
}
