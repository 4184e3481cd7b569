//! Dataset and result serialization.
//!
//! Datasets are JSON Lines: one record per line, UTF-8, records sorted by
//! timestamp. Floats are written with 17 significant digits so that a
//! write/read round trip is value-identical and output files are
//! byte-reproducible. Result tables are plain CSV with a header row.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by dataset readers and writers.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: timestamp {t} out of order (previous {prev})")]
    OutOfOrderTimestamp { line: usize, prev: f64, t: f64 },
}

/// One dataset record. Field names are part of the on-disk schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetRecord {
    /// Gyroscope (`w`, rad/s) and accelerometer (`a`, m/s^2) sample.
    Imu { t: f64, w: [f64; 3], a: [f64; 3] },
    /// Joint encoder vector.
    Encoder { t: f64, alpha: Vec<f64> },
    /// Per-foot binary contact flags.
    Contact { t: f64, contacts: BTreeMap<String, bool> },
    /// Relative pose between keyframes `i -> j`: unit quaternion (wxyz) and
    /// translation.
    RelPose { t: f64, i: usize, j: usize, q: [f64; 4], p: [f64; 3] },
    /// Ground-truth state tuple.
    Truth {
        t: f64,
        #[serde(rename = "X_q")]
        x_q: [f64; 4],
        #[serde(rename = "X_p")]
        x_p: [f64; 3],
        v: [f64; 3],
        #[serde(rename = "C_q")]
        c_q: [f64; 4],
        #[serde(rename = "C_p")]
        c_p: [f64; 3],
        bg: [f64; 3],
        ba: [f64; 3],
    },
}

impl DatasetRecord {
    pub fn t(&self) -> f64 {
        match self {
            DatasetRecord::Imu { t, .. }
            | DatasetRecord::Encoder { t, .. }
            | DatasetRecord::Contact { t, .. }
            | DatasetRecord::RelPose { t, .. }
            | DatasetRecord::Truth { t, .. } => *t,
        }
    }

    fn check(&self, line: usize) -> Result<(), IoError> {
        let quat_ok = |q: &[f64; 4]| {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            (n - 1.0).abs() <= 1e-9
        };
        match self {
            DatasetRecord::RelPose { q, .. } if !quat_ok(q) => Err(IoError::Parse {
                line,
                msg: "relpose quaternion is not unit norm".into(),
            }),
            DatasetRecord::Truth { x_q, c_q, .. } if !quat_ok(x_q) || !quat_ok(c_q) => {
                Err(IoError::Parse { line, msg: "truth quaternion is not unit norm".into() })
            }
            _ => Ok(()),
        }
    }
}

/// serde_json formatter that prints every float with 17 significant digits.
struct SigDigits17;

impl serde_json::ser::Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes one record as a JSON line (no trailing newline).
pub fn record_to_line(record: &DatasetRecord) -> Result<String, IoError> {
    let mut buf = Vec::with_capacity(256);
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits17);
    record
        .serialize(&mut ser)
        .map_err(|e| IoError::Parse { line: 0, msg: e.to_string() })?;
    Ok(String::from_utf8(buf).expect("serde_json output is utf-8"))
}

/// Writes a time-sorted record stream to a JSONL file.
pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut prev = f64::NEG_INFINITY;
    for (idx, rec) in records.iter().enumerate() {
        let t = rec.t();
        if t < prev {
            return Err(IoError::OutOfOrderTimestamp { line: idx + 1, prev, t });
        }
        prev = t;
        out.write_all(record_to_line(rec)?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL dataset, validating ordering and per-record invariants.
/// Parse failures carry the 1-based line number.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, IoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| IoError::Parse { line: line_no, msg: e.to_string() })?;
        rec.check(line_no)?;
        let t = rec.t();
        if t < prev {
            return Err(IoError::OutOfOrderTimestamp { line: line_no, prev, t });
        }
        prev = t;
        records.push(rec);
    }
    Ok(records)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV table: header row, then float64 rows at full precision.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for (idx, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(IoError::Parse {
                line: idx + 2,
                msg: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        let cells: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV table written by [`write_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>), IoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(IoError::Parse { line: 1, msg: "empty csv".into() }),
    };
    let header: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| IoError::Parse { line: line_no, msg: e.to_string() })
            })
            .collect();
        let row = row?;
        if row.len() != header.len() {
            return Err(IoError::Parse {
                line: line_no,
                msg: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("strider-io-{}-{}", std::process::id(), name));
        p
    }

    fn random_record(rng: &mut StdRng, t: f64) -> DatasetRecord {
        let f = |rng: &mut StdRng| rng.random_range(-10.0..10.0);
        match rng.random_range(0..5) {
            0 => DatasetRecord::Imu {
                t,
                w: [f(rng), f(rng), f(rng)],
                a: [f(rng), f(rng), f(rng)],
            },
            1 => DatasetRecord::Encoder { t, alpha: (0..10).map(|_| f(rng)).collect() },
            2 => {
                let mut contacts = BTreeMap::new();
                contacts.insert("left".to_string(), rng.random_bool(0.5));
                contacts.insert("right".to_string(), rng.random_bool(0.5));
                DatasetRecord::Contact { t, contacts }
            }
            3 => {
                let q = random_quat(rng);
                DatasetRecord::RelPose {
                    t,
                    i: rng.random_range(0..100),
                    j: rng.random_range(0..100),
                    q,
                    p: [f(rng), f(rng), f(rng)],
                }
            }
            _ => DatasetRecord::Truth {
                t,
                x_q: random_quat(rng),
                x_p: [f(rng), f(rng), f(rng)],
                v: [f(rng), f(rng), f(rng)],
                c_q: random_quat(rng),
                c_p: [f(rng), f(rng), f(rng)],
                bg: [f(rng), f(rng), f(rng)],
                ba: [f(rng), f(rng), f(rng)],
            },
        }
    }

    fn random_quat(rng: &mut StdRng) -> [f64; 4] {
        let mut q = [0.0; 4];
        loop {
            for v in &mut q {
                *v = rng.random_range(-1.0..1.0);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-3 {
                for v in &mut q {
                    *v /= n;
                }
                return q;
            }
        }
    }

    #[test]
    fn empty_file_reads_as_empty_stream() {
        let path = tmpfile("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn round_trip_many_random_records() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut records = Vec::new();
        let mut t = 0.0;
        for _ in 0..10_000 {
            t += rng.random_range(0.0..0.01);
            records.push(random_record(&mut rng, t));
        }
        let path = tmpfile("roundtrip.jsonl");
        write_dataset(&path, &records).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(records, back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_out_of_order_timestamps() {
        let path = tmpfile("order.jsonl");
        let recs = vec![
            DatasetRecord::Imu { t: 1.0, w: [0.0; 3], a: [0.0; 3] },
            DatasetRecord::Imu { t: 0.5, w: [0.0; 3], a: [0.0; 3] },
        ];
        assert!(matches!(
            write_dataset(&path, &recs),
            Err(IoError::OutOfOrderTimestamp { line: 2, .. })
        ));
        // And on the read side.
        let lines = format!("{}\n{}\n", record_to_line(&recs[0]).unwrap(), record_to_line(&recs[1]).unwrap());
        std::fs::write(&path, lines).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(IoError::OutOfOrderTimestamp { line: 2, .. })
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_unknown_record_type_with_line_number() {
        let path = tmpfile("unknown.jsonl");
        std::fs::write(
            &path,
            "{\"type\":\"imu\",\"t\":0.0,\"w\":[0,0,0],\"a\":[0,0,0]}\n{\"type\":\"sonar\",\"t\":1.0}\n",
        )
        .unwrap();
        match read_dataset(&path) {
            Err(IoError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("sonar") || msg.contains("unknown variant"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let path = tmpfile("quat.jsonl");
        std::fs::write(
            &path,
            "{\"type\":\"relpose\",\"t\":0.0,\"i\":0,\"j\":1,\"q\":[1.0,0.5,0.0,0.0],\"p\":[0,0,0]}\n",
        )
        .unwrap();
        assert!(matches!(read_dataset(&path), Err(IoError::Parse { line: 1, .. })));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn floats_carry_17_significant_digits() {
        let rec = DatasetRecord::Imu { t: 0.1, w: [std::f64::consts::PI, 0.0, 0.0], a: [0.0; 3] };
        let line = record_to_line(&rec).unwrap();
        assert!(line.contains("3.1415926535897931e0"), "{line}");
        assert!(line.contains("1.0000000000000001e-1"), "{line}");
    }

    #[test]
    fn csv_round_trip() {
        let path = tmpfile("table.csv");
        let rows = vec![vec![0.0, 1.5, -2.25], vec![0.1, std::f64::consts::E, 7.0]];
        write_csv(&path, &["t", "x", "y"], &rows).unwrap();
        let (header, back) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["t", "x", "y"]);
        assert_eq!(rows, back);
        std::fs::remove_file(&path).ok();
    }

    proptest! {
        #[test]
        fn prop_float_line_round_trip(v in proptest::num::f64::NORMAL) {
            let rec = DatasetRecord::Imu { t: 0.0, w: [v, 0.0, 0.0], a: [0.0; 3] };
            let line = record_to_line(&rec).unwrap();
            let back: DatasetRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(rec, back);
        }
    }
}
