//! Metrics streams as JSON lines, one record per line in field order.

use std::fs;
use std::io::Write;
use std::path::Path;

use coda_core::probe::MetricsRecord;

use crate::error::{Error, Result};

pub fn to_line(r: &MetricsRecord) -> String {
    serde_json::to_string(r).expect("metrics records always serialize")
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&to_line(r));
        s.push('\n');
    }
    s
}

pub fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Metrics {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &text)
}

/// Appends records as they arrive; the file always holds complete lines.
pub struct JsonlSink {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: fs::File::create(path).map_err(|e| Error::io(path, e))?,
            path: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", to_line(r)).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coda_core::probe::KnnAccuracy;

    pub(crate) fn record(iter: u64) -> MetricsRecord {
        MetricsRecord {
            iter,
            acc_tgt_1: 0.1 + iter as f64 / 7.0,
            acc_tgt_2: Some(1.0 / 3.0),
            acc_src_1: 0.9,
            acc_src_2: None,
            agree: Some(0.5),
            l_p: Some(0.012345678901234567),
            l_d_1: -1.3862943611198906,
            l_d_2: None,
            l_y_1: 0.69,
            l_y_2: None,
            l_ce_1: 1e-300,
            l_ce_2: None,
            d_g: Some(12.5),
            knn: (iter == 2).then(|| vec![KnnAccuracy { k: 3, acc: 0.75 }]),
        }
    }

    #[test]
    fn round_trip() {
        let rs: Vec<_> = (0..3).map(record).collect();
        let text = to_jsonl(&rs);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_jsonl(Path::new("m"), &text).unwrap(), rs);
    }

    #[test]
    fn key_order_is_stable() {
        let line = to_line(&record(0));
        let keys = [
            "iter", "acc_tgt_1", "acc_tgt_2", "acc_src_1", "acc_src_2", "agree", "l_p", "l_d_1", "l_d_2", "l_y_1",
            "l_y_2", "l_ce_1", "l_ce_2", "d_g",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert!(!line.contains("knn"));
    }

    #[test]
    fn empty_stream_is_empty_file() {
        assert_eq!(to_jsonl(&[]), "");
        assert!(parse_jsonl(Path::new("m"), "").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = format!("{}\n{{broken\n", to_line(&record(0)));
        match parse_jsonl(Path::new("m.jsonl"), &text) {
            Err(Error::Metrics { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
