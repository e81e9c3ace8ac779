//! Tab-separated file formats for datasets, trial lists and score sets.
//!
//! Dataset files carry a header `id  speaker  condition  dim0..dimK`; the
//! condition column holds `-` when unknown. Floats are written with 17
//! significant digits so a write/read round trip is exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::{
    CondTag, LabelIndex, LabeledDataset, ScoreSet, Trial, TrialKey, TrialList, TrialScore,
};

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Exact-round-trip float formatting (17 significant digits).
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Reads a dataset TSV. Speaker and condition labels are re-indexed densely in
/// first-appearance order; a condition column that is `-` on every row yields
/// a dataset without condition labels.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let head: Vec<&str> = header.split('\t').collect();
    if head.len() < 4 || head[0] != "id" || head[1] != "speaker" || head[2] != "condition" {
        return Err(parse_err(
            path,
            1,
            "header must be 'id\\tspeaker\\tcondition\\tdim0...'",
        ));
    }
    let dim = head.len() - 3;
    for (k, name) in head[3..].iter().enumerate() {
        if *name != format!("dim{k}") {
            return Err(parse_err(path, 1, format!("expected column 'dim{k}', found '{name}'")));
        }
    }

    let mut ids = Vec::new();
    let mut speakers = Vec::new();
    let mut conditions: Vec<Option<String>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != dim + 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("inconsistent dimension: expected {} fields, found {}", dim + 3, fields.len()),
            ));
        }
        if let Some(prev) = seen_ids.insert(fields[0].to_string(), line_no) {
            return Err(parse_err(
                path,
                line_no,
                format!("duplicate id '{}' (first seen at line {prev})", fields[0]),
            ));
        }
        ids.push(fields[0].to_string());
        speakers.push(fields[1].to_string());
        conditions.push(match fields[2] {
            "-" => None,
            c => Some(c.to_string()),
        });
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("malformed number '{f}'")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value '{f}'")));
            }
            values.push(v);
        }
    }
    if ids.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }

    let n = ids.len();
    let n_known = conditions.iter().filter(|c| c.is_some()).count();
    let cond_index = if n_known == 0 {
        None
    } else if n_known == n {
        let names: Vec<String> = conditions.into_iter().map(|c| c.unwrap()).collect();
        Some(LabelIndex::from_names(&names))
    } else {
        let first_missing = conditions.iter().position(|c| c.is_none()).unwrap();
        return Err(parse_err(
            path,
            first_missing + 2,
            "condition is '-' here but set on other rows; use '-' everywhere or nowhere",
        ));
    };

    // rows in the file become columns in memory
    let vectors = DMatrix::from_row_slice(n, dim, &values).transpose();
    LabeledDataset::new(vectors, ids, LabelIndex::from_names(&speakers), cond_index)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let mut header = String::from("id\tspeaker\tcondition");
    for k in 0..dataset.dim() {
        header.push_str(&format!("\tdim{k}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    for i in 0..dataset.len() {
        let speaker = dataset.speakers().name(dataset.speakers().assignments()[i]);
        let cond = dataset
            .conditions()
            .map(|c| c.name(c.assignments()[i]).to_string())
            .unwrap_or_else(|| "-".to_string());
        let mut row = format!("{}\t{}\t{}", dataset.sample_ids()[i], speaker, cond);
        for v in dataset.vectors().column(i).iter() {
            row.push('\t');
            row.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{row}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a trial list: `enroll<TAB>test[<TAB>target|impostor|-][<TAB>same|cross|-]`.
pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let mut trials = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err(path, line_no, "expected 2 to 4 tab-separated fields"));
        }
        let key = match fields.get(2).copied() {
            None | Some("-") => TrialKey::Unknown,
            Some("target") => TrialKey::Target,
            Some("impostor") => TrialKey::Impostor,
            Some(other) => {
                return Err(parse_err(path, line_no, format!("unknown trial key '{other}'")))
            }
        };
        let cond = match fields.get(3).copied() {
            None | Some("-") => CondTag::Unknown,
            Some("same") => CondTag::Same,
            Some("cross") => CondTag::Cross,
            Some(other) => {
                return Err(parse_err(path, line_no, format!("unknown condition tag '{other}'")))
            }
        };
        trials.push(Trial {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            key,
            cond,
        });
    }
    TrialList::new(trials).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_trials(trials: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    let with_cond = trials.trials().iter().any(|t| t.cond != CondTag::Unknown);
    let with_key = with_cond || trials.trials().iter().any(|t| t.key != TrialKey::Unknown);
    for t in trials.trials() {
        let mut row = format!("{}\t{}", t.enroll_id, t.test_id);
        if with_key {
            row.push('\t');
            row.push_str(match t.key {
                TrialKey::Target => "target",
                TrialKey::Impostor => "impostor",
                TrialKey::Unknown => "-",
            });
        }
        if with_cond {
            row.push('\t');
            row.push_str(match t.cond {
                CondTag::Same => "same",
                CondTag::Cross => "cross",
                CondTag::Unknown => "-",
            });
        }
        writeln!(w, "{row}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let mut scores = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line_no, "expected enroll, test and score fields"));
        }
        let log_lr: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("malformed score '{}'", fields[2])))?;
        scores.push(TrialScore {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            log_lr,
        });
    }
    ScoreSet::new(scores).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_scores(scores: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    for s in scores.scores() {
        writeln!(w, "{}\t{}\t{}", s.enroll_id, s.test_id, fmt_f64(s.log_lr))
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
