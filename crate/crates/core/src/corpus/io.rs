//! Line-delimited JSON formats for cohorts and vocabularies.
//!
//! Cohort files hold one patient per line:
//! `{"id": "...", "visits": [["c1","c2"], ...], "conditions": ["name", ...]}`.
//! An optional first line `{"header": {...}}` carries the condition names
//! and provenance (config digest and seed).
//!
//! Vocabulary files start with a header line
//! `{"version": 1, "size": V, "eos": V, "pad": V+1}` followed by one line
//! per entry `{"token_id": i, "codes": [...], "frequency": f}` in id order.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, EncodedCohort, PatientRecord, Visit, VisitVocab, VocabEntry, BACKGROUND};
use crate::error::{EvaError, Result};

pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortHeader {
    pub condition_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    visits: Vec<Vec<String>>,
    conditions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: CohortHeader,
}

#[derive(Serialize, Deserialize)]
struct VocabHeader {
    version: u32,
    size: usize,
    eos: usize,
    pad: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    token_id: usize,
    codes: Vec<String>,
    frequency: usize,
}

pub fn write_cohort(path: &Path, cohort: &Cohort, header: Option<&CohortHeader>) -> Result<()> {
    let file = File::create(path).map_err(|e| EvaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EvaError::io(path, e);
    let header = header.cloned().unwrap_or_else(|| CohortHeader {
        condition_names: cohort.condition_names.clone(),
        ..Default::default()
    });
    serde_json::to_writer(&mut w, &HeaderLine { header })?;
    w.write_all(b"\n").map_err(io)?;
    for r in &cohort.records {
        let line = RecordLine {
            id: r.id.clone(),
            visits: r.visits.iter().map(|v| v.codes().map(str::to_owned).collect()).collect(),
            conditions: r
                .conditions
                .iter()
                .zip(&cohort.condition_names)
                .filter(|(on, _)| **on)
                .map(|(_, n)| n.clone())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a cohort file. Without a header line, condition names are the
/// sorted union of names seen, with the background condition last.
pub fn read_cohort(path: &Path) -> Result<(Cohort, Option<CohortHeader>)> {
    let file = File::open(path).map_err(|e| EvaError::io(path, e))?;
    let mut header: Option<CohortHeader> = None;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| EvaError::Parse {
            what: "cohort",
            line: i + 1,
            message: e.to_string(),
        };
        if raw.is_empty() && header.is_none() && line.contains("\"header\"") {
            let h: HeaderLine = serde_json::from_str(&line).map_err(parse_err)?;
            header = Some(h.header);
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(parse_err)?;
        raw.push((i + 1, rec));
    }

    let names = match &header {
        Some(h) => h.condition_names.clone(),
        None => {
            let mut set: BTreeSet<String> = BTreeSet::new();
            for (_, r) in &raw {
                set.extend(r.conditions.iter().cloned());
            }
            let has_bg = set.remove(BACKGROUND);
            let mut names: Vec<String> = set.into_iter().collect();
            if has_bg {
                names.push(BACKGROUND.to_owned());
            }
            names
        }
    };

    let mut records = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        let mut flags = vec![false; names.len()];
        for c in &r.conditions {
            let k = names.iter().position(|n| n == c).ok_or_else(|| EvaError::Parse {
                what: "cohort",
                line,
                message: format!("condition {c:?} not declared in header"),
            })?;
            flags[k] = true;
        }
        let visits = r
            .visits
            .into_iter()
            .map(Visit::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| EvaError::Parse {
                what: "cohort",
                line,
                message: e.to_string(),
            })?;
        records.push(PatientRecord {
            id: r.id,
            visits,
            conditions: flags,
        });
    }
    let cohort = Cohort::new(records, names)?;
    Ok((cohort, header))
}

pub fn write_vocab(path: &Path, vocab: &VisitVocab) -> Result<()> {
    write_vocab_with(path, vocab, None, None)
}

/// As [`write_vocab`], recording provenance in the header line.
pub fn write_vocab_with(path: &Path, vocab: &VisitVocab, config_digest: Option<&str>, seed: Option<u64>) -> Result<()> {
    let file = File::create(path).map_err(|e| EvaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EvaError::io(path, e);
    let head = VocabHeader {
        version: VOCAB_FORMAT_VERSION,
        size: vocab.len(),
        eos: vocab.eos_id(),
        pad: vocab.pad_id(),
        config_digest: config_digest.map(str::to_owned),
        seed,
    };
    serde_json::to_writer(&mut w, &head)?;
    w.write_all(b"\n").map_err(io)?;
    for (i, e) in vocab.entries().iter().enumerate() {
        let line = VocabLine {
            token_id: i,
            codes: e.codes.codes().map(str::to_owned).collect(),
            frequency: e.frequency,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Serialize)]
struct EncodedHeader<'a> {
    t_max: usize,
    eos: usize,
    pad: usize,
    num_output_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_digest: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct EncodedLine<'a> {
    id: &'a str,
    tokens: &'a [usize],
    mask: &'a [bool],
    conditions: &'a [f64],
}

/// Writes token rows, one per record of `cohort`, after a header line with
/// the reserved ids and provenance.
pub fn write_encoded(
    path: &Path,
    cohort: &Cohort,
    encoded: &EncodedCohort,
    config_digest: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    if cohort.len() != encoded.len() {
        return Err(EvaError::invalid("encoded rows do not match the cohort"));
    }
    let file = File::create(path).map_err(|e| EvaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EvaError::io(path, e);
    let head = EncodedHeader {
        t_max: encoded.t_max,
        eos: encoded.eos,
        pad: encoded.pad,
        num_output_tokens: encoded.num_output_tokens,
        config_digest,
        seed,
    };
    serde_json::to_writer(&mut w, &head)?;
    w.write_all(b"\n").map_err(io)?;
    for (r, s) in cohort.records.iter().zip(&encoded.sequences) {
        let line = EncodedLine {
            id: &r.id,
            tokens: &s.tokens,
            mask: &s.mask,
            conditions: &s.conditions,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_vocab(path: &Path) -> Result<VisitVocab> {
    let file = File::open(path).map_err(|e| EvaError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse = |line: usize, message: String| EvaError::Parse {
        what: "vocabulary",
        line,
        message,
    };
    let (_, first) = lines.next().ok_or_else(|| parse(1, "missing header".into()))?;
    let first = first.map_err(|e| EvaError::io(path, e))?;
    let head: VocabHeader = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if head.version != VOCAB_FORMAT_VERSION {
        return Err(parse(1, format!("unsupported version {}", head.version)));
    }
    let mut entries = Vec::with_capacity(head.size);
    for (i, line) in lines {
        let line = line.map_err(|e| EvaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: VocabLine = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
        if l.token_id != entries.len() {
            return Err(parse(i + 1, format!("expected token id {}", entries.len())));
        }
        let codes = Visit::new(l.codes).map_err(|e| parse(i + 1, e.to_string()))?;
        entries.push(VocabEntry {
            codes,
            frequency: l.frequency,
        });
    }
    let vocab = VisitVocab::from_entries(entries)?;
    if vocab.len() != head.size || vocab.eos_id() != head.eos || vocab.pad_id() != head.pad {
        return Err(parse(1, "header does not match entries".into()));
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_visit_vocab, visit};

    fn sample() -> Cohort {
        Cohort::new(
            vec![
                PatientRecord {
                    id: "a".into(),
                    visits: vec![visit(&["x", "y"]), visit(&["z"])],
                    conditions: vec![true, false],
                },
                PatientRecord {
                    id: "b".into(),
                    visits: vec![visit(&["z"])],
                    conditions: vec![false, true],
                },
            ],
            vec!["hf".into(), BACKGROUND.into()],
        )
        .unwrap()
    }

    #[test]
    fn cohort_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = sample();
        let h = CohortHeader {
            condition_names: c.condition_names.clone(),
            config_digest: Some("abc".into()),
            seed: Some(3),
        };
        write_cohort(&p, &c, Some(&h)).unwrap();
        let (back, head) = read_cohort(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(head, Some(h));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(r#""visits":[["x","y"],["z"]]"#));
    }

    #[test]
    fn headerless_cohort_infers_conditions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"1\",\"visits\":[[\"a\"]],\"conditions\":[\"background\"]}\n\
             {\"id\":\"2\",\"visits\":[[\"b\",\"a\"]],\"conditions\":[\"zeta\",\"alpha\"]}\n",
        )
        .unwrap();
        let (c, head) = read_cohort(&p).unwrap();
        assert!(head.is_none());
        assert_eq!(c.condition_names, vec!["alpha", "zeta", "background"]);
        assert_eq!(c.records[1].conditions, vec![true, true, false]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"1\",\"visits\":[[\"a\"]],\"conditions\":[]}\nnot json\n").unwrap();
        match read_cohort(&p) {
            Err(EvaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        let v = build_visit_vocab(&sample(), 10).unwrap();
        write_vocab(&p, &v).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"version":1,"size":2,"eos":2,"pad":3}"#);
        assert_eq!(read_vocab(&p).unwrap(), v);
    }
}
