//! Line-oriented annotation and detection files.
//!
//! Annotations are one record per line, `video_id,start_frame,end_frame,class_id`
//! with inclusive frame bounds. Proposal and detection files share the layout
//! plus a trailing confidence column. Blank lines and lines starting with `#`
//! are skipped; any malformed record is reported with its file and line number.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::localize::Segment;

/// One labeled action span in a video, frame bounds inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub class_id: usize,
}

impl Annotation {
    /// View as a ground-truth segment (confidence pinned to 1.0).
    pub fn to_segment(&self) -> Segment {
        Segment {
            video_id: self.video_id.clone(),
            start_frame: self.start_frame,
            end_frame: self.end_frame,
            class_id: self.class_id,
            confidence: 1.0,
        }
    }
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn split_record<'a>(
    file: &Path,
    lineno: usize,
    line: &'a str,
    want: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != want {
        return Err(parse_err(
            file,
            lineno,
            format!("expected {want} comma-separated fields, found {}", fields.len()),
        ));
    }
    if fields[0].is_empty() {
        return Err(parse_err(file, lineno, "empty video id"));
    }
    Ok(fields)
}

fn parse_usize(file: &Path, lineno: usize, what: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(file, lineno, format!("{what} is not a non-negative integer: {s:?}")))
}

fn check_span(file: &Path, lineno: usize, start: usize, end: usize) -> Result<()> {
    if start > end {
        return Err(parse_err(
            file,
            lineno,
            format!("start frame {start} exceeds end frame {end}"),
        ));
    }
    Ok(())
}

fn records_in(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Read an annotation file (`video_id,start_frame,end_frame,class_id`).
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in records_in(&text) {
        let f = split_record(path, lineno, line, 4)?;
        let start = parse_usize(path, lineno, "start frame", f[1])?;
        let end = parse_usize(path, lineno, "end frame", f[2])?;
        check_span(path, lineno, start, end)?;
        out.push(Annotation {
            video_id: f[0].to_string(),
            start_frame: start,
            end_frame: end,
            class_id: parse_usize(path, lineno, "class id", f[3])?,
        });
    }
    Ok(out)
}

/// Write annotations in the four-column line format.
pub fn write_annotations(path: impl AsRef<Path>, records: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for a in records {
        text.push_str(&format!(
            "{},{},{},{}\n",
            a.video_id, a.start_frame, a.end_frame, a.class_id
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a proposal or detection file
/// (`video_id,start_frame,end_frame,class_id,confidence`).
pub fn read_segments(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in records_in(&text) {
        let f = split_record(path, lineno, line, 5)?;
        let start = parse_usize(path, lineno, "start frame", f[1])?;
        let end = parse_usize(path, lineno, "end frame", f[2])?;
        check_span(path, lineno, start, end)?;
        let confidence: f64 = f[4]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("confidence is not a number: {:?}", f[4])))?;
        if !confidence.is_finite() {
            return Err(parse_err(path, lineno, format!("confidence is not finite: {confidence}")));
        }
        out.push(Segment {
            video_id: f[0].to_string(),
            start_frame: start,
            end_frame: end,
            class_id: parse_usize(path, lineno, "class id", f[3])?,
            confidence,
        });
    }
    Ok(out)
}

/// Write segments in the five-column line format.
pub fn write_segments(path: impl AsRef<Path>, records: &[Segment]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in records {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            s.video_id, s.start_frame, s.end_frame, s.class_id, s.confidence
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        let records = vec![
            Annotation {
                video_id: "train_000".into(),
                start_frame: 10,
                end_frame: 42,
                class_id: 3,
            },
            Annotation {
                video_id: "train_001".into(),
                start_frame: 0,
                end_frame: 0,
                class_id: 1,
            },
        ];
        write_annotations(&path, &records).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), records);
    }

    #[test]
    fn segment_round_trip_preserves_confidence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        let records = vec![Segment {
            video_id: "test_004".into(),
            start_frame: 5,
            end_frame: 19,
            class_id: 2,
            confidence: 0.8125,
        }];
        write_segments(&path, &records).unwrap();
        let back = read_segments(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].video_id, "test_004");
        assert_eq!(back[0].confidence, 0.8125);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        fs::write(&path, "# header\n\nv0,1,5,2\n   \nv1,3,9,1\n").unwrap();
        let records = read_annotations(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].video_id, "v1");
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "v0,1,5,2\nv1,oops,9,1\n").unwrap();
        let err = read_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("bad.csv"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("oops"), "{err}");
    }

    #[test]
    fn inverted_span_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "v0,9,5,2\n").unwrap();
        let err = read_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn wrong_column_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "v0,1,5\n").unwrap();
        let err = read_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("4"), "{err}");
        // a detection file needs the confidence column
        fs::write(&path, "v0,1,5,2\n").unwrap();
        assert!(read_segments(&path).is_err());
    }

    #[test]
    fn annotation_converts_to_unit_confidence_segment() {
        let a = Annotation {
            video_id: "v".into(),
            start_frame: 2,
            end_frame: 8,
            class_id: 4,
        };
        let s = a.to_segment();
        assert_eq!(s.confidence, 1.0);
        assert_eq!(s.class_id, 4);
        assert_eq!((s.start_frame, s.end_frame), (2, 8));
    }
}
