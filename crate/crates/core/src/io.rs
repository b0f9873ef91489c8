//! Line-delimited JSON files: one scene (or prediction set) per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SgqError};
use crate::geom::Scene;

/// Records that can check themselves after parsing.
pub trait Record: Serialize + DeserializeOwned {
    fn check(&self) -> std::result::Result<(), String>;
}

impl Record for Scene {
    fn check(&self) -> std::result::Result<(), String> {
        self.bev_range.validate().map_err(|e| e.to_string())?;
        for (k, el) in self.elements.iter().enumerate() {
            if el.points.is_empty() {
                return Err(format!("element {k} has no points"));
            }
            if el.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("element {k} has a non-finite coordinate"));
            }
        }
        for cam in self.cameras.iter().flatten() {
            cam.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

pub fn parse_lines<T: Record>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(r) = parse_line(line, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

fn parse_line<T: Record>(line: &str, lineno: usize) -> Result<Option<T>> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let rec: T = serde_json::from_str(line).map_err(|e| SgqError::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    rec.check().map_err(|msg| SgqError::Parse { line: lineno, msg })?;
    Ok(Some(rec))
}

pub fn read_lines<T: Record>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(r) = parse_line(&line?, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn to_lines<T: Record>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| SgqError::Invalid(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_lines<T: Record>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_lines(records)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_lines(path)
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    write_lines(path, scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{default_rig, BevRange, ClassId, MapElement};

    fn sample() -> Scene {
        Scene {
            id: "s0".into(),
            bev_range: BevRange::default(),
            elements: vec![MapElement {
                class: ClassId::PedCrossing,
                closed: true,
                points: vec![[0.1, 0.2], [1.0 / 3.0, -2.5], [std::f64::consts::PI, 7.0]],
            }],
            cameras: Some(default_rig()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = vec![sample(), Scene::empty("e")];
        let text = to_lines(&s).unwrap();
        let back: Vec<Scene> = parse_lines(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn field_names() {
        let text = to_lines(&[sample()]).unwrap();
        for key in ["\"id\"", "\"bev_range\"", "\"x_min\"", "\"class\":\"ped_crossing\"", "\"closed\"", "\"R\"", "\"fx\""] {
            assert!(text.contains(key), "missing {key}");
        }
    }

    #[test]
    fn parse_error_names_line() {
        let good = to_lines(&[sample()]).unwrap();
        let text = format!("{good}\n{{\"id\": 3}}\n");
        match parse_lines::<Scene>(&text) {
            Err(SgqError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let text = r#"{"id":"x","bev_range":{"x_min":1,"x_max":0,"y_min":0,"y_max":1},"elements":[]}"#;
        assert!(matches!(parse_lines::<Scene>(text), Err(SgqError::Parse { line: 1, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_scenes(&path, &[sample()]).unwrap();
        assert_eq!(read_scenes(&path).unwrap(), vec![sample()]);
    }
}
