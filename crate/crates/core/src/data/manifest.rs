//! Cohort manifests.
//!
//! A manifest is a comma-separated file with header
//! `slide_id,patient_id,feature_file,<task_id>...`; an empty task cell means
//! the slide is unlabeled for that task and `#` lines are comments. The task
//! registry lives next to it in `tasks.toml`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::features::read_header;
use super::registry::TaskRegistry;
use crate::error::{Error, Result};

pub const REGISTRY_FILE: &str = "tasks.toml";
const FIXED_COLUMNS: [&str; 3] = ["slide_id", "patient_id", "feature_file"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub feature_file: PathBuf,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<SlideRecord>,
    pub registry: TaskRegistry,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn feature_path(&self, record: &SlideRecord) -> PathBuf {
        self.base_dir.join(&record.feature_file)
    }

    pub fn record(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.records.iter().find(|r| r.slide_id == slide_id)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
        header.extend(self.registry.tasks().iter().map(|t| t.task_id.as_str()));
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![
                r.slide_id.clone(),
                r.patient_id.clone(),
                r.feature_file.to_string_lossy().into_owned(),
            ];
            for t in self.registry.tasks() {
                row.push(r.labels.get(&t.task_id).map(|c| c.to_string()).unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Writes the manifest and its sibling registry.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let reg = path.with_file_name(REGISTRY_FILE);
        self.registry.save(&reg)
    }
}

/// Parses `path` with the registry found in the sibling `tasks.toml` and
/// checks every referenced feature file.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let registry = TaskRegistry::load(&path.with_file_name(REGISTRY_FILE))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest_text(path, &text, registry)?;
    check_feature_files(path, &text, &m)?;
    Ok(m)
}

fn err(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Parses manifest text without touching feature files.
pub fn parse_manifest_text(path: &Path, text: &str, registry: TaskRegistry) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = rdr.records();
    let header = match rows.next() {
        None => {
            return Ok(Manifest {
                records: vec![],
                registry,
                base_dir,
            })
        }
        Some(h) => h.map_err(|e| err(path, 1, e.to_string()))?,
    };
    let line_at = |pos: Option<&csv::Position>| -> u64 {
        pos.map_or(0, |p| {
            let mut end = (p.byte() as usize).min(text.len());
            // Positions may point at comment lines preceding the record.
            while text[end..].starts_with('#') || text[end..].starts_with('\n') {
                end = text[end..].find('\n').map_or(text.len(), |i| end + i + 1);
            }
            text.as_bytes()[..end].iter().filter(|&&b| b == b'\n').count() as u64 + 1
        })
    };
    let header_line = line_at(header.position());
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != FIXED_COLUMNS {
        return Err(err(
            path,
            header_line,
            format!("header must start with {}", FIXED_COLUMNS.join(",")),
        ));
    }
    let mut task_cols = Vec::new();
    for name in &cols[3..] {
        let spec = registry
            .get(name)
            .ok_or_else(|| err(path, header_line, format!("unknown task column `{name}`")))?;
        if task_cols.iter().any(|(t, _): &(String, usize)| t == name) {
            return Err(err(path, header_line, format!("duplicate task column `{name}`")));
        }
        task_cols.push((name.to_string(), spec.num_classes));
    }

    let mut records = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for row in rows {
        let row = row.map_err(|e| {
            err(path, line_at(e.position()), e.to_string())
        })?;
        let line = line_at(row.position());
        if row.len() != cols.len() {
            return Err(err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), row.len()),
            ));
        }
        let slide_id = row[0].to_string();
        if slide_id.is_empty() {
            return Err(err(path, line, "empty slide_id"));
        }
        if let Some(first) = seen.get(&slide_id) {
            return Err(err(
                path,
                line,
                format!("duplicate slide_id `{slide_id}` (lines {first} and {line})"),
            ));
        }
        seen.insert(slide_id.clone(), line);
        let mut labels = BTreeMap::new();
        for ((task, classes), cell) in task_cols.iter().zip(row.iter().skip(3)) {
            if cell.is_empty() {
                continue;
            }
            let label: usize = cell
                .parse()
                .map_err(|_| err(path, line, format!("task `{task}`: label `{cell}` is not a class index")))?;
            if label >= *classes {
                return Err(err(
                    path,
                    line,
                    format!("task `{task}`: label {label} out of range [0, {classes})"),
                ));
            }
            labels.insert(task.clone(), label);
        }
        records.push(SlideRecord {
            slide_id,
            patient_id: row[1].to_string(),
            feature_file: PathBuf::from(&row[2]),
            labels,
        });
    }
    Ok(Manifest {
        records,
        registry,
        base_dir,
    })
}

fn check_feature_files(path: &Path, text: &str, m: &Manifest) -> Result<()> {
    // Map slide ids back to their lines for error reporting.
    let line_of = |slide_id: &str| -> u64 {
        text.lines()
            .position(|l| l.split(',').next().map(str::trim) == Some(slide_id))
            .map_or(0, |i| i as u64 + 1)
    };
    let mut width: Option<(u32, String)> = None;
    for r in &m.records {
        let fp = m.feature_path(r);
        if !fp.is_file() {
            return Err(err(
                path,
                line_of(&r.slide_id),
                format!("missing feature file {}", fp.display()),
            ));
        }
        let h = read_header(&fp)?;
        match &width {
            None => width = Some((h.cols, r.slide_id.clone())),
            Some((d, first)) if *d != h.cols => {
                return Err(err(
                    path,
                    line_of(&r.slide_id),
                    format!("feature width {} differs from {d} of slide `{first}`", h.cols),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::registry::TaskSpec;

    fn registry() -> TaskRegistry {
        TaskRegistry::new(vec![TaskSpec::binary("a"), TaskSpec::multiclass("b", 3)]).unwrap()
    }

    fn parse(text: &str) -> Result<Manifest> {
        parse_manifest_text(Path::new("/x/m.csv"), text, registry())
    }

    #[test]
    fn empty_record_section_is_valid() {
        let m = parse("slide_id,patient_id,feature_file,a,b\n# nothing yet\n").unwrap();
        assert!(m.records.is_empty());
        assert!(parse("").unwrap().records.is_empty());
    }

    #[test]
    fn duplicate_slide_cites_both_lines() {
        let text = "slide_id,patient_id,feature_file,a\n\
                    # c\n\
                    s1,p1,f1,0\n\
                    s2,p1,f2,1\n\
                    s3,p2,f3,\n\
                    s4,p2,f4,\n\
                    s5,p3,f5,\n\
                    # c\n\
                    s2,p4,f6,0\n";
        match parse(text) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 9);
                assert!(detail.contains("lines 4 and 9"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_task_and_bad_label() {
        assert!(matches!(
            parse("slide_id,patient_id,feature_file,zzz\n"),
            Err(Error::Manifest { line: 1, .. })
        ));
        match parse("slide_id,patient_id,feature_file,b\ns1,p,f,3\n") {
            Err(Error::Manifest { line: 2, detail, .. }) => assert!(detail.contains("out of range")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialize_parse_is_identity() {
        let text = "slide_id,patient_id,feature_file,a,b\ns1,p1,f/s1.tcf,1,\ns2,p1,f/s2.tcf,,2\ns3,p2,f/s3.tcf,0,0\n";
        let m = parse(text).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].labels.get("b"), Some(&2));
        let again = parse(&m.to_csv()).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.to_csv(), m.to_csv());
    }

    #[test]
    fn missing_feature_file_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        registry().save(&dir.path().join(REGISTRY_FILE)).unwrap();
        std::fs::write(&path, "slide_id,patient_id,feature_file,a\ns1,p1,nowhere.tcf,1\n").unwrap();
        match parse_manifest(&path) {
            Err(Error::Manifest { line: 2, detail, .. }) => assert!(detail.contains("missing")),
            other => panic!("{other:?}"),
        }
    }
}
