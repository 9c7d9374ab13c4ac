use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cache::MAX_ID_LEN;
use crate::image::{synth_image, Image};
use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["image_id", "source", "mos"];

/// Where the pixels of an image come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// A raw `MAIM` tensor file; relative paths resolve against the
    /// manifest's directory.
    Path(PathBuf),
    /// `synth:<seed>:<quality>`, rendered by [`synth_image`].
    Synth { seed: u64, quality: f64 },
}

impl Source {
    pub fn load(&self, base: &Path, size: usize) -> Result<Image> {
        match self {
            Source::Path(p) => Image::load_raw(&base.join(p)),
            Source::Synth { seed, quality } => Ok(synth_image(*seed, *quality, size)),
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let Some(rest) = s.strip_prefix("synth:") else {
            if s.is_empty() {
                return Err("empty source".into());
            }
            return Ok(Source::Path(PathBuf::from(s)));
        };
        let (seed, quality) = rest.split_once(':').ok_or_else(|| {
            format!("synthetic source {s:?} must look like synth:<seed>:<quality>")
        })?;
        let seed = seed
            .parse()
            .map_err(|_| format!("bad synthetic seed {seed:?}"))?;
        let quality: f64 = quality
            .parse()
            .map_err(|_| format!("bad synthetic quality {quality:?}"))?;
        if !(0.0..=1.0).contains(&quality) {
            return Err(format!("synthetic quality {quality} outside [0, 1]"));
        }
        Ok(Source::Synth { seed, quality })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Path(p) => write!(f, "{}", p.display()),
            Source::Synth { seed, quality } => write!(f, "synth:{seed}:{quality}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image_id: String,
    pub source: Source,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<Record>,
    /// Directory that relative [`Source::Path`] entries resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let line = i as u64 + 2;
            validate_record(r).map_err(|message| Error::Manifest { line, message })?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Manifest {
                    line,
                    message: format!("duplicate image_id {:?}", r.image_id),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            records,
            base_dir: PathBuf::from("."),
        })
    }

    pub fn from_reader<R: Read>(name: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: 1,
                message: format!(
                    "header must be {:?}, found {:?}",
                    MANIFEST_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_error(e, 0))?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Manifest { line, message };
            let image_id = row[0].to_string();
            let source = row[1].parse::<Source>().map_err(bad)?;
            let mos = row[2]
                .parse::<f64>()
                .map_err(|_| bad(format!("mos {:?} is not a number", &row[2])))?;
            let rec = Record {
                image_id,
                source,
                mos,
            };
            validate_record(&rec).map_err(bad)?;
            if !seen.insert(rec.image_id.clone()) {
                return Err(bad(format!("duplicate image_id {:?}", rec.image_id)));
            }
            records.push(rec);
        }
        Ok(Self {
            name: name.into(),
            records,
            base_dir: PathBuf::from("."),
        })
    }

    /// Parse a manifest file. The name is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let mut m = Self::from_reader(name, file)?;
        m.base_dir = path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.image_id.as_str(),
                &r.source.to_string(),
                &r.mos.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::cache::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

fn validate_record(r: &Record) -> std::result::Result<(), String> {
    if r.image_id.is_empty() {
        return Err("empty image_id".into());
    }
    if r.image_id.len() > MAX_ID_LEN {
        return Err(format!("image_id longer than {MAX_ID_LEN} bytes"));
    }
    if !r.mos.is_finite() {
        return Err(format!("mos {} is not finite", r.mos));
    }
    Ok(())
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Manifest {
        line,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_source_kinds() {
        let text = "image_id,source,mos\nx1,imgs/x1.maim,3.5\nx2,synth:4:0.25,1.0\n";
        let m = DatasetManifest::from_reader("t", text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].source, Source::Path("imgs/x1.maim".into()));
        assert_eq!(
            m.records[1].source,
            Source::Synth {
                seed: 4,
                quality: 0.25
            }
        );
        let again = DatasetManifest::from_reader("t", m.to_csv().as_bytes()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            (
                "image_id,source,mos\nx,synth:1:0.5,3\ny,synth:1:0.5,abc\n",
                3,
            ),
            ("image_id,source,mos\nx,synth:1:0.5,3\nx,synth:2:0.5,2\n", 3),
            ("image_id,source,mos\nx,synth:1:0.5,NaN\n", 2),
            ("image_id,source,mos\nx,synth:1:2.0,3\n", 2),
            ("image_id,source,mos\nx,synth:1:0.5\n", 2),
            ("id,src,mos\n", 1),
        ];
        for (text, want) in cases {
            match DatasetManifest::from_reader("t", text.as_bytes()) {
                Err(Error::Manifest { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
