//! Line-oriented dataset cache: a version header, then one sketch per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Result, SketchError};
use crate::geometry::Sketch;

pub const CACHE_HEADER: &str = "sketchmod-dataset 1";

pub fn write_dataset(mut w: impl Write, sketches: &[Sketch]) -> Result<()> {
    writeln!(w, "{CACHE_HEADER}")?;
    for s in sketches {
        writeln!(w, "{}", s.to_json())?;
    }
    Ok(())
}

pub fn read_dataset(r: impl std::io::Read) -> Result<Vec<Sketch>> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != CACHE_HEADER {
        return Err(SketchError::UnsupportedFormat(format!("dataset header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Sketch::from_json(&line).map_err(|e| SketchError::Parse {
            record: i,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, sketches: &[Sketch]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, sketches)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sketch>> {
    read_dataset(std::fs::File::open(path)?)
}
