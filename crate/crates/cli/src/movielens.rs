//! MovieLens 100k ratings to triple files.
//!
//! Users and movies become entities (`u<id>`, `m<id>`), each of the five
//! star ratings a relation (`rating_<r>`).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gr_core::{Error, Result};

/// Validation triples taken from the head of the test ratings.
pub const VALID_SIZE: usize = 5000;

/// One `user item rating timestamp` line as a tab-separated triple.
pub fn convert_line(line: &str) -> std::result::Result<String, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let id = |name: &str, v: &str| -> std::result::Result<u64, String> {
        v.parse().map_err(|_| format!("{name} `{v}` is not a number"))
    };
    let user = id("user", fields[0])?;
    let item = id("item", fields[1])?;
    let rating = id("rating", fields[2])?;
    id("timestamp", fields[3])?;
    if !(1..=5).contains(&rating) {
        return Err(format!("rating {rating} outside 1..=5"));
    }
    Ok(format!("u{user}\trating_{rating}\tm{item}"))
}

fn convert_file(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(convert_line(&line).map_err(|message| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Counts of the written splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Converted {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// `base` becomes `train.txt`; the first [`VALID_SIZE`] lines of `test`
/// become `valid.txt` and the rest `test.txt`.
pub fn convert(base: &Path, test: &Path, out_dir: &Path) -> Result<Converted> {
    let train = convert_file(base)?;
    let held_out = convert_file(test)?;
    let cut = held_out.len().min(VALID_SIZE);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_lines(&out_dir.join("train.txt"), &train)?;
    write_lines(&out_dir.join("valid.txt"), &held_out[..cut])?;
    write_lines(&out_dir.join("test.txt"), &held_out[cut..])?;
    Ok(Converted {
        train: train.len(),
        valid: cut,
        test: held_out.len() - cut,
    })
}
