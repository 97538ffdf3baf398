//! Line-oriented helpers shared by the text file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, which round-trips every `f64` exactly.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A file split into its header line and the remaining non-empty content lines,
/// each tagged with its 1-based line number.
pub(crate) struct TextFile<'a> {
    pub header: &'a str,
    pub header_line: usize,
    pub body: Vec<(usize, &'a str)>,
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits `text` into a header (the first non-empty line) and body lines.
pub(crate) fn split_header<'a>(path: &Path, text: &'a str) -> Result<TextFile<'a>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file: missing header"))?;
    Ok(TextFile {
        header,
        header_line,
        body: lines.collect(),
    })
}

/// Checks that a header starts with `magic` and returns the remaining `key=value` tokens.
pub(crate) fn header_fields<'a>(path: &Path, file: &TextFile<'a>, magic: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = file.header.strip_prefix(magic).ok_or_else(|| {
        Error::parse(
            path,
            file.header_line,
            format!("expected header starting with `{magic}`"),
        )
    })?;
    if !(rest.is_empty() || rest.starts_with(char::is_whitespace)) {
        return Err(Error::parse(
            path,
            file.header_line,
            format!("expected header starting with `{magic}`"),
        ));
    }
    rest.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .ok_or_else(|| Error::parse(path, file.header_line, format!("malformed header field `{tok}`")))
        })
        .collect()
}

pub(crate) fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("invalid number `{tok}`")))
}

pub(crate) fn parse_usize(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("invalid integer `{tok}`")))
}

pub(crate) fn parse_label(path: &Path, line: usize, tok: &str) -> Result<u8> {
    match tok {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::parse(path, line, format!("label must be 0 or 1, got `{tok}`"))),
    }
}

/// Writes `contents` to `path`, creating parent directories as needed.
pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}
