//! Tab-separated corpus, query and relevance files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{tokenize, Document, FreqBucket, Query, Relevance};
use crate::error::{Error, Result};

pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

pub(crate) fn fields<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    expect: usize,
) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != expect {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {expect} tab-separated fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// `doc_id \t title \t content`
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = fields(path, *n, line, 3)?;
            if f[0].is_empty() {
                return Err(Error::parse(path, *n, "empty doc_id"));
            }
            Ok(Document {
                doc_id: f[0].to_owned(),
                title_tokens: tokenize(f[1]),
                content_tokens: tokenize(f[2]),
            })
        })
        .collect()
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = create(path)?;
    for d in docs {
        writeln!(
            w,
            "{}\t{}\t{}",
            d.doc_id,
            d.title_tokens.join(" "),
            d.content_tokens.join(" ")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `query_id \t text \t freq_bucket`
pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = fields(path, *n, line, 3)?;
            let freq_bucket = f[2]
                .parse::<FreqBucket>()
                .map_err(|e| Error::parse(path, *n, e.to_string()))?;
            Ok(Query {
                query_id: f[0].to_owned(),
                tokens: tokenize(f[1]),
                freq_bucket,
            })
        })
        .collect()
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut w = create(path)?;
    for q in queries {
        writeln!(w, "{}\t{}\t{}", q.query_id, q.tokens.join(" "), q.freq_bucket)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `query_id \t doc_id \t grade`
pub fn read_relevance(path: &Path) -> Result<Relevance> {
    let mut out = Relevance::new();
    for (n, line) in read_lines(path)? {
        let f = fields(path, n, &line, 3)?;
        let grade: u8 = f[2]
            .trim()
            .parse()
            .ok()
            .filter(|g| *g <= 4)
            .ok_or_else(|| Error::parse(path, n, format!("bad grade {:?}", f[2])))?;
        out.insert((f[0].to_owned(), f[1].to_owned()), grade);
    }
    Ok(out)
}

pub fn write_relevance(path: &Path, rel: &Relevance) -> Result<()> {
    let mut w = create(path)?;
    for ((q, d), g) in rel {
        writeln!(w, "{q}\t{d}\t{g}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
