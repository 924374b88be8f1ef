//! CSV and JSON emission. Every CSV starts with a `# config-hash: <sha256>`
//! comment line followed by a header row.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// SHA-256 of the value's JSON serialization, lower-case hex.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(invalid(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self, hash: &str) -> String {
        let mut out = format!("# config-hash: {hash}\n");
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let fields: Vec<String> = line.iter().map(|f| escape(f)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, hash: &str) -> Result<()> {
        write_atomic(path, self.to_csv(hash).as_bytes())
    }

    /// Parses output of `to_csv`, returning the hash and the table. Quoted
    /// fields with embedded commas or quotes are supported; embedded newlines
    /// are not.
    pub fn parse_csv(text: &str) -> Result<(Option<String>, Table)> {
        let mut hash = None;
        let mut lines = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# config-hash: ") {
                hash = Some(rest.trim().to_string());
            } else if !line.starts_with('#') && !line.is_empty() {
                lines.push(split_line(line)?);
            }
        }
        let mut it = lines.into_iter();
        let header = it.next().ok_or_else(|| invalid("CSV has no header row"))?;
        let mut t = Table {
            header,
            rows: Vec::new(),
        };
        for row in it {
            t.push(row)?;
        }
        Ok((hash, t))
    }
}

fn escape(f: &str) -> String {
    if f.contains([',', '"', '\n']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

fn split_line(line: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if quoted {
        return Err(invalid("unterminated quote in CSV line"));
    }
    out.push(cur);
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest round-tripping decimal form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&("sweep", 8, 0.5)).unwrap();
        assert_eq!(a, config_hash(&("sweep", 8, 0.5)).unwrap());
        assert_ne!(a, config_hash(&("sweep", 8, 0.25)).unwrap());
        assert_eq!(a.len(), 64);
        assert_eq!(
            config_hash("").unwrap(),
            "12ae32cb1ec02d01eda3581b127c1fee3b0dc53572ed6baf239721a03d82e126"
        );
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(["name", "value"]);
        t.push(vec!["a,b".into(), "1.5".into()]).unwrap();
        t.push(vec!["say \"hi\"".into(), fmt_f64(0.1 + 0.2)])
            .unwrap();
        assert!(t.push(vec!["x".into()]).is_err());
        let text = t.to_csv("abc");
        assert!(text.starts_with("# config-hash: abc\nname,value\n"));
        let (h, back) = Table::parse_csv(&text).unwrap();
        assert_eq!(h.as_deref(), Some("abc"));
        assert_eq!(back, t);
        assert_eq!(back.rows[1][1].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.json");
        write_json(&p, &vec![1, 2]).unwrap();
        let v: Vec<i32> = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v, vec![1, 2]);
    }
}
