//! Line-oriented `kind key=value key=value` records shared by the program,
//! instruction and graph file formats. `#` starts a comment.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: String,
    /// Bare words after the kind that are not `key=value` pairs.
    pub words: Vec<String>,
    pub fields: Vec<(String, String)>,
}

impl Record {
    /// Returns `None` for blank or comment-only lines.
    pub fn parse(line: &str) -> Option<Record> {
        let line = line.split('#').next().unwrap_or("");
        let mut toks = line.split_whitespace();
        let kind = toks.next()?.to_string();
        let mut words = Vec::new();
        let mut fields = Vec::new();
        for t in toks {
            match t.split_once('=') {
                Some((k, v)) => fields.push((k.to_string(), v.to_string())),
                None => words.push(t.to_string()),
            }
        }
        Some(Record { kind, words, fields })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn req(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("`{}` record missing `{key}`", self.kind))
    }

    pub fn parse_req<T: FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: Display,
    {
        let v = self.req(key)?;
        v.parse().map_err(|e| format!("`{key}={v}`: {e}"))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse().map_err(|e| format!("`{key}={v}`: {e}")))
            .transpose()
    }
}

/// Builds a record line field by field.
#[derive(Debug, Default)]
pub struct Line(String);

impl Line {
    pub fn new(kind: &str) -> Self {
        Line(kind.to_string())
    }

    pub fn word(mut self, w: impl Display) -> Self {
        self.0.push(' ');
        self.0.push_str(&w.to_string());
        self
    }

    pub fn kv(mut self, k: &str, v: impl Display) -> Self {
        self.0.push_str(&format!(" {k}={v}"));
        self
    }

    pub fn finish(self) -> String {
        self.0
    }
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("`{s}`: {e}"))
}

pub fn join<T: Display>(items: &[T], sep: &str) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

pub fn parse_list<T: FromStr>(s: &str, sep: char) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep).map(|p| p.parse().map_err(|e| format!("`{p}`: {e}"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_record() {
        let r = Record::parse("instr a b seq=3 unit=tcu # trailing").unwrap();
        assert_eq!(r.kind, "instr");
        assert_eq!(r.words, vec!["a", "b"]);
        assert_eq!(r.get("unit"), Some("tcu"));
        assert_eq!(r.parse_req::<u32>("seq"), Ok(3));
        assert!(r.req("missing").is_err());
        assert!(Record::parse("   # only comment").is_none());
    }

    #[test]
    fn hex_and_decimal() {
        assert_eq!(parse_u64("0x10"), Ok(16));
        assert_eq!(parse_u64("10"), Ok(10));
        assert!(parse_u64("zz").is_err());
    }
}
