//! Line-oriented `key = value` text with `[section]` headers.
//!
//! ```text
//! # comment
//! [optim]
//! lr = 0.1
//! milestones = [60, 120, 160]
//! ```
//!
//! Values are kept as raw strings and typed on access. Rendering is
//! canonical: sections and keys come out in insertion order, one space on
//! each side of `=`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    pub sections: Vec<Section>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header `{line}`")))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {line_no}: empty section name")));
                }
                if doc.section(name).is_some() {
                    return Err(Error::Config(format!("line {line_no}: duplicate section [{name}]")));
                }
                doc.sections.push(Section {
                    name: name.to_string(),
                    line: line_no,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            let section = doc
                .sections
                .last_mut()
                .ok_or_else(|| Error::Config(format!("line {line_no}: key `{key}` outside of any [section]")))?;
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}` in [{}]",
                    section.name
                )));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: line_no,
            });
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name)
            .ok_or_else(|| Error::Config(format!("missing required section [{name}]")))
    }

    /// Appends a section, or returns the existing one with that name.
    pub fn section_mut(&mut self, name: &str) -> &mut Section {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            return &mut self.sections[i];
        }
        self.sections.push(Section {
            name: name.to_string(),
            line: 0,
            entries: Vec::new(),
        });
        self.sections.last_mut().unwrap()
    }

    /// Overlays `other` onto `self`: keys in `other` replace or extend.
    pub fn merge(&mut self, other: &KvDoc) {
        for s in &other.sections {
            let dst = self.section_mut(&s.name);
            for e in &s.entries {
                dst.set(&e.key, e.value.clone());
                if let Some(d) = dst.entries.iter_mut().find(|d| d.key == e.key) {
                    d.line = e.line;
                }
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }
}

impl Section {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => self.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
        self
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    /// Rejects any key not in `allowed`, naming the first offender.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(Error::Config(format!(
                "line {}: unknown key `{}` in [{}]",
                e.line, e.key, self.name
            ))),
            None => Ok(()),
        }
    }

    fn type_err(&self, e: &Entry, what: &str) -> Error {
        Error::Config(format!(
            "line {}: [{}] {} = `{}` is not a valid {what}",
            e.line, self.name, e.key, e.value
        ))
    }

    pub fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => unquote(&e.value).parse::<T>().map(Some).map_err(|_| self.type_err(e, what)),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse(key, "number")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse(key, "non-negative integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.parse(key, "boolean")
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(|v| unquote(v).to_string())
    }

    pub fn get_list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.entry(key) else { return Ok(None) };
        let inner = e
            .value
            .trim()
            .strip_prefix('[')
            .and_then(|v| v.strip_suffix(']'))
            .ok_or_else(|| self.type_err(e, &format!("list of {what}")))?;
        if inner.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        inner
            .split(',')
            .map(|item| unquote(item.trim()).parse::<T>().map_err(|_| self.type_err(e, &format!("list of {what}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// Renders a list in the form accepted by [`Section::get_list`].
pub fn list<T: std::fmt::Display>(items: &[T]) -> String {
    let parts: Vec<String> = items.iter().map(|i| i.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# run\n[optim]\nlr = 0.1\nmomentum=0.9\n\n[schedule]\nmilestones = [60, 120, 160]\n";
        let doc = KvDoc::parse(text).unwrap();
        let s = doc.section("schedule").unwrap();
        assert_eq!(s.get_list::<usize>("milestones", "int").unwrap().unwrap(), vec![60, 120, 160]);
        assert_eq!(doc.section("optim").unwrap().get_f64("momentum").unwrap(), Some(0.9));
        let again = KvDoc::parse(&doc.render()).unwrap();
        assert_eq!(again.render(), doc.render());
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = KvDoc::parse("[a]\nx = 1\nx = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = KvDoc::parse("x = 1\n").unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");
        let doc = KvDoc::parse("[optim]\nlearning_rat = 0.1\n").unwrap();
        let err = doc.section("optim").unwrap().check_keys(&["lr"]).unwrap_err().to_string();
        assert!(err.contains("learning_rat") && err.contains("line 2"), "{err}");
        let doc = KvDoc::parse("[optim]\nlr = fast\n").unwrap();
        assert!(doc.section("optim").unwrap().get_f64("lr").is_err());
    }

    #[test]
    fn merge_overrides() {
        let mut base = KvDoc::parse("[optim]\nlr = 0.1\nmomentum = 0.9\n").unwrap();
        base.merge(&KvDoc::parse("[optim]\nlr = 0.05\n[run]\nseed = 3\n").unwrap());
        assert_eq!(base.section("optim").unwrap().get_f64("lr").unwrap(), Some(0.05));
        assert_eq!(base.section("run").unwrap().get_u64("seed").unwrap(), Some(3));
    }
}
