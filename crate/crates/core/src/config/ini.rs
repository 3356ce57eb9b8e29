//! Flat `key = value` files with `[section]` headers.
//!
//! `#` starts a comment line. Keys before the first header belong to the
//! unnamed section `""`. Section order and key order are preserved.

use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum IniError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("[{section}] missing key `{key}`")]
    Missing { section: String, key: String },
    #[error("[{section}] `{key}` (line {line}): {msg}")]
    Value {
        section: String,
        key: String,
        line: usize,
        msg: String,
    },
    #[error("[{section}] unknown key `{key}` (line {line})")]
    Unknown {
        section: String,
        key: String,
        line: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    entries: Vec<(String, String, usize)>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map_or(0, |e| e.2)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, IniError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| IniError::Value {
                    section: self.name.clone(),
                    key: key.to_string(),
                    line: self.line_of(key),
                    msg: format!("cannot parse `{v}`: {e}"),
                })
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, IniError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| IniError::Missing {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, IniError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Whitespace-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, IniError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split_whitespace()
                    .map(|item| {
                        item.parse::<T>().map_err(|e| IniError::Value {
                            section: self.name.clone(),
                            key: key.to_string(),
                            line: self.line_of(key),
                            msg: format!("cannot parse `{item}`: {e}"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Error naming a value problem at this key.
    pub fn invalid(&self, key: &str, msg: impl Into<String>) -> IniError {
        IniError::Value {
            section: self.name.clone(),
            key: key.to_string(),
            line: self.line_of(key),
            msg: msg.into(),
        }
    }

    /// Fails on any key outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<(), IniError> {
        for (k, _, line) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(IniError::Unknown {
                    section: self.name.clone(),
                    key: k.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<Section>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, IniError> {
        let mut sections = vec![Section::new("")];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| IniError::Syntax {
                    line: lineno,
                    msg: format!("unterminated section header `{line}`"),
                })?;
                let name = name.trim();
                if sections.iter().any(|s| s.name == name) {
                    return Err(IniError::Syntax {
                        line: lineno,
                        msg: format!("duplicate section [{name}]"),
                    });
                }
                sections.push(Section::new(name));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| IniError::Syntax {
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(IniError::Syntax {
                    line: lineno,
                    msg: "empty key".into(),
                });
            }
            let sec = sections.last_mut().unwrap();
            if sec.raw(k).is_some() {
                return Err(IniError::Syntax {
                    line: lineno,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            sec.entries.push((k.to_string(), v.trim().to_string(), lineno));
        }
        if sections[0].entries.is_empty() {
            sections.remove(0);
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// The named section, or an empty one.
    pub fn section_or_empty(&self, name: &str) -> Section {
        self.section(name).cloned().unwrap_or_else(|| Section::new(name))
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !s.name.is_empty() {
                let _ = writeln!(out, "[{}]", s.name);
            }
            for (k, v, _) in &s.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}
