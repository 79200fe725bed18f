//! Request document templates.
//!
//! A template is a request document with `${placeholder}` holes. Templates
//! live as `<name>.req` files in the template directory; rendering
//! substitutes every placeholder from `--set key=value` pairs and refuses
//! to emit a document with holes left in it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("unresolved placeholder ${{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("unterminated placeholder")]
    Unterminated,
    #[error("bad --set argument {0:?}, expected key=value")]
    BadBinding(String),
    #[error("template io: {0}")]
    Io(String),
}

/// Substitute every `${name}` in `text` from `bindings`. Unused bindings
/// are fine; unresolved placeholders are not.
pub fn render(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(at) = rest.find("${") {
        out.push_str(&rest[..at]);
        let tail = &rest[at + 2..];
        let end = tail.find('}').ok_or(TemplateError::Unterminated)?;
        let name = &tail[..end];
        match bindings.get(name) {
            Some(value) => out.push_str(value),
            None => return Err(TemplateError::UnresolvedPlaceholder(name.to_string())),
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Parse `key=value` pairs from repeated `--set` flags.
pub fn parse_bindings<S: AsRef<str>>(pairs: &[S]) -> Result<BTreeMap<String, String>, TemplateError> {
    let mut bindings = BTreeMap::new();
    for pair in pairs {
        let pair = pair.as_ref();
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| TemplateError::BadBinding(pair.to_string()))?;
        bindings.insert(key.to_string(), value.to_string());
    }
    Ok(bindings)
}

pub struct TemplateStore {
    dir: PathBuf,
}

impl TemplateStore {
    pub fn new(dir: &Path) -> TemplateStore {
        TemplateStore { dir: dir.to_path_buf() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.req"))
    }

    pub fn save(&self, name: &str, text: &str) -> Result<(), TemplateError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TemplateError::Io(e.to_string()))?;
        std::fs::write(self.path(name), text).map_err(|e| TemplateError::Io(e.to_string()))
    }

    pub fn load(&self, name: &str) -> Result<String, TemplateError> {
        std::fs::read_to_string(self.path(name))
            .map_err(|_| TemplateError::UnknownTemplate(name.to_string()))
    }

    pub fn list(&self) -> Result<Vec<String>, TemplateError> {
        let mut names = Vec::new();
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(names),
            Err(e) => return Err(TemplateError::Io(e.to_string())),
        };
        for entry in entries {
            let entry = entry.map_err(|e| TemplateError::Io(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".req") {
                names.push(stem.to_string());
            }
        }
        names.sort();
        Ok(names)
    }

    pub fn render(&self, name: &str, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        render(&self.load(name)?, bindings)
    }
}
