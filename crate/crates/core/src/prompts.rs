//! Prompt templates.
//!
//! Each template is a text asset with `{name}` placeholders. Only names
//! passed to [`PromptTemplates::render`] are substituted, so literal JSON
//! braces in a template survive. Operators override a template by placing
//! `<name>.txt` in a config directory.

use std::collections::BTreeMap;
use std::path::Path;

const DEFAULTS: &[(&str, &str)] = &[
    ("recognize", include_str!("../prompts/recognize.txt")),
    ("construct", include_str!("../prompts/construct.txt")),
    ("table", include_str!("../prompts/table.txt")),
    ("finalize", include_str!("../prompts/finalize.txt")),
    ("simulate", include_str!("../prompts/simulate.txt")),
    ("extract", include_str!("../prompts/extract.txt")),
    ("judge", include_str!("../prompts/judge.txt")),
    ("repair", include_str!("../prompts/repair.txt")),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            templates: DEFAULTS
                .iter()
                .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
                .collect(),
        }
    }
}

impl PromptTemplates {
    /// Defaults with any `<name>.txt` in `dir` replacing the built-in text.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        for name in DEFAULTS.iter().map(|(k, _)| *k) {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                t.templates.insert(name.to_owned(), std::fs::read_to_string(path)?);
            }
        }
        Ok(t)
    }

    /// Version tag from the template's `# prompt: <name> <version>` header.
    pub fn version(&self, name: &str) -> Option<&str> {
        let first = self.templates.get(name)?.lines().next()?;
        first.strip_prefix("# prompt: ")?.split_whitespace().nth(1)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let template = self
            .templates
            .get(name)
            .unwrap_or_else(|| panic!("unknown prompt template {name:?}"));
        let body = match template.split_once('\n') {
            Some((header, rest)) if header.starts_with("# prompt:") => rest,
            _ => template.as_str(),
        };
        let mut out = body.to_owned();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out.trim_end().to_owned()
    }
}
