//! Prompt templates. Defaults are compiled in; a directory may override any
//! of the four files.

use std::path::Path;

use log::debug;

pub const INTERACTION_AGENT: &str = "interaction_agent.txt";
pub const STATIC_AGENT: &str = "static_agent.txt";
pub const FINAL_GENERATION: &str = "final_generation.txt";
pub const COLUMN_POSTPROCESS: &str = "column_postprocess.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub interaction_agent: String,
    pub static_agent: String,
    pub final_generation: String,
    pub column_postprocess: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            interaction_agent: include_str!("../prompts/interaction_agent.txt").to_string(),
            static_agent: include_str!("../prompts/static_agent.txt").to_string(),
            final_generation: include_str!("../prompts/final_generation.txt").to_string(),
            column_postprocess: include_str!("../prompts/column_postprocess.txt").to_string(),
        }
    }
}

impl Prompts {
    /// Loads templates from `dir`, falling back to the built-in text for
    /// files that are absent.
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let mut prompts = Prompts::default();
        for (file, slot) in [
            (INTERACTION_AGENT, &mut prompts.interaction_agent),
            (STATIC_AGENT, &mut prompts.static_agent),
            (FINAL_GENERATION, &mut prompts.final_generation),
            (COLUMN_POSTPROCESS, &mut prompts.column_postprocess),
        ] {
            let path = dir.join(file);
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    debug!("{} not found, using built-in template", path.display());
                }
                Err(e) => return Err(e),
            }
        }
        Ok(prompts)
    }
}

/// Substitutes `{name}` placeholders in one pass, so substituted text is
/// never rescanned. Unknown placeholders are left as they are.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
