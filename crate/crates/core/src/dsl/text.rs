//! Text transforms applied to training code before prompting and to
//! generated code before compiling.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::diagnostic::{Code, Diagnostic};

pub const MAP_PATH_PREFIX: &str = "Scenic/tests/formats/opendrive/maps/CARLA/";

#[derive(Debug, Deserialize)]
pub struct AssetTable {
    pub known: Vec<String>,
    pub vehicle_aliases: BTreeMap<String, String>,
    pub model_aliases: BTreeMap<String, String>,
}

impl AssetTable {
    pub fn is_known(&self, blueprint: &str) -> bool {
        self.known.iter().any(|k| k == blueprint)
    }
}

pub fn assets() -> &'static AssetTable {
    static TABLE: OnceLock<AssetTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        toml::from_str(include_str!("../../../../data/assets.toml")).expect("bundled asset table is valid")
    })
}

/// `param map = localPath('.../<name>.xodr')` for a CARLA map name.
pub fn map_line(carla_map: &str) -> String {
    format!("param map = localPath('{MAP_PATH_PREFIX}{carla_map}.xodr')")
}

/// Byte offset of a `#` that starts a comment, ignoring `#` inside strings.
fn comment_start(line: &str) -> Option<usize> {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
        } else if c == '"' || c == '\'' {
            quote = Some(c);
        } else if c == '#' {
            return Some(i);
        }
    }
    None
}

fn is_map_line(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("param map") && t.contains("localPath(") && {
        let rest = t["param map".len()..].trim_start();
        rest.starts_with('=')
    }
}

/// Splits off a leading triple-quoted docstring. Returns (docstring body, rest).
pub fn split_docstring(code: &str) -> (Option<&str>, &str) {
    let trimmed = code.trim_start();
    for delim in ["\"\"\"", "'''"] {
        if let Some(after) = trimmed.strip_prefix(delim) {
            if let Some(end) = after.find(delim) {
                let body = &after[..end];
                let rest = &after[end + delim.len()..];
                let rest = rest.strip_prefix('\n').or_else(|| rest.strip_prefix("\r\n")).unwrap_or(rest);
                return (Some(body), rest);
            }
        }
    }
    (None, code)
}

/// The English description carried by a program's leading docstring.
pub fn extract_description(code: &str) -> Option<String> {
    split_docstring(code).0.map(|d| d.trim().to_string())
}

fn apply_aliases(line: &str) -> String {
    let table = assets();
    let mut out = line.to_string();
    for (from, to) in &table.vehicle_aliases {
        for q in ['\'', '"'] {
            out = out.replace(&format!("{q}{from}{q}"), &format!("{q}{to}{q}"));
        }
    }
    let t = out.trim();
    if let Some(path) = t.strip_prefix("model ") {
        if let Some(to) = table.model_aliases.get(path.trim()) {
            let indent = &out[..out.len() - out.trim_start().len()];
            out = format!("{indent}model {to}");
        }
    }
    out
}

/// Removes the docstring, comments, blank lines, trailing whitespace and the
/// map-filename line, and rewrites stale asset and model names.
pub fn preprocess_training(code: &str) -> String {
    let (_, body) = split_docstring(code);
    let mut lines = Vec::new();
    for raw in body.lines() {
        let line = match comment_start(raw) {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim_end();
        if line.trim().is_empty() || is_map_line(line) {
            continue;
        }
        lines.push(apply_aliases(line));
    }
    let mut out = lines.join("\n");
    if !out.is_empty() && code.ends_with('\n') {
        out.push('\n');
    }
    out
}

/// Value of the `param carla_map = '<Name>'` line, with its line index.
pub fn find_carla_map(code: &str) -> Option<(usize, String)> {
    for (i, line) in code.lines().enumerate() {
        let t = line.trim();
        let Some(rest) = t.strip_prefix("param carla_map") else { continue };
        let Some(rest) = rest.trim_start().strip_prefix('=') else { continue };
        let rest = rest.trim();
        let rest = match comment_start(rest) {
            Some(c) => rest[..c].trim_end(),
            None => rest,
        };
        for q in ['\'', '"'] {
            if let Some(inner) = rest.strip_prefix(q).and_then(|r| r.strip_suffix(q)) {
                return Some((i, inner.to_string()));
            }
        }
    }
    None
}

/// Adds the description as a docstring and reconstructs the map-filename line
/// immediately before the `carla_map` line.
pub fn postprocess_generated(code: &str, description: &str) -> Result<String, Diagnostic> {
    let (_, body) = split_docstring(code);
    let lines: Vec<&str> = body.lines().filter(|l| !is_map_line(l)).collect();
    let filtered = lines.join("\n");
    let Some((idx, name)) = find_carla_map(&filtered) else {
        return Err(Diagnostic::error(
            Code::MissingMapName,
            "the program must set the map with a line like param carla_map = 'Town05'",
            None,
        ));
    };
    let mut out = format!("\"\"\"\n{}\n\"\"\"\n", description.trim());
    for (i, line) in lines.iter().enumerate() {
        if i == idx {
            out.push_str(&map_line(&name));
            out.push('\n');
        }
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_comment_is_removed() {
        let src = "param SAFETY_DIST = VerifaiRange(15, 25)  # Increased safety distance";
        assert_eq!(preprocess_training(src), "param SAFETY_DIST = VerifaiRange(15, 25)");
    }

    #[test]
    fn clean_text_is_a_fixed_point() {
        let src = "param carla_map = 'Town05'\nMODEL = 'vehicle.lincoln.mkz_2017'\n";
        assert_eq!(preprocess_training(src), src);
    }

    #[test]
    fn map_line_is_removed() {
        let src = "param map = localPath('Scenic/tests/formats/opendrive/maps/CARLA/Town05.xodr')\nparam carla_map = 'Town05'";
        assert_eq!(preprocess_training(src), "param carla_map = 'Town05'");
    }

    #[test]
    fn hash_inside_string_is_kept() {
        let src = "x = 'a#b'  # note";
        assert_eq!(preprocess_training(src), "x = 'a#b'");
    }

    #[test]
    fn aliases_are_rewritten() {
        let src = "MODEL = 'vehicle.lincoln.mkz2017'\nmodel scenic.simulators.carla.models.model";
        assert_eq!(
            preprocess_training(src),
            "MODEL = 'vehicle.lincoln.mkz_2017'\nmodel scenic.simulators.carla.model"
        );
    }

    #[test]
    fn docstring_is_stripped_and_extracted() {
        let src = "\"\"\"\nA car turns.\n\"\"\"\nparam carla_map = 'Town05'\n";
        assert_eq!(extract_description(src).as_deref(), Some("A car turns."));
        assert_eq!(preprocess_training(src), "param carla_map = 'Town05'\n");
    }

    #[test]
    fn postprocess_inserts_docstring_and_map_line() {
        let out = postprocess_generated("x = 1\nparam carla_map = 'Town05'\ny = 2", "A car turns.").unwrap();
        assert_eq!(
            out,
            "\"\"\"\nA car turns.\n\"\"\"\nx = 1\nparam map = localPath('Scenic/tests/formats/opendrive/maps/CARLA/Town05.xodr')\nparam carla_map = 'Town05'\ny = 2\n"
        );
    }

    #[test]
    fn postprocess_requires_carla_map() {
        let err = postprocess_generated("x = 1\n", "d").unwrap_err();
        assert_eq!(err.code, Code::MissingMapName);
    }

    #[test]
    fn postprocess_replaces_existing_map_line() {
        let out = postprocess_generated(
            "param map = localPath('elsewhere.xodr')\nparam carla_map = 'Town04'\n",
            "d",
        )
        .unwrap();
        assert_eq!(out.matches("localPath").count(), 1);
        assert!(out.contains("CARLA/Town04.xodr"));
    }
}
