use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{Map, Value};

use crate::config::usage;

struct Run {
    name: String,
    summary: Map<String, Value>,
}

fn read_run(dir: &Path) -> Result<Option<Run>> {
    let path = dir.join("summary.json");
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary = match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(m) => m,
        _ => anyhow::bail!("{} is not a JSON object", path.display()),
    };
    Ok(Some(Run {
        name: dir.display().to_string(),
        summary,
    }))
}

/// Each argument is a run directory or a directory whose immediate
/// subdirectories are runs, visited in name order.
fn collect(dirs: &[PathBuf]) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(usage(format!("{} is not a directory", dir.display())));
        }
        if let Some(run) = read_run(dir)? {
            runs.push(run);
            continue;
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            runs.extend(read_run(&sub)?);
        }
    }
    Ok(runs)
}

fn fmt_number(v: &Value) -> String {
    match (v.as_u64(), v.as_i64(), v.as_f64()) {
        (Some(u), _, _) => u.to_string(),
        (_, Some(i), _) => i.to_string(),
        (_, _, Some(f)) if f != 0.0 && (f.abs() < 1e-3 || f.abs() >= 1e5) => format!("{f:.3e}"),
        (_, _, Some(f)) => format!("{f:.4}"),
        _ => String::new(),
    }
}

/// One row per run, one column per numeric summary entry found in any run.
fn render(runs: &[Run]) -> String {
    let keys: BTreeSet<&str> = runs
        .iter()
        .flat_map(|r| r.summary.iter())
        .filter(|(k, v)| v.is_number() && k.as_str() != "seed")
        .map(|(k, _)| k.as_str())
        .collect();
    let text = |r: &Run, key: &str| r.summary.get(key).and_then(Value::as_str).unwrap_or("").to_string();
    let mut out = format!("# Run comparison\n\n{} run(s)\n\n", runs.len());
    let mut header = vec!["run", "variant", "seed", "config_hash"];
    header.extend(keys.iter().copied());
    out += &format!("| {} |\n", header.join(" | "));
    out += &format!("|{}\n", "---|".repeat(header.len()));
    for r in runs {
        let mut cells = vec![
            r.name.clone(),
            text(r, "variant"),
            r.summary.get("seed").map(fmt_number).unwrap_or_default(),
            text(r, "config_hash"),
        ];
        cells.extend(keys.iter().map(|k| r.summary.get(*k).map(fmt_number).unwrap_or_default()));
        out += &format!("| {} |\n", cells.join(" | "));
    }
    out
}

pub fn run(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let runs = collect(dirs)?;
    if runs.is_empty() {
        return Err(usage("no runs found: expected summary.json in the given directories or their subdirectories"));
    }
    let text = render(&runs);
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn run(name: &str, v: Value) -> Run {
        Run {
            name: name.into(),
            summary: v.as_object().unwrap().clone(),
        }
    }

    #[test]
    fn table_has_union_of_numeric_keys() {
        let a = run("a", json!({"variant": "dfa_ent", "seed": 1, "target_accuracy": 0.9, "x": [1]}));
        let b = run("b", json!({"variant": "source_only", "seed": 1, "source_accuracy": 1.0}));
        let md = render(&[a, b]);
        assert!(md.contains("| run | variant | seed | config_hash | source_accuracy | target_accuracy |"));
        assert!(md.contains("| a | dfa_ent | 1 |  |  | 0.9000 |"));
        assert!(md.contains("| b | source_only | 1 |  | 1.0000 |  |"));
    }

    #[test]
    fn small_and_large_values_use_exponents() {
        assert_eq!(fmt_number(&json!(1.5e-6)), "1.500e-6");
        assert_eq!(fmt_number(&json!(0.0)), "0.0000");
        assert_eq!(fmt_number(&json!(12)), "12");
    }
}
