use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

use implicit_align::data::{load_dataset, Dataset, HiddenLabels};

/// Hidden labels: a `label` header then one class index per line.
pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut s = String::from("label\n");
    for y in labels {
        s.push_str(&y.to_string());
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn load_labels(path: &Path) -> Result<HiddenLabels> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("label") {
        bail!("{}: expected a `label` header", path.display());
    }
    let labels = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .with_context(|| format!("{} row {}: bad label {l:?}", path.display(), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenLabels::new(labels))
}

/// Class count from the largest label in a labeled CSV.
pub fn infer_classes(path: &Path) -> Result<usize> {
    // load with a generous bound, then shrink to the labels present
    let ds = load_dataset(path, usize::MAX / 2)?;
    let max = ds
        .labels()
        .iter()
        .flatten()
        .max()
        .ok_or_else(|| anyhow!("{} has no labels; pass --classes", path.display()))?;
    Ok(max + 1)
}

pub fn load(path: &Path, num_classes: usize) -> Result<Dataset> {
    load_dataset(path, num_classes).with_context(|| format!("loading {}", path.display()))
}

pub fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("expected `x,y`, got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("bad list item {x:?}: {e}")))
        .collect()
}

/// A snake_case enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| anyhow!("unknown {what} {s:?}"))
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        save_labels(&[2, 0, 1], &p).unwrap();
        assert_eq!(load_labels(&p).unwrap().as_slice(), &[2, 0, 1]);
        fs::write(&p, "label\n1\nx\n").unwrap();
        assert!(load_labels(&p).is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("steps=10").unwrap(), ("steps".into(), json!(10)));
        assert_eq!(parse_assignment("sampler=random").unwrap(), ("sampler".into(), json!("random")));
        assert_eq!(parse_assignment("model.hidden=[4,4]").unwrap().1, json!([4, 4]));
        assert!(parse_assignment("steps").is_err());
        assert_eq!(parse_list::<u64>("0,1, 2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_pair("-1.5,2").unwrap(), (-1.5, 2.0));
    }
}
