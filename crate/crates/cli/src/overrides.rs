//! `--set path.to.key=value` overrides applied to the TOML config before it
//! is parsed, so every field can be changed from the command line.

use anyhow::{anyhow, bail, Context, Result};
use toml::{Table, Value};

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> Value {
    let doc = format!("v = {value}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(value.to_string()),
    }
}

pub fn apply(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key segment");
    }
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry((*k).to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {assignment:?}: {k} is not a section"))?;
    }
    cur.insert((*last).to_string(), literal(value.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_keys_and_literals() {
        let mut t = Table::new();
        apply(&mut t, "trainer.k_window=5").unwrap();
        apply(&mut t, "trainer.weights.triplet=0.25").unwrap();
        apply(&mut t, "losses=ce,ad").unwrap();
        apply(&mut t, "trainer.reward_model.hidden_widths=[8, 8]").unwrap();
        assert_eq!(t["trainer"]["k_window"].as_integer(), Some(5));
        assert_eq!(t["trainer"]["weights"]["triplet"].as_float(), Some(0.25));
        assert_eq!(t["losses"].as_str(), Some("ce,ad"));
        assert_eq!(t["trainer"]["reward_model"]["hidden_widths"].as_array().unwrap().len(), 2);
        assert!(apply(&mut t, "novalue").is_err());
        assert!(apply(&mut t, "losses.x=1").is_err());
    }
}
