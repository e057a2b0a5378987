//! Tables and the files a run writes. Nothing time-dependent goes into any artifact.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    F(f64),
    U(u64),
    B(bool),
    S(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}
impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::U(x)
    }
}
impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::U(x as u64)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::U(x as u64)
    }
}
impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::B(x)
    }
}
impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::S(x.to_string())
    }
}

/// Shortest round-trip decimal in the usual range, scientific outside it.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::F(x) => fmt_f64(*x),
            Cell::U(x) => x.to_string(),
            Cell::B(b) => b.to_string(),
            Cell::S(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(x) => Value::from(*x),
            Cell::U(x) => Value::from(*x),
            Cell::B(b) => Value::from(*b),
            Cell::S(s) => Value::from(s.as_str()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the header");
        self.rows.push(row);
    }

    fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| Value::Object(self.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.json())).collect()))
                .collect(),
        )
    }
}

/// Everything a command produces: named tables plus a free-form summary.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub tables: Vec<(&'static str, Table)>,
    pub summary: Map<String, Value>,
}

/// Writes `<table>.csv` per table, `<command>.json` and `run.json` into `dir`.
/// Every CSV row ends with the config hash and seed.
pub fn write_report(dir: &Path, command: &str, hash: &str, seed: u64, config: &Value, report: &Report) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut tables = Map::new();
    for (name, table) in &report.tables {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header: Vec<&str> = table.columns.clone();
        header.extend(["config_hash", "seed"]);
        w.write_record(&header)?;
        let seed_s = seed.to_string();
        for row in &table.rows {
            let mut rec: Vec<String> = row.iter().map(Cell::csv).collect();
            rec.push(hash.to_string());
            rec.push(seed_s.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
        tables.insert(name.to_string(), table.to_json());
    }
    let body = json!({
        "command": command,
        "config_hash": hash,
        "seed": seed,
        "summary": Value::Object(report.summary.clone()),
        "tables": Value::Object(tables),
    });
    let path = dir.join(format!("{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    written.push(path);
    let run = json!({ "command": command, "config_hash": hash, "seed": seed, "config": config });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run)? + "\n")?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.4, 31.789, 1e-12, -2.5e20, 0.0, 123456.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(0.4), "0.4");
        assert_eq!(fmt_f64(1e-12), "1e-12");
    }

    #[test]
    fn report_files_carry_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["n", "cap"]);
        t.push(vec![2u32.into(), 0.4.into()]);
        let rep = Report { tables: vec![("exact", t)], summary: Map::new() };
        write_report(dir.path(), "exact", "abc", 9, &json!({}), &rep).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("exact.csv")).unwrap();
        assert_eq!(csv, "n,cap,config_hash,seed\n2,0.4,abc,9\n");
        let js: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("exact.json")).unwrap()).unwrap();
        assert_eq!(js["tables"]["exact"][0]["cap"], 0.4);
        assert_eq!(js["seed"], 9);
    }
}
