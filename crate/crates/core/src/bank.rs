//! Item banks: CSV and JSON ingestion, validation, serialization and seeded
//! synthetic generation.
//!
//! CSV layout (UTF-8, header row required, columns located by name):
//!
//! ```text
//! item_id,model,a,b,c,thresholds,group[,text]
//! it01,2PL,1.2,0.5,,,
//! g01,GRM,1.4,,,-1.0;0.0;1.0,mood
//! ```
//!
//! Inapplicable cells are left empty. `thresholds` is semicolon separated.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irt::{test_information, Item, Model, MAX_GUESSING};

/// Bank information below this value anywhere on `[-3, 3]` draws a warning.
pub const THIN_COVERAGE_INFORMATION: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown bank format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One failed validation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub rule: String,
    pub message: String,
}

impl Violation {
    fn error(item_id: Option<&str>, rule: &str, message: impl Into<String>) -> Self {
        Violation {
            severity: Severity::Error,
            item_id: item_id.map(str::to_string),
            rule: rule.to_string(),
            message: message.into(),
        }
    }

    fn warning(rule: &str, message: impl Into<String>) -> Self {
        Violation {
            severity: Severity::Warning,
            item_id: None,
            rule: rule.to_string(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.item_id {
            Some(id) => write!(f, "[{}] item {id}: {}", self.rule, self.message),
            None => write!(f, "[{}] {}", self.rule, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: u64,
        message: String,
    },
    #[error("bank failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("invalid bank spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A calibrated item pool with a single IRT model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBank {
    pub name: String,
    pub model: Model,
    #[serde(default = "default_version")]
    pub version: String,
    pub items: Vec<Item>,
}

fn default_version() -> String {
    "1".to_string()
}

impl ItemBank {
    /// Builds a bank without validating it.
    pub fn new(name: impl Into<String>, model: Model, items: Vec<Item>) -> Self {
        ItemBank {
            name: name.into(),
            model,
            version: default_version(),
            items,
        }
    }

    /// Builds a bank and rejects it if any error-level rule fails.
    pub fn validated(name: impl Into<String>, model: Model, items: Vec<Item>) -> Result<Self, BankError> {
        let bank = Self::new(name, model, items);
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<(), BankError> {
        let errors: Vec<Violation> = validate_bank(self).into_iter().filter(Violation::is_error).collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(BankError::Invalid(errors))
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.iter().find(|it| it.id == id)
    }

    /// Group label to member ids, in bank order.
    pub fn groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for it in &self.items {
            if let Some(g) = &it.group {
                out.entry(g.clone()).or_default().push(it.id.clone());
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON rendering; identifies the exact
    /// parameter set a session ran against.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("bank serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Checks every bank rule. Violations are returned as data; an empty list
/// means the bank is valid. Thin information coverage is reported as a
/// warning.
pub fn validate_bank(bank: &ItemBank) -> Vec<Violation> {
    let mut out = Vec::new();
    if bank.items.is_empty() {
        out.push(Violation::error(None, "nonempty", "bank has no items"));
        return out;
    }
    let mut seen = HashSet::new();
    for it in &bank.items {
        if !seen.insert(it.id.as_str()) {
            out.push(Violation::error(Some(&it.id), "unique_id", "duplicate item_id"));
        }
        if it.model != bank.model {
            out.push(Violation::error(
                Some(&it.id),
                "single_model",
                format!("item is {} but the bank is {}", it.model, bank.model),
            ));
        }
        for reason in it.violations() {
            let rule = if reason.contains("discrimination") {
                "discrimination"
            } else if reason.contains("guessing") {
                "guessing_bound"
            } else if reason.contains("strictly increasing") {
                "threshold_order"
            } else {
                "parameters"
            };
            out.push(Violation::error(Some(&it.id), rule, reason));
        }
        if let Some(g) = &it.group {
            if g.trim().is_empty() || g.contains(',') {
                out.push(Violation::error(
                    Some(&it.id),
                    "group_label",
                    format!("group label {g:?} must be non-empty and contain no commas"),
                ));
            }
        }
    }
    if out.iter().all(|v| !v.is_error()) {
        let thin = (0..=24)
            .map(|i| -3.0 + 0.25 * i as f64)
            .map(|t| (t, test_information(&bank.items, t)))
            .find(|(_, info)| *info < THIN_COVERAGE_INFORMATION);
        if let Some((t, info)) = thin {
            out.push(Violation::warning(
                "coverage",
                format!("bank information {info:.3} at theta {t} is below {THIN_COVERAGE_INFORMATION}"),
            ));
        }
    }
    out
}

const CSV_COLUMNS: [&str; 7] = ["item_id", "model", "a", "b", "c", "thresholds", "group"];

/// Reads and validates a bank from `source`.
pub fn load_bank<R: Read>(source: R, format: Format) -> Result<ItemBank, BankError> {
    let bank = match format {
        Format::Csv => read_csv(source)?,
        Format::Json => serde_json::from_reader(source).map_err(|e| BankError::Parse {
            line: e.line() as u64,
            column: e.column() as u64,
            message: e.to_string(),
        })?,
    };
    bank.check()?;
    Ok(bank)
}

pub fn load_bank_file(path: &std::path::Path) -> Result<ItemBank, BankError> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
        _ => Format::Json,
    };
    let mut bank = load_bank(std::fs::File::open(path)?, format)?;
    if format == Format::Csv {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            bank.name = stem.to_string();
        }
    }
    Ok(bank)
}

fn read_csv<R: Read>(source: R) -> Result<ItemBank, BankError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(&e))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(id_col), Some(model_col)) = (column("item_id"), column("model")) else {
        return Err(BankError::Parse {
            line: 1,
            column: 1,
            message: "header row must name at least item_id and model".into(),
        });
    };
    let cols = [
        Some(id_col),
        Some(model_col),
        column("a"),
        column("b"),
        column("c"),
        column("thresholds"),
        column("group"),
        column("text"),
    ];

    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| -> &str { cols[i].and_then(|c| record.get(c)).unwrap_or("") };
        let num = |i: usize| -> Result<Option<f64>, BankError> {
            let raw = cell(i);
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>().map(Some).map_err(|_| BankError::Parse {
                line,
                column: cols[i].map_or(0, |c| c as u64 + 1),
                message: format!("{}: cannot parse {raw:?} as a number", CSV_COLUMNS[i]),
            })
        };
        let model: Model = cell(1).parse().map_err(|message| BankError::Parse {
            line,
            column: model_col as u64 + 1,
            message,
        })?;
        let thresholds = if cell(5).is_empty() {
            Vec::new()
        } else {
            cell(5)
                .split(';')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| BankError::Parse {
                    line,
                    column: cols[5].map_or(0, |c| c as u64 + 1),
                    message: format!("thresholds: cannot parse {:?}", cell(5)),
                })?
        };
        let non_empty = |s: &str| (!s.is_empty()).then(|| s.to_string());
        items.push(Item {
            id: cell(0).to_string(),
            model,
            a: num(2)?.unwrap_or(1.0),
            b: num(3)?.unwrap_or(0.0),
            c: num(4)?.unwrap_or(0.0),
            thresholds,
            group: non_empty(cell(6)),
            text: non_empty(cell(7)),
        });
    }
    let model = items.first().map_or(Model::TwoPl, |it| it.model);
    Ok(ItemBank::new("bank", model, items))
}

fn csv_error(e: &csv::Error) -> BankError {
    let line = e.position().map_or(0, |p| p.line());
    BankError::Parse {
        line,
        column: 0,
        message: e.to_string(),
    }
}

/// Renders `bank` in `format`. Floats use the shortest representation that
/// parses back to the same value.
pub fn serialize_bank(bank: &ItemBank, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(bank).expect("bank serializes"),
        Format::Csv => {
            let with_text = bank.items.iter().any(|it| it.text.is_some());
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
            if with_text {
                header.push("text");
            }
            w.write_record(&header).expect("in-memory write");
            for it in &bank.items {
                let dich = it.model.is_dichotomous();
                let mut row = vec![
                    it.id.clone(),
                    it.model.to_string(),
                    it.a.to_string(),
                    if dich { it.b.to_string() } else { String::new() },
                    if it.model == Model::ThreePl { it.c.to_string() } else { String::new() },
                    it.thresholds.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
                    it.group.clone().unwrap_or_default(),
                ];
                if with_text {
                    row.push(it.text.clone().unwrap_or_default());
                }
                w.write_record(&row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
    }
}

/// Parameters for [`generate_bank`]. Distribution defaults follow common
/// operational calibrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSpec {
    pub model: Model,
    pub n_items: usize,
    pub seed: u64,
    /// Response categories per GRM item.
    pub categories: usize,
    /// Standard deviation of `ln a`.
    pub a_log_sd: f64,
    pub a_range: (f64, f64),
    pub b_sd: f64,
    pub b_range: (f64, f64),
    pub c_range: (f64, f64),
    /// Content groups assigned round-robin; empty for ungrouped banks.
    pub groups: Vec<String>,
    pub id_prefix: String,
}

impl Default for BankSpec {
    fn default() -> Self {
        BankSpec {
            model: Model::TwoPl,
            n_items: 200,
            seed: 1,
            categories: 5,
            a_log_sd: 0.25,
            a_range: (0.5, 2.5),
            b_sd: 1.0,
            b_range: (-3.0, 3.0),
            c_range: (0.05, 0.25),
            groups: Vec::new(),
            id_prefix: "item".to_string(),
        }
    }
}

impl BankSpec {
    pub fn new(model: Model, n_items: usize, seed: u64) -> Self {
        BankSpec {
            model,
            n_items,
            seed,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<(), BankError> {
        let bad = |m: &str| Err(BankError::Spec(m.to_string()));
        if self.n_items == 0 {
            return bad("n_items must be at least 1");
        }
        if self.model == Model::Grm && self.categories < 2 {
            return bad("GRM items need at least 2 categories");
        }
        if !(self.a_log_sd >= 0.0 && self.b_sd > 0.0) {
            return bad("distribution spreads must be positive");
        }
        let (alo, ahi) = self.a_range;
        if !(alo > 0.0 && alo < ahi && alo <= 1.0 && ahi >= 1.0) {
            return bad("a_range must be a positive interval containing 1");
        }
        if !(self.b_range.0 < 0.0 && self.b_range.1 > 0.0) {
            return bad("b_range must contain 0");
        }
        let (clo, chi) = self.c_range;
        if !(clo >= 0.0 && clo <= chi && chi <= MAX_GUESSING) {
            return bad("c_range must lie within [0, 0.35]");
        }
        Ok(())
    }
}

fn truncated<D: Distribution<f64>, R: Rng>(dist: &D, (lo, hi): (f64, f64), rng: &mut R) -> f64 {
    loop {
        let x = dist.sample(rng);
        if x >= lo && x <= hi {
            return x;
        }
    }
}

/// Draws a synthetic bank; identical specs give identical banks.
pub fn generate_bank(spec: &BankSpec) -> Result<ItemBank, BankError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a_dist = LogNormal::new(0.0, spec.a_log_sd.max(f64::MIN_POSITIVE)).expect("checked spread");
    let b_dist = Normal::new(0.0, spec.b_sd).expect("checked spread");
    let width = spec.n_items.to_string().len().max(3);

    let items = (0..spec.n_items)
        .map(|i| {
            let id = format!("{}{:0width$}", spec.id_prefix, i + 1);
            let a = truncated(&a_dist, spec.a_range, &mut rng);
            let b = truncated(&b_dist, spec.b_range, &mut rng);
            let mut item = match spec.model {
                Model::OnePl => Item::one_pl(id, b),
                Model::TwoPl => Item::two_pl(id, a, b),
                Model::ThreePl => {
                    let c = rng.random_range(spec.c_range.0..=spec.c_range.1);
                    Item::three_pl(id, a, b, c)
                }
                Model::Grm => {
                    let n = spec.categories - 1;
                    let thresholds = (0..n)
                        .map(|k| {
                            let offset = if n == 1 { 0.0 } else { -1.0 + 2.0 * k as f64 / (n - 1) as f64 };
                            b + offset
                        })
                        .collect();
                    Item::grm(id, a, thresholds)
                }
            };
            if !spec.groups.is_empty() {
                item.group = Some(spec.groups[i % spec.groups.len()].clone());
            }
            item
        })
        .collect();
    let name = format!("{}-{}-seed{}", spec.model, spec.n_items, spec.seed);
    ItemBank::validated(name, spec.model, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_of(items: Vec<Item>) -> ItemBank {
        let model = items[0].model;
        ItemBank::new("t", model, items)
    }

    #[test]
    fn csv_rows_map_to_items() {
        let src = "item_id,model,a,b,c,thresholds,group\nit01,2PL,1.2,0.5,,\n";
        let bank = load_bank(src.as_bytes(), Format::Csv).unwrap();
        let it = &bank.items[0];
        assert_eq!((it.id.as_str(), it.model, it.a, it.b), ("it01", Model::TwoPl, 1.2, 0.5));
        assert!(it.group.is_none());

        let src = "item_id,model,a,b,c,thresholds,group\ng1,GRM,1.1,,,-1.0;0.0;1.0,mood\n";
        let bank = load_bank(src.as_bytes(), Format::Csv).unwrap();
        assert_eq!(bank.items[0].n_categories(), 4);
        assert_eq!(bank.groups()["mood"], vec!["g1".to_string()]);
    }

    #[test]
    fn guessing_above_bound_is_rejected() {
        let src = "item_id,model,a,b,c,thresholds,group\nx,3PL,1.0,0.0,0.5,,\n";
        match load_bank(src.as_bytes(), Format::Csv) {
            Err(BankError::Invalid(v)) => {
                assert_eq!(v[0].rule, "guessing_bound");
                assert!(v[0].message.contains("0.35"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        let src = "item_id,model,a,b,c,thresholds,group\nx,2PL,1.0,0.0,,,\ny,2PL,abc,0.0,,,\n";
        match load_bank(src.as_bytes(), Format::Csv) {
            Err(BankError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        let bad_json = "{\"name\": \"x\",\n \"model\": 12}";
        assert!(matches!(
            load_bank(bad_json.as_bytes(), Format::Json),
            Err(BankError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn validation_rules_fire() {
        let valid = generate_bank(&BankSpec::new(Model::TwoPl, 10, 3)).unwrap();
        assert!(validate_bank(&valid).iter().all(|v| !v.is_error()));

        let bad = bank_of(vec![Item::grm("g", 1.0, vec![1.0, -1.0])]);
        assert!(validate_bank(&bad).iter().any(|v| v.rule == "threshold_order"));

        let dup = bank_of(vec![Item::two_pl("x", 1.0, 0.0), Item::two_pl("x", 1.0, 1.0)]);
        assert!(validate_bank(&dup).iter().any(|v| v.rule == "unique_id"));

        let empty = ItemBank::new("e", Model::TwoPl, vec![]);
        assert_eq!(validate_bank(&empty)[0].rule, "nonempty");

        let mixed = ItemBank::new("m", Model::TwoPl, vec![Item::one_pl("x", 0.0)]);
        assert!(validate_bank(&mixed).iter().any(|v| v.rule == "single_model"));
    }

    #[test]
    fn thin_bank_warns_without_failing() {
        let bank = bank_of((0..10).map(|i| Item::two_pl(format!("i{i}"), 1.0, 0.0)).collect());
        let v = validate_bank(&bank);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert!(ItemBank::validated("t", Model::TwoPl, bank.items.clone()).is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let spec = BankSpec::new(Model::TwoPl, 200, 99);
        let a = generate_bank(&spec).unwrap();
        assert_eq!(a, generate_bank(&spec).unwrap());
        assert_eq!(a.len(), 200);
        assert!(a.items.iter().all(|it| (0.5..=2.5).contains(&it.a)));
        assert!(a.items.iter().all(|it| (-3.0..=3.0).contains(&it.b)));

        let grm = generate_bank(&BankSpec::new(Model::Grm, 20, 5)).unwrap();
        assert!(grm.items.iter().all(|it| it.n_categories() == 5));
        let three = generate_bank(&BankSpec::new(Model::ThreePl, 20, 5)).unwrap();
        assert!(three.items.iter().all(|it| (0.05..=0.25).contains(&it.c)));

        assert!(generate_bank(&BankSpec::new(Model::TwoPl, 0, 1)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut spec = BankSpec::new(Model::Grm, 15, 4);
        spec.groups = vec!["x".into(), "y".into()];
        let bank = generate_bank(&spec).unwrap();
        let text = serialize_bank(&bank, Format::Csv);
        let back = load_bank(text.as_bytes(), Format::Csv).unwrap();
        assert_eq!(back.items, bank.items);
    }
}
