//! Domain documents and calculation instances.
//!
//! Both corpora are stored as line-delimited JSON (`documents.jsonl`,
//! `instances.jsonl`). Loading checks every record invariant up front, so a
//! [`DocumentCollection`] or [`InstanceSet`] in hand is always internally
//! consistent and can be shared freely between threads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: document {id:?} has an empty body")]
    EmptyBody { line: usize, id: String },
    #[error("line {line}: document {id:?} uses ({case_type:?}, {subtype:?}) which is not in the declared taxonomy")]
    UndeclaredTaxonomy {
        line: usize,
        id: String,
        case_type: String,
        subtype: String,
    },
    #[error("line {line}: instance {instance:?} cites unknown document {document:?}")]
    DanglingDocumentRef {
        line: usize,
        instance: String,
        document: String,
    },
    #[error("line {line}: instance {instance:?} cites no documents")]
    NoDocumentRefs { line: usize, instance: String },
    #[error("line {line}: instance {instance:?} has malformed reference answer {value:?}")]
    MalformedAnswer {
        line: usize,
        instance: String,
        value: String,
    },
    #[error("small-set fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Legal,
    Medical,
    Other(String),
}

impl From<String> for Domain {
    fn from(s: String) -> Self {
        match s.as_str() {
            "legal" => Domain::Legal,
            "medical" => Domain::Medical,
            _ => Domain::Other(s),
        }
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> Self {
        d.to_string()
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Legal => f.write_str("legal"),
            Domain::Medical => f.write_str("medical"),
            Domain::Other(name) => f.write_str(name),
        }
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Domain::from(String::deserialize(d)?))
    }
}

/// A domain rule or article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeDocument {
    pub id: String,
    pub domain: Domain,
    pub case_type: String,
    pub subtype: String,
    pub title: String,
    pub body: String,
}

/// Declared `case_type -> {subtype}` taxonomy of a collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy(pub BTreeMap<String, BTreeSet<String>>);

impl Taxonomy {
    pub fn contains(&self, case_type: &str, subtype: &str) -> bool {
        self.0.get(case_type).is_some_and(|s| s.contains(subtype))
    }

    pub fn insert(&mut self, case_type: &str, subtype: &str) {
        self.0
            .entry(case_type.to_string())
            .or_default()
            .insert(subtype.to_string());
    }

    /// Case types and subtypes of the legal corpus.
    pub fn legal() -> Self {
        const TABLE: &[(&str, &[&str])] = &[
            (
                "Compensation",
                &[
                    "Funeral Allowance",
                    "Burial Expenses",
                    "Medical Malpractice Compensation",
                    "Work Injury Benefits",
                    "Work-related Death Funeral Allowance",
                    "Death Compensation",
                    "Disability Compensation",
                    "Economic Compensation",
                    "Lost Wages",
                    "Compensation",
                    "Compensation Payment",
                    "Non-work-related Death Funeral Allowance and Consolation Payments",
                ],
            ),
            (
                "Tax",
                &[
                    "Personal Income Tax",
                    "Taxable Income for Personal Income Tax",
                    "Urban Maintenance and Construction Tax",
                    "Stamp Tax",
                    "Assessed Taxable Price of Taxable Vehicles",
                    "Tobacco Leaf Tax",
                    "Environmental Protection Tax",
                    "Tax Arrears Penalty",
                    "Cultivated Land Occupation Tax",
                    "Vehicle Purchase Tax",
                    "Interest on Debt During the Period of Delayed Performance",
                ],
            ),
            (
                "Other Fees",
                &[
                    "Unemployment Insurance Premium",
                    "Deposit",
                    "Trade Union Funds",
                    "Nursing Expenses",
                    "Application Fee",
                    "Dependent's Living Expenses",
                    "Litigation Costs",
                    "Preparation Fees",
                ],
            ),
            ("Penalties", &["Penalties"]),
            ("Traffic Violations", &["Traffic Violations"]),
        ];
        let mut t = Taxonomy::default();
        for (case_type, subtypes) in TABLE {
            for s in *subtypes {
                t.insert(case_type, s);
            }
        }
        t
    }
}

/// Ordered documents keyed by id.
#[derive(Debug, Clone, Default)]
pub struct DocumentCollection {
    docs: Vec<KnowledgeDocument>,
    by_id: HashMap<String, usize>,
    taxonomy: Taxonomy,
}

impl DocumentCollection {
    /// Builds a collection from in-memory documents, deriving the taxonomy.
    pub fn from_documents(docs: Vec<KnowledgeDocument>) -> Result<Self, StoreError> {
        let mut c = DocumentCollection::default();
        for (i, d) in docs.into_iter().enumerate() {
            c.push(i + 1, d, None)?;
        }
        Ok(c)
    }

    fn push(
        &mut self,
        line: usize,
        doc: KnowledgeDocument,
        declared: Option<&Taxonomy>,
    ) -> Result<(), StoreError> {
        if self.by_id.contains_key(&doc.id) {
            return Err(StoreError::DuplicateId { line, id: doc.id });
        }
        if doc.body.trim().is_empty() {
            return Err(StoreError::EmptyBody { line, id: doc.id });
        }
        match declared {
            Some(t) if !t.contains(&doc.case_type, &doc.subtype) => {
                return Err(StoreError::UndeclaredTaxonomy {
                    line,
                    id: doc.id,
                    case_type: doc.case_type,
                    subtype: doc.subtype,
                })
            }
            _ => self.taxonomy.insert(&doc.case_type, &doc.subtype),
        }
        self.by_id.insert(doc.id.clone(), self.docs.len());
        self.docs.push(doc);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeDocument> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeDocument> {
        self.docs.iter()
    }

    pub fn documents(&self) -> &[KnowledgeDocument] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Taxonomy actually used by the loaded documents.
    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    /// Canonical `documents.jsonl` rendering.
    pub fn to_jsonl(&self) -> String {
        jsonl::render(&self.docs).expect("documents serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    SmallTrain,
    Test,
}

impl Split {
    /// `small_train` instances are also part of the training pool.
    pub fn is_train(self) -> bool {
        matches!(self, Split::Train | Split::SmallTrain)
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "small_train" => Ok(Split::SmallTrain),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A query with its gold reasoning and single numeric answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CalculationInstance {
    pub id: String,
    pub query: String,
    pub reference_response: String,
    #[serde(serialize_with = "serialize_answer")]
    pub reference_answer: Decimal,
    pub unit: String,
    pub document_ids: Vec<String>,
    pub case_type: String,
    pub split: Split,
}

impl CalculationInstance {
    /// The document the pipeline answers from.
    pub fn primary_document(&self) -> &str {
        &self.document_ids[0]
    }
}

fn serialize_answer<S: serde::Serializer>(d: &Decimal, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&d.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: String,
    query: String,
    reference_response: String,
    reference_answer: String,
    unit: String,
    document_ids: Vec<String>,
    case_type: String,
    split: Split,
}

fn answer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^-?[0-9]+(\.[0-9]{1,4})?$").unwrap())
}

/// Parses a reference answer in the corpus decimal format.
pub fn parse_answer(text: &str) -> Option<Decimal> {
    if !answer_pattern().is_match(text) {
        return None;
    }
    Decimal::from_str(text).ok()
}

/// Instances in file order, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct InstanceSet {
    items: Vec<CalculationInstance>,
    by_id: HashMap<String, usize>,
}

impl InstanceSet {
    /// Builds a set from in-memory instances, checking them against `collection`.
    pub fn from_instances(
        items: Vec<CalculationInstance>,
        collection: &DocumentCollection,
    ) -> Result<Self, StoreError> {
        let mut set = InstanceSet::default();
        for (i, inst) in items.into_iter().enumerate() {
            set.push(i + 1, inst, collection)?;
        }
        Ok(set)
    }

    fn push(
        &mut self,
        line: usize,
        inst: CalculationInstance,
        collection: &DocumentCollection,
    ) -> Result<(), StoreError> {
        if self.by_id.contains_key(&inst.id) {
            return Err(StoreError::DuplicateId { line, id: inst.id });
        }
        if inst.document_ids.is_empty() {
            return Err(StoreError::NoDocumentRefs {
                line,
                instance: inst.id,
            });
        }
        if let Some(missing) = inst
            .document_ids
            .iter()
            .find(|d| collection.get(d).is_none())
        {
            return Err(StoreError::DanglingDocumentRef {
                line,
                instance: inst.id.clone(),
                document: missing.clone(),
            });
        }
        self.by_id.insert(inst.id.clone(), self.items.len());
        self.items.push(inst);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&CalculationInstance> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &CalculationInstance> {
        self.items.iter()
    }

    pub fn instances(&self) -> &[CalculationInstance] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Instances whose primary document is `document_id`.
    pub fn for_document<'a>(
        &'a self,
        document_id: &str,
    ) -> impl Iterator<Item = &'a CalculationInstance> + 'a {
        let document_id = document_id.to_string();
        self.items
            .iter()
            .filter(move |i| i.primary_document() == document_id)
    }

    /// Number of instances per case type.
    pub fn counts_by_case_type(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for i in &self.items {
            *out.entry(i.case_type.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Canonical `instances.jsonl` rendering.
    pub fn to_jsonl(&self) -> String {
        jsonl::render(&self.items).expect("instances serialize")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_documents(path: &Path) -> Result<DocumentCollection, StoreError> {
    load_documents_with(path, None)
}

/// Loads documents, optionally requiring every (case_type, subtype) pair to
/// appear in `declared`.
pub fn load_documents_with(
    path: &Path,
    declared: Option<&Taxonomy>,
) -> Result<DocumentCollection, StoreError> {
    let records = jsonl::read_records(path).map_err(io_err(path))?;
    parse_documents(&records, declared)
}

pub fn parse_documents(
    records: &[(usize, String)],
    declared: Option<&Taxonomy>,
) -> Result<DocumentCollection, StoreError> {
    let mut c = DocumentCollection::default();
    for (line, text) in records {
        let doc: KnowledgeDocument =
            serde_json::from_str(text).map_err(|e| StoreError::Parse {
                line: *line,
                message: e.to_string(),
            })?;
        c.push(*line, doc, declared)?;
    }
    Ok(c)
}

pub fn load_instances(
    path: &Path,
    collection: &DocumentCollection,
) -> Result<InstanceSet, StoreError> {
    let records = jsonl::read_records(path).map_err(io_err(path))?;
    parse_instances(&records, collection)
}

pub fn parse_instances(
    records: &[(usize, String)],
    collection: &DocumentCollection,
) -> Result<InstanceSet, StoreError> {
    let mut set = InstanceSet::default();
    for (line, text) in records {
        let line = *line;
        let rec: InstanceRecord = serde_json::from_str(text).map_err(|e| StoreError::Parse {
            line,
            message: e.to_string(),
        })?;
        let Some(answer) = parse_answer(&rec.reference_answer) else {
            return Err(StoreError::MalformedAnswer {
                line,
                instance: rec.id,
                value: rec.reference_answer,
            });
        };
        let inst = CalculationInstance {
            id: rec.id,
            query: rec.query,
            reference_response: rec.reference_response,
            reference_answer: answer,
            unit: rec.unit,
            document_ids: rec.document_ids,
            case_type: rec.case_type,
            split: rec.split,
        };
        set.push(line, inst, collection)?;
    }
    Ok(set)
}

/// Assigns a stratified `small_train` subset of the training pool.
///
/// Test instances are untouched. Each case type receives a quota by largest
/// remainder so the total equals `round(pool * small_fraction)`, raised to
/// one for every non-empty case type. Members are drawn by a seeded shuffle.
pub fn split_instances(
    set: &InstanceSet,
    small_fraction: f64,
    seed: u64,
) -> Result<InstanceSet, StoreError> {
    if !(small_fraction > 0.0 && small_fraction < 1.0) {
        return Err(StoreError::InvalidFraction(small_fraction));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in set.items.iter().enumerate() {
        if inst.split.is_train() {
            groups.entry(inst.case_type.as_str()).or_default().push(i);
        }
    }
    let pool: usize = groups.values().map(Vec::len).sum();
    let quotas = stratified_quotas(
        &groups.values().map(Vec::len).collect::<Vec<_>>(),
        pool,
        small_fraction,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    for (members, quota) in groups.values().zip(quotas) {
        let mut ids: Vec<usize> = members.clone();
        ids.sort_by(|a, b| set.items[*a].id.cmp(&set.items[*b].id));
        ids.shuffle(&mut rng);
        for (rank, idx) in ids.into_iter().enumerate() {
            out.items[idx].split = if rank < quota {
                Split::SmallTrain
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

fn stratified_quotas(sizes: &[usize], pool: usize, fraction: f64) -> Vec<usize> {
    let target = (pool as f64 * fraction).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut quotas: Vec<usize> = sizes
        .iter()
        .zip(&exact)
        .map(|(&n, &e)| if n == 0 { 0 } else { (e.floor() as usize).clamp(1, n) })
        .collect();
    let mut assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Largest fractional remainder first; ties go to the earlier case type.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        if quotas[i] < sizes[i] && (quotas[i] as f64) < exact[i].ceil() {
            quotas[i] += 1;
            assigned += 1;
        }
    }
    quotas
}
