//! Persona compilation: Big Five facet settings plus identity metadata are
//! turned into a deterministic system prompt using an editable descriptor
//! table.
//!
//! Descriptor table format, one entry per line:
//!
//! ```text
//! @version default-1
//! extraversion.dominance.high = You take charge of the discussion ...
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Facets are kept in
//! order of first appearance and compiled prompts list them in that order.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The shipped descriptor table.
pub const DEFAULT_DESCRIPTOR_TABLE: &str = include_str!("../data/descriptors.txt");

pub const DEFAULT_MAX_PROMPT_CHARS: usize = 12_000;

const TABLE_PREAMBLE: &str = "# Persona descriptor table.\n\
# Each entry: <trait>.<facet>.<level> = <descriptor>\n\
# Levels are low, medium and high; every facet needs all three.\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BigFive {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl BigFive {
    pub fn as_str(self) -> &'static str {
        match self {
            BigFive::Openness => "openness",
            BigFive::Conscientiousness => "conscientiousness",
            BigFive::Extraversion => "extraversion",
            BigFive::Agreeableness => "agreeableness",
            BigFive::Neuroticism => "neuroticism",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "openness" => BigFive::Openness,
            "conscientiousness" => BigFive::Conscientiousness,
            "extraversion" => BigFive::Extraversion,
            "agreeableness" => BigFive::Agreeableness,
            "neuroticism" => BigFive::Neuroticism,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "low" => Level::Low,
            "medium" => Level::Medium,
            "high" => Level::High,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FacetKey {
    #[serde(rename = "trait")]
    pub domain: BigFive,
    pub facet: String,
}

impl fmt::Display for FacetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain.as_str(), self.facet)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetSetting {
    #[serde(rename = "trait")]
    pub domain: BigFive,
    pub facet: String,
    pub level: Level,
}

impl FacetSetting {
    pub fn new(domain: BigFive, facet: impl Into<String>, level: Level) -> Self {
        Self {
            domain,
            facet: facet.into(),
            level,
        }
    }

    pub fn key(&self) -> FacetKey {
        FacetKey {
            domain: self.domain,
            facet: self.facet.clone(),
        }
    }
}

/// Reference to an uploaded task document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRef {
    pub document_id: String,
    pub name: String,
    /// Hex SHA-256 of the document bytes.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub name: String,
    #[serde(default)]
    pub role_description: String,
    #[serde(default)]
    pub facets: Vec<FacetSetting>,
    #[serde(default)]
    pub context_documents: Vec<DocumentRef>,
    #[serde(default)]
    pub behavioral_rules: Vec<String>,
    /// Descriptor table version the spec was authored against, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_version: Option<String>,
}

impl PersonaSpec {
    pub fn neutral(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role_description: String::new(),
            facets: Vec::new(),
            context_documents: Vec::new(),
            behavioral_rules: Vec::new(),
            table_version: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum TableFinding {
    Syntax { line: usize, message: String },
    UnknownTrait { line: usize, name: String },
    UnknownLevel { line: usize, name: String },
    DuplicateKey { line: usize, key: String },
    EmptyDescriptor { line: usize, key: String },
    MissingLevel { facet: String, level: Level },
    MissingVersion,
}

impl fmt::Display for TableFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableFinding::Syntax { line, message } => write!(f, "line {line}: {message}"),
            TableFinding::UnknownTrait { line, name } => write!(f, "line {line}: unknown trait `{name}`"),
            TableFinding::UnknownLevel { line, name } => write!(f, "line {line}: unknown level `{name}`"),
            TableFinding::DuplicateKey { line, key } => write!(f, "line {line}: duplicate key `{key}`"),
            TableFinding::EmptyDescriptor { line, key } => write!(f, "line {line}: empty descriptor for `{key}`"),
            TableFinding::MissingLevel { facet, level } => {
                write!(f, "facet `{facet}` is missing level `{}`", level.as_str())
            }
            TableFinding::MissingVersion => write!(f, "missing @version line"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid descriptor table: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct TableError(pub Vec<TableFinding>);

/// Validated mapping from (trait, facet, level) to descriptor text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorTable {
    version: String,
    facets: Vec<FacetKey>,
    entries: HashMap<(FacetKey, Level), String>,
}

impl DescriptorTable {
    pub fn parse(document: &str) -> Result<Self, TableError> {
        let mut findings = Vec::new();
        let mut version = None;
        let mut facets: Vec<FacetKey> = Vec::new();
        let mut entries = HashMap::new();
        for (i, raw) in document.lines().enumerate() {
            let line = i + 1;
            let text = raw.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            if let Some(v) = text.strip_prefix("@version") {
                let v = v.trim();
                if v.is_empty() {
                    findings.push(TableFinding::Syntax {
                        line,
                        message: "empty version".into(),
                    });
                } else if version.replace(v.to_string()).is_some() {
                    findings.push(TableFinding::DuplicateKey {
                        line,
                        key: "@version".into(),
                    });
                }
                continue;
            }
            let Some((key, value)) = text.split_once('=') else {
                findings.push(TableFinding::Syntax {
                    line,
                    message: "expected `key = descriptor`".into(),
                });
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let parts: Vec<&str> = key.split('.').collect();
            let [domain, facet, level] = parts[..] else {
                findings.push(TableFinding::Syntax {
                    line,
                    message: format!("key `{key}` is not trait.facet.level"),
                });
                continue;
            };
            let Some(domain) = BigFive::parse(domain) else {
                findings.push(TableFinding::UnknownTrait {
                    line,
                    name: domain.into(),
                });
                continue;
            };
            let Some(level) = Level::parse(level) else {
                findings.push(TableFinding::UnknownLevel {
                    line,
                    name: level.into(),
                });
                continue;
            };
            if facet.is_empty() || !facet.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                findings.push(TableFinding::Syntax {
                    line,
                    message: format!("bad facet name `{facet}`"),
                });
                continue;
            }
            if value.is_empty() {
                findings.push(TableFinding::EmptyDescriptor { line, key: key.into() });
                continue;
            }
            let fk = FacetKey {
                domain,
                facet: facet.into(),
            };
            if entries.contains_key(&(fk.clone(), level)) {
                findings.push(TableFinding::DuplicateKey { line, key: key.into() });
                continue;
            }
            if !facets.contains(&fk) {
                facets.push(fk.clone());
            }
            entries.insert((fk, level), value.to_string());
        }
        for fk in &facets {
            for level in Level::ALL {
                let empty_seen = findings.iter().any(|f| {
                    matches!(f, TableFinding::EmptyDescriptor { key, .. } if *key == format!("{fk}.{}", level.as_str()))
                });
                if !entries.contains_key(&(fk.clone(), level)) && !empty_seen {
                    findings.push(TableFinding::MissingLevel {
                        facet: fk.to_string(),
                        level,
                    });
                }
            }
        }
        if version.is_none() {
            findings.push(TableFinding::MissingVersion);
        }
        if !findings.is_empty() {
            return Err(TableError(findings));
        }
        Ok(Self {
            version: version.unwrap_or_default(),
            facets,
            entries,
        })
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_DESCRIPTOR_TABLE).expect("shipped descriptor table is valid")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn facets(&self) -> &[FacetKey] {
        &self.facets
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptor(&self, key: &FacetKey, level: Level) -> Option<&str> {
        self.entries.get(&(key.clone(), level)).map(String::as_str)
    }

    /// Canonical text form: preamble, version, then facets in table order
    /// with levels low, medium, high.
    pub fn serialize(&self) -> String {
        let mut out = String::from(TABLE_PREAMBLE);
        out.push_str(&format!("@version {}\n", self.version));
        for fk in &self.facets {
            for level in Level::ALL {
                out.push_str(&format!(
                    "{fk}.{} = {}\n",
                    level.as_str(),
                    self.entries[&(fk.clone(), level)]
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum PersonaFinding {
    EmptyName,
    UnknownFacet { facet: String },
    DuplicateFacet { facet: String },
    EmptyRule { index: usize },
    StaleTableVersion { expected: String, found: String },
}

impl fmt::Display for PersonaFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PersonaFinding::EmptyName => write!(f, "persona name is empty"),
            PersonaFinding::UnknownFacet { facet } => write!(f, "unknown facet `{facet}`"),
            PersonaFinding::DuplicateFacet { facet } => write!(f, "facet `{facet}` set more than once"),
            PersonaFinding::EmptyRule { index } => write!(f, "behavioral rule {index} is empty"),
            PersonaFinding::StaleTableVersion { expected, found } => {
                write!(f, "persona targets table version `{found}`, current is `{expected}`")
            }
        }
    }
}

/// Findings for `spec` against `table`; empty means valid.
pub fn validate_persona(spec: &PersonaSpec, table: &DescriptorTable) -> Vec<PersonaFinding> {
    let mut findings = Vec::new();
    if spec.name.trim().is_empty() {
        findings.push(PersonaFinding::EmptyName);
    }
    if let Some(found) = &spec.table_version {
        if found != table.version() {
            findings.push(PersonaFinding::StaleTableVersion {
                expected: table.version().into(),
                found: found.clone(),
            });
        }
    }
    let mut seen = HashSet::new();
    for setting in &spec.facets {
        let key = setting.key();
        if !table.facets.contains(&key) {
            findings.push(PersonaFinding::UnknownFacet { facet: key.to_string() });
        } else if !seen.insert(key.clone()) {
            findings.push(PersonaFinding::DuplicateFacet { facet: key.to_string() });
        }
    }
    for (index, rule) in spec.behavioral_rules.iter().enumerate() {
        if rule.trim().is_empty() {
            findings.push(PersonaFinding::EmptyRule { index });
        }
    }
    findings
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("persona is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PersonaFinding>),
    #[error("compiled prompt is {length} characters, cap is {cap}")]
    TooLong { length: usize, cap: usize },
}

/// Builds the system prompt for `spec`. Sections, in order: identity,
/// personality descriptors (table order), behavioral rules, context
/// documents. Empty sections are omitted.
pub fn compile_system_prompt(
    spec: &PersonaSpec,
    table: &DescriptorTable,
    max_chars: usize,
) -> Result<String, CompileError> {
    let findings = validate_persona(spec, table);
    if !findings.is_empty() {
        return Err(CompileError::Invalid(findings));
    }
    let mut sections = Vec::new();

    let mut identity = format!("You are {}, a member of this team.", spec.name.trim());
    if !spec.role_description.trim().is_empty() {
        identity.push_str(&format!("\nYour role: {}", spec.role_description.trim()));
    }
    sections.push(identity);

    let levels: HashMap<FacetKey, Level> = spec.facets.iter().map(|s| (s.key(), s.level)).collect();
    let descriptors: Vec<String> = table
        .facets()
        .iter()
        .filter_map(|fk| levels.get(fk).map(|lvl| (fk, *lvl)))
        .map(|(fk, lvl)| format!("- {}", table.descriptor(fk, lvl).unwrap_or_default()))
        .collect();
    if !descriptors.is_empty() {
        sections.push(format!("Personality:\n{}", descriptors.join("\n")));
    }

    if !spec.behavioral_rules.is_empty() {
        let rules: Vec<String> = spec
            .behavioral_rules
            .iter()
            .map(|r| format!("- {}", r.trim()))
            .collect();
        sections.push(format!("Behavioral rules:\n{}", rules.join("\n")));
    }

    if !spec.context_documents.is_empty() {
        let mut docs: Vec<&DocumentRef> = spec.context_documents.iter().collect();
        docs.sort_by(|a, b| (&a.name, &a.digest, &a.document_id).cmp(&(&b.name, &b.digest, &b.document_id)));
        let lines: Vec<String> = docs
            .iter()
            .map(|d| {
                let mut line = format!("- {} (sha256 {})", d.name, d.digest);
                if let Some(ex) = d.excerpt.as_deref().map(str::trim).filter(|e| !e.is_empty()) {
                    line.push_str(&format!("\n  {}", ex.replace('\n', "\n  ")));
                }
                line
            })
            .collect();
        sections.push(format!("Context documents:\n{}", lines.join("\n")));
    }

    let prompt = sections.join("\n\n");
    let length = prompt.chars().count();
    if length > max_chars {
        return Err(CompileError::TooLong { length, cap: max_chars });
    }
    Ok(prompt)
}
