//! Triadic concept graph over disease entities and radiographic attributes.
//!
//! Every (entity, attribute) pair carries one of three relations:
//! association, irrelevance or exclusion. Pairs without a stored relation
//! are irrelevant. Entities may additionally be declared mutually
//! exclusive, in which case they must not share any associated attribute.
//!
//! Graphs are read from and written to a TOML document:
//!
//! ```toml
//! exclusions = [["atelectasis", "emphysema"]]
//!
//! [[entities]]
//! name = "emphysema"
//!
//! [[attributes]]
//! name = "hyperinflation"
//! category = "functional"
//!
//! [[relations]]
//! entity = "emphysema"
//! attribute = "hyperinflation"
//! kind = "association"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

const DEMO_GRAPH: &str = include_str!("../assets/demo_graph.toml");

/// Diagnostic category of an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Morphological,
    Density,
    Anatomical,
    Functional,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Morphological,
        Category::Density,
        Category::Anatomical,
        Category::Functional,
    ];
}

/// Relation between an entity and an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Association,
    Irrelevance,
    Exclusion,
}

/// Identifier of a disease entity. Always nonempty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(name: impl Into<String>) -> Result<Self, GraphError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(GraphError::EmptyName);
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An attribute together with its diagnostic category.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttributeId {
    pub name: String,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    UnknownEntity,
    UnknownAttribute,
    DuplicateEntity,
    DuplicateAttribute,
    EmptyName,
    /// Two relation kinds stated for the same (entity, attribute) pair.
    ConflictingRelation,
    /// An attribute both associated with and excluded for one entity.
    AssociationExclusionConflict,
    AsymmetricExclusion,
    ReflexiveExclusion,
    /// Two mutually exclusive entities share an associated attribute.
    SharedAssociationAcrossExclusion,
}

/// One invariant violation, naming the rule and the offending identifiers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub rule: Rule,
    pub subjects: Vec<String>,
}

impl Violation {
    fn new(rule: Rule, subjects: &[&str]) -> Self {
        Self {
            rule,
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({})", self.rule, self.subjects.join(", "))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph document parse error: {0}")]
    Parse(String),
    #[error("graph validation failed: {}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("empty identifier")]
    EmptyName,
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityEntry {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub name: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub entity: String,
    pub attribute: String,
    pub kind: RelationKind,
}

/// On-disk form of a graph. `exclusions` comes first so the TOML
/// serializer emits it ahead of the arrays of tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    #[serde(default)]
    pub exclusions: Vec<[String; 2]>,
    #[serde(default)]
    pub entities: Vec<EntityEntry>,
    #[serde(default)]
    pub attributes: Vec<AttributeEntry>,
    #[serde(default)]
    pub relations: Vec<RelationEntry>,
}

/// Immutable-after-construction concept graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptGraph {
    entities: BTreeSet<String>,
    attributes: BTreeMap<String, Category>,
    relations: BTreeMap<(String, String), RelationKind>,
    // Directed pairs; a well-formed graph stores both directions.
    exclusions: BTreeSet<(String, String)>,
}

impl ConceptGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bundled 12-entity thoracic graph.
    pub fn demo() -> Self {
        Self::parse(DEMO_GRAPH).expect("bundled demo graph is valid")
    }

    /// Parses and validates a TOML graph document.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument =
            toml::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn from_document(doc: &GraphDocument) -> Result<Self, GraphError> {
        let mut violations = Vec::new();
        let mut g = ConceptGraph::new();

        for e in &doc.entities {
            if e.name.trim().is_empty() {
                violations.push(Violation::new(Rule::EmptyName, &["entity"]));
            } else if !g.entities.insert(e.name.clone()) {
                violations.push(Violation::new(Rule::DuplicateEntity, &[&e.name]));
            }
        }
        for a in &doc.attributes {
            if a.name.trim().is_empty() {
                violations.push(Violation::new(Rule::EmptyName, &["attribute"]));
            } else if g.attributes.insert(a.name.clone(), a.category).is_some() {
                violations.push(Violation::new(Rule::DuplicateAttribute, &[&a.name]));
            }
        }
        for r in &doc.relations {
            let key = (r.entity.clone(), r.attribute.clone());
            match g.relations.get(&key) {
                Some(&prev) if prev != r.kind => {
                    let pair = [prev, r.kind];
                    let rule = if pair.contains(&RelationKind::Association)
                        && pair.contains(&RelationKind::Exclusion)
                    {
                        Rule::AssociationExclusionConflict
                    } else {
                        Rule::ConflictingRelation
                    };
                    violations.push(Violation::new(rule, &[&r.entity, &r.attribute]));
                }
                Some(_) => {}
                None => {
                    g.relations.insert(key, r.kind);
                }
            }
        }
        for [a, b] in &doc.exclusions {
            g.exclusions.insert((a.clone(), b.clone()));
            g.exclusions.insert((b.clone(), a.clone()));
        }

        violations.extend(g.validate());
        if violations.is_empty() {
            Ok(g)
        } else {
            violations.sort();
            violations.dedup();
            Err(GraphError::Validation(violations))
        }
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            exclusions: self
                .exclusions
                .iter()
                .filter(|(a, b)| a <= b || !self.exclusions.contains(&(b.clone(), a.clone())))
                .map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
            entities: self
                .entities
                .iter()
                .map(|name| EntityEntry { name: name.clone() })
                .collect(),
            attributes: self
                .attributes
                .iter()
                .map(|(name, &category)| AttributeEntry {
                    name: name.clone(),
                    category,
                })
                .collect(),
            relations: self
                .relations
                .iter()
                .map(|((entity, attribute), &kind)| RelationEntry {
                    entity: entity.clone(),
                    attribute: attribute.clone(),
                    kind,
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("graph document serializes")
    }

    // Unchecked construction; call `validate` afterwards.

    pub fn add_entity(&mut self, name: &str) {
        self.entities.insert(name.to_string());
    }

    pub fn add_attribute(&mut self, name: &str, category: Category) {
        self.attributes.insert(name.to_string(), category);
    }

    /// Stores a relation, replacing any previous kind for the pair.
    pub fn set_relation(&mut self, entity: &str, attribute: &str, kind: RelationKind) {
        self.relations
            .insert((entity.to_string(), attribute.to_string()), kind);
    }

    /// Declares two entities mutually exclusive (both directions).
    pub fn add_exclusion(&mut self, a: &str, b: &str) {
        self.exclusions.insert((a.to_string(), b.to_string()));
        self.exclusions.insert((b.to_string(), a.to_string()));
    }

    /// Inserts a single directed exclusion. Leaves the graph asymmetric
    /// unless the reverse pair is added too.
    pub fn add_directed_exclusion(&mut self, a: &str, b: &str) {
        self.exclusions.insert((a.to_string(), b.to_string()));
    }

    /// (entity count, attribute count)
    pub fn size(&self) -> (usize, usize) {
        (self.entities.len(), self.attributes.len())
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Entity names in lexicographic order.
    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    /// Attributes in lexicographic order of name.
    pub fn attributes(&self) -> impl Iterator<Item = AttributeId> + '_ {
        self.attributes.iter().map(|(name, &category)| AttributeId {
            name: name.clone(),
            category,
        })
    }

    pub fn has_entity(&self, name: &str) -> bool {
        self.entities.contains(name)
    }

    pub fn has_attribute(&self, name: &str) -> bool {
        self.attributes.contains_key(name)
    }

    pub fn category_of(&self, attribute: &str) -> Result<Category, GraphError> {
        self.attributes
            .get(attribute)
            .copied()
            .ok_or_else(|| GraphError::UnknownAttribute(attribute.to_string()))
    }

    fn check_entity(&self, entity: &str) -> Result<(), GraphError> {
        if self.entities.contains(entity) {
            Ok(())
        } else {
            Err(GraphError::UnknownEntity(entity.to_string()))
        }
    }

    /// Stored relation, or `Irrelevance` when none is stored.
    pub fn relation_of(&self, entity: &str, attribute: &str) -> Result<RelationKind, GraphError> {
        self.check_entity(entity)?;
        if !self.attributes.contains_key(attribute) {
            return Err(GraphError::UnknownAttribute(attribute.to_string()));
        }
        Ok(self
            .relations
            .get(&(entity.to_string(), attribute.to_string()))
            .copied()
            .unwrap_or(RelationKind::Irrelevance))
    }

    fn attributes_with(&self, entity: &str, kind: RelationKind) -> Result<Vec<String>, GraphError> {
        self.check_entity(entity)?;
        // BTreeMap keys are ordered by (entity, attribute), so this range
        // yields attributes lexicographically.
        Ok(self
            .relations
            .range((entity.to_string(), String::new())..)
            .take_while(|((e, _), _)| e == entity)
            .filter(|(_, &k)| k == kind)
            .map(|((_, a), _)| a.clone())
            .collect())
    }

    pub fn associated_attributes(&self, entity: &str) -> Result<Vec<String>, GraphError> {
        self.attributes_with(entity, RelationKind::Association)
    }

    pub fn excluded_attributes(&self, entity: &str) -> Result<Vec<String>, GraphError> {
        self.attributes_with(entity, RelationKind::Exclusion)
    }

    pub fn are_exclusive(&self, a: &str, b: &str) -> bool {
        self.exclusions.contains(&(a.to_string(), b.to_string()))
    }

    /// Entities exclusive with `entity`, sorted.
    pub fn exclusive_partners(&self, entity: &str) -> Vec<String> {
        self.exclusions
            .iter()
            .filter(|(a, _)| a == entity)
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Subgraph on the given entities, keeping only attributes that carry a
    /// stored relation to one of them.
    pub fn restrict(&self, entities: &[&str]) -> Result<ConceptGraph, GraphError> {
        let mut g = ConceptGraph::new();
        for &e in entities {
            self.check_entity(e)?;
            g.entities.insert(e.to_string());
        }
        for ((e, a), &kind) in &self.relations {
            if g.entities.contains(e) {
                g.attributes.insert(a.clone(), self.attributes[a]);
                g.relations.insert((e.clone(), a.clone()), kind);
            }
        }
        for (a, b) in &self.exclusions {
            if g.entities.contains(a) && g.entities.contains(b) {
                g.exclusions.insert((a.clone(), b.clone()));
            }
        }
        Ok(g)
    }

    /// All invariant violations, sorted. Empty iff the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();

        for (e, a) in self.relations.keys() {
            if !self.entities.contains(e) {
                out.push(Violation::new(Rule::UnknownEntity, &[e]));
            }
            if !self.attributes.contains_key(a) {
                out.push(Violation::new(Rule::UnknownAttribute, &[a]));
            }
        }

        for (a, b) in &self.exclusions {
            for name in [a, b] {
                if !self.entities.contains(name) {
                    out.push(Violation::new(Rule::UnknownEntity, &[name]));
                }
            }
            if a == b {
                out.push(Violation::new(Rule::ReflexiveExclusion, &[a]));
            } else if !self.exclusions.contains(&(b.clone(), a.clone())) {
                out.push(Violation::new(Rule::AsymmetricExclusion, &[a, b]));
            }
        }

        // A single-key map cannot hold two kinds for a pair; assert it anyway
        // for graphs mutated through `set_relation`.
        for e in &self.entities {
            let assoc: BTreeSet<_> = self
                .attributes_with(e, RelationKind::Association)
                .unwrap_or_default()
                .into_iter()
                .collect();
            for a in self.attributes_with(e, RelationKind::Exclusion).unwrap_or_default() {
                if assoc.contains(&a) {
                    out.push(Violation::new(Rule::AssociationExclusionConflict, &[e, &a]));
                }
            }
        }

        for (a, b) in &self.exclusions {
            if a >= b || !self.entities.contains(a) || !self.entities.contains(b) {
                continue;
            }
            let left: BTreeSet<_> = self
                .attributes_with(a, RelationKind::Association)
                .unwrap_or_default()
                .into_iter()
                .collect();
            for attr in self
                .attributes_with(b, RelationKind::Association)
                .unwrap_or_default()
            {
                if left.contains(&attr) {
                    out.push(Violation::new(
                        Rule::SharedAssociationAcrossExclusion,
                        &[a, b, &attr],
                    ));
                }
            }
        }

        out.sort();
        out.dedup();
        out
    }
}
