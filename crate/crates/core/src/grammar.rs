//! Bidirectional attribute grammar for satellite captions.
//!
//! One direction parses free-form captions into [`StructuredAttributes`] by
//! case-insensitive phrase matching against a frozen rule table (shipped as a
//! versioned JSON data file). The other direction renders attributes back
//! into captions such that `parse(render(a)) == a`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

const BUILTIN_TABLE_JSON: &str = include_str!("../data/phrase_table.json");

macro_rules! attr_enum {
    // Enum-valued field with an absorbing Unknown default.
    ($name:ident with_unknown { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant,)+ Unknown }

        impl Default for $name {
            fn default() -> Self { $name::Unknown }
        }

        impl $name {
            /// Values a caption can assert; Unknown means "not mentioned".
            pub const KNOWN: &'static [$name] = &[$($name::$variant),+];
            pub const ALL: &'static [$name] = &[$($name::$variant,)+ $name::Unknown];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s,)+ $name::Unknown => "unknown" }
            }

            pub fn parse_value(s: &str) -> Option<$name> {
                match s { $($s => Some($name::$variant),)+ "unknown" => Some($name::Unknown), _ => None }
            }
        }
    };
    // Set-member value (no Unknown; absence is an empty set).
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const KNOWN: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }

            pub fn parse_value(s: &str) -> Option<$name> {
                match s { $($s => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

attr_enum!(RoofType with_unknown {
    Metal => "metal",
    Shingle => "shingle",
    Gable => "gable",
    Hip => "hip",
    Flat => "flat",
});

attr_enum!(RoofCondition with_unknown {
    New => "new",
    Good => "good",
    Old => "old",
    Damaged => "damaged",
});

attr_enum!(HouseSize with_unknown {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

attr_enum!(EnvFeature {
    Urban => "urban",
    Rural => "rural",
    Trees => "trees",
    Greenery => "greenery",
    Desert => "desert",
    Snow => "snow",
    OpenSpace => "open_space",
});

attr_enum!(YardFeature {
    Garden => "garden",
    Pool => "pool",
    Patio => "patio",
    Driveway => "driveway",
    FrontYard => "front_yard",
    Backyard => "backyard",
});

attr_enum!(Road with_unknown {
    WideRoad => "wide_road",
    NarrowStreet => "narrow_street",
    Highway => "highway",
    GravelRoad => "gravel_road",
    Paved => "paved",
    Dirt => "dirt",
});

attr_enum!(CarsPresent with_unknown {
    None => "none",
    Few => "few",
    Several => "several",
});

/// Structured view of one caption: every enum field is always set (Unknown is
/// the absorbing default), sets may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructuredAttributes {
    #[serde(default)]
    pub roof_type: RoofType,
    #[serde(default)]
    pub roof_condition: RoofCondition,
    #[serde(default)]
    pub house_size: HouseSize,
    #[serde(default)]
    pub environment: BTreeSet<EnvFeature>,
    #[serde(default)]
    pub yard: BTreeSet<YardFeature>,
    #[serde(default)]
    pub road: Road,
    #[serde(default)]
    pub cars_present: CarsPresent,
}

impl StructuredAttributes {
    pub fn is_all_unknown(&self) -> bool {
        *self == StructuredAttributes::default()
    }
}

/// Attribute fields in their canonical order; this order also fixes the
/// one-hot layout used by the image featurizer and the synthetic SVI link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldId {
    RoofType,
    RoofCondition,
    HouseSize,
    Environment,
    Yard,
    Road,
    CarsPresent,
}

impl FieldId {
    pub const ALL: [FieldId; 7] = [
        FieldId::RoofType,
        FieldId::RoofCondition,
        FieldId::HouseSize,
        FieldId::Environment,
        FieldId::Yard,
        FieldId::Road,
        FieldId::CarsPresent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldId::RoofType => "roof_type",
            FieldId::RoofCondition => "roof_condition",
            FieldId::HouseSize => "house_size",
            FieldId::Environment => "environment",
            FieldId::Yard => "yard",
            FieldId::Road => "road",
            FieldId::CarsPresent => "cars_present",
        }
    }

    fn from_name(name: &str) -> Option<FieldId> {
        FieldId::ALL.iter().copied().find(|f| f.name() == name)
    }

    /// Is the field enum-valued (true) or set-valued (false)?
    pub fn is_enum(self) -> bool {
        !matches!(self, FieldId::Environment | FieldId::Yard)
    }

    /// Value names a caption can assert for this field (Unknown excluded).
    pub fn known_values(self) -> Vec<&'static str> {
        match self {
            FieldId::RoofType => RoofType::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::RoofCondition => RoofCondition::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::HouseSize => HouseSize::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::Environment => EnvFeature::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::Yard => YardFeature::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::Road => Road::KNOWN.iter().map(|v| v.as_str()).collect(),
            FieldId::CarsPresent => CarsPresent::KNOWN.iter().map(|v| v.as_str()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Phrase table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RawPhrase {
    phrase: String,
    value: String,
    origin: String,
}

#[derive(Debug, Clone, Deserialize)]
struct RawField {
    name: String,
    kind: String,
    phrases: Vec<RawPhrase>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawTable {
    version: u32,
    fields: Vec<RawField>,
}

/// One surface-phrase rule: token sequence -> field value.
#[derive(Debug, Clone)]
pub struct PhraseRule {
    pub phrase: String,
    pub tokens: Vec<String>,
    pub value: String,
    pub origin: String,
}

#[derive(Debug, Clone)]
pub struct FieldRules {
    pub field: FieldId,
    pub rules: Vec<PhraseRule>,
}

/// The frozen rule table. Rules keep their file order; matching is
/// leftmost-longest with file order breaking length ties.
#[derive(Debug, Clone)]
pub struct PhraseTable {
    pub version: u32,
    pub fields: Vec<FieldRules>,
}

impl PhraseTable {
    pub fn from_json(json: &str) -> Result<PhraseTable> {
        let raw: RawTable = serde_json::from_str(json)
            .map_err(|e| Error::Validation(format!("phrase table: {e}")))?;
        let mut fields = Vec::new();
        let mut seen = BTreeSet::new();
        for rf in &raw.fields {
            let field = FieldId::from_name(&rf.name)
                .ok_or_else(|| Error::Validation(format!("unknown field {:?}", rf.name)))?;
            if !seen.insert(field) {
                return Err(Error::Validation(format!("duplicate field {:?}", rf.name)));
            }
            let expect_kind = if field.is_enum() { "enum" } else { "set" };
            if rf.kind != expect_kind {
                return Err(Error::Validation(format!(
                    "field {:?} must have kind {expect_kind}",
                    rf.name
                )));
            }
            let known = field.known_values();
            let mut rules = Vec::new();
            let mut phrase_values: BTreeMap<String, String> = BTreeMap::new();
            for rp in &rf.phrases {
                let tokens = tokenize(&rp.phrase);
                if tokens.is_empty() {
                    return Err(Error::Validation(format!("empty phrase in {:?}", rf.name)));
                }
                if !known.contains(&rp.value.as_str()) {
                    return Err(Error::Validation(format!(
                        "phrase {:?} maps to unknown value {:?} in field {:?}",
                        rp.phrase, rp.value, rf.name
                    )));
                }
                let key = tokens.join(" ");
                if let Some(prev) = phrase_values.get(&key) {
                    return Err(Error::Validation(format!(
                        "phrase {:?} appears twice in field {:?} (values {:?} and {:?})",
                        rp.phrase, rf.name, prev, rp.value
                    )));
                }
                phrase_values.insert(key, rp.value.clone());
                rules.push(PhraseRule {
                    phrase: rp.phrase.clone(),
                    tokens,
                    value: rp.value.clone(),
                    origin: rp.origin.clone(),
                });
            }
            for v in &known {
                if !rules.iter().any(|r| r.value == *v) {
                    return Err(Error::Validation(format!(
                        "value {:?} of field {:?} has no surface phrase",
                        v, rf.name
                    )));
                }
            }
            fields.push(FieldRules { field, rules });
        }
        for f in FieldId::ALL {
            if !seen.contains(&f) {
                return Err(Error::Validation(format!("missing field {:?}", f.name())));
            }
        }
        Ok(PhraseTable {
            version: raw.version,
            fields,
        })
    }

    /// The embedded table every pipeline stage shares.
    pub fn builtin() -> &'static PhraseTable {
        static TABLE: OnceLock<PhraseTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            PhraseTable::from_json(BUILTIN_TABLE_JSON).expect("builtin phrase table is valid")
        })
    }

    /// field name -> [(surface phrase, value)] in table order.
    pub fn inventory(&self) -> BTreeMap<&'static str, Vec<(&str, &str)>> {
        self.fields
            .iter()
            .map(|fr| {
                (
                    fr.field.name(),
                    fr.rules
                        .iter()
                        .map(|r| (r.phrase.as_str(), r.value.as_str()))
                        .collect(),
                )
            })
            .collect()
    }

    /// Every distinct surface phrase in the table.
    pub fn all_phrases(&self) -> BTreeSet<&str> {
        self.fields
            .iter()
            .flat_map(|fr| fr.rules.iter().map(|r| r.phrase.as_str()))
            .collect()
    }
}

/// The frozen rule table (stable across runs).
pub fn phrase_inventory() -> BTreeMap<&'static str, Vec<(&'static str, &'static str)>> {
    PhraseTable::builtin().inventory()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn match_at(rule: &PhraseRule, tokens: &[String], at: usize) -> bool {
    tokens.len() - at >= rule.tokens.len()
        && rule
            .tokens
            .iter()
            .zip(&tokens[at..])
            .all(|(a, b)| a == b)
}

/// Leftmost match; among matches at the leftmost position the longest phrase
/// wins, with table order breaking exact-length ties.
fn leftmost_longest<'t>(rules: &'t [PhraseRule], tokens: &[String]) -> Option<&'t PhraseRule> {
    for at in 0..tokens.len() {
        let mut best: Option<&PhraseRule> = None;
        for rule in rules {
            if match_at(rule, tokens, at)
                && best.is_none_or(|b| rule.tokens.len() > b.tokens.len())
            {
                best = Some(rule);
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

fn set_enum_value(attrs: &mut StructuredAttributes, field: FieldId, value: &str) {
    match field {
        FieldId::RoofType => attrs.roof_type = RoofType::parse_value(value).unwrap(),
        FieldId::RoofCondition => {
            attrs.roof_condition = RoofCondition::parse_value(value).unwrap()
        }
        FieldId::HouseSize => attrs.house_size = HouseSize::parse_value(value).unwrap(),
        FieldId::Road => attrs.road = Road::parse_value(value).unwrap(),
        FieldId::CarsPresent => attrs.cars_present = CarsPresent::parse_value(value).unwrap(),
        FieldId::Environment | FieldId::Yard => unreachable!("set fields use add_set_value"),
    }
}

fn add_set_value(attrs: &mut StructuredAttributes, field: FieldId, value: &str) {
    match field {
        FieldId::Environment => {
            attrs.environment.insert(EnvFeature::parse_value(value).unwrap());
        }
        FieldId::Yard => {
            attrs.yard.insert(YardFeature::parse_value(value).unwrap());
        }
        _ => unreachable!("enum fields use set_enum_value"),
    }
}

/// Parse a caption against a specific table.
pub fn parse_with(table: &PhraseTable, text: &str) -> StructuredAttributes {
    let tokens = tokenize(text);
    let mut attrs = StructuredAttributes::default();
    if tokens.is_empty() {
        return attrs;
    }
    for fr in &table.fields {
        if fr.field.is_enum() {
            if let Some(rule) = leftmost_longest(&fr.rules, &tokens) {
                set_enum_value(&mut attrs, fr.field, &rule.value);
            }
        } else {
            for at in 0..tokens.len() {
                for rule in &fr.rules {
                    if match_at(rule, &tokens, at) {
                        add_set_value(&mut attrs, fr.field, &rule.value);
                    }
                }
            }
        }
    }
    attrs
}

/// Parse a caption with the builtin table. Pure; unparseable text yields the
/// all-unknown default.
pub fn parse_attributes(text: &str) -> StructuredAttributes {
    parse_with(PhraseTable::builtin(), text)
}

/// Every phrase-inventory hit in `text` as (field, phrase, value), consuming
/// the longest match at each position per field. Used for report frequency
/// tables, not for parsing.
pub fn phrase_hits(text: &str) -> Vec<(FieldId, String, String)> {
    let table = PhraseTable::builtin();
    let tokens = tokenize(text);
    let mut hits = Vec::new();
    for fr in &table.fields {
        let mut at = 0;
        while at < tokens.len() {
            let mut best: Option<&PhraseRule> = None;
            for rule in &fr.rules {
                if match_at(rule, &tokens, at)
                    && best.is_none_or(|b| rule.tokens.len() > b.tokens.len())
                {
                    best = Some(rule);
                }
            }
            if let Some(rule) = best {
                hits.push((fr.field, rule.phrase.clone(), rule.value.clone()));
                at += rule.tokens.len();
            } else {
                at += 1;
            }
        }
    }
    hits
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn size_surface(rng: &mut ChaCha8Rng, v: HouseSize) -> &'static str {
    match v {
        HouseSize::Small => "small",
        HouseSize::Medium => pick(rng, &["medium-size", "medium-sized"]),
        HouseSize::Large => "large",
        HouseSize::Unknown => unreachable!(),
    }
}

fn roof_surface(rng: &mut ChaCha8Rng, v: RoofType) -> &'static str {
    match v {
        RoofType::Metal => "metal roof",
        RoofType::Shingle => pick(rng, &["shingle roof", "shingled roof"]),
        RoofType::Gable => "gable roof",
        RoofType::Hip => pick(rng, &["hip roof", "hipped roof"]),
        RoofType::Flat => "flat roof",
        RoofType::Unknown => unreachable!(),
    }
}

fn condition_adjective(v: RoofCondition) -> &'static str {
    match v {
        RoofCondition::New => "new",
        RoofCondition::Good => "good",
        RoofCondition::Old => "old",
        RoofCondition::Damaged => "damaged",
        RoofCondition::Unknown => unreachable!(),
    }
}

fn road_surface(v: Road) -> &'static str {
    match v {
        Road::WideRoad => "wide road",
        Road::NarrowStreet => "narrow street",
        Road::Highway => "highway",
        Road::GravelRoad => "gravel road",
        Road::Paved => "paved road",
        Road::Dirt => "dirt road",
        Road::Unknown => unreachable!(),
    }
}

fn cars_surface(v: CarsPresent) -> &'static str {
    match v {
        CarsPresent::None => "no cars",
        CarsPresent::Few => "a few cars",
        CarsPresent::Several => "several cars",
        CarsPresent::Unknown => unreachable!(),
    }
}

fn env_surface(v: EnvFeature) -> &'static str {
    match v {
        EnvFeature::Urban => "urban",
        EnvFeature::Rural => "rural",
        EnvFeature::Trees => "trees",
        EnvFeature::Greenery => "greenery",
        EnvFeature::Desert => "desert",
        EnvFeature::Snow => "snow",
        EnvFeature::OpenSpace => "open space",
    }
}

fn yard_surface(rng: &mut ChaCha8Rng, v: YardFeature) -> &'static str {
    match v {
        YardFeature::Garden => "a garden",
        YardFeature::Pool => pick(rng, &["a pool", "a swimming pool"]),
        YardFeature::Patio => "a patio",
        YardFeature::Driveway => "a driveway",
        YardFeature::FrontYard => "a front yard",
        YardFeature::Backyard => "a backyard",
    }
}

fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        _ => format!(
            "{} and {}",
            items[..items.len() - 1].join(", "),
            items[items.len() - 1]
        ),
    }
}

/// Render attributes into a caption containing exactly one surface phrase per
/// non-unknown field (one per member for set fields). The seed varies glue
/// and phrase variants only; the parse is invariant.
pub fn render_caption(attrs: &StructuredAttributes, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "render", 0));
    let mut sentences: Vec<String> = Vec::new();

    let house_known = attrs.house_size != HouseSize::Unknown
        || attrs.roof_type != RoofType::Unknown
        || attrs.roof_condition != RoofCondition::Unknown
        || attrs.road != Road::Unknown
        || attrs.cars_present != CarsPresent::Unknown;
    if house_known {
        let mut s = String::from("A");
        if attrs.house_size != HouseSize::Unknown {
            s.push(' ');
            s.push_str(size_surface(&mut rng, attrs.house_size));
        }
        s.push_str(" house");
        match (attrs.roof_type, attrs.roof_condition) {
            (RoofType::Unknown, RoofCondition::Unknown) => {}
            (rt, RoofCondition::Unknown) => {
                s.push_str(" with a ");
                s.push_str(roof_surface(&mut rng, rt));
            }
            (RoofType::Unknown, rc) => {
                s.push_str(" with a roof in ");
                s.push_str(condition_adjective(rc));
                s.push_str(" condition");
            }
            (rt, rc) => {
                s.push_str(" with a ");
                s.push_str(roof_surface(&mut rng, rt));
                s.push_str(" in ");
                s.push_str(condition_adjective(rc));
                s.push_str(" condition");
            }
        }
        if attrs.road != Road::Unknown {
            s.push_str(pick(&mut rng, &[" on a ", " along a "]));
            s.push_str(road_surface(attrs.road));
        }
        if attrs.cars_present != CarsPresent::Unknown {
            s.push_str(" with ");
            s.push_str(cars_surface(attrs.cars_present));
            s.push_str(pick(&mut rng, &[" visible", " parked nearby"]));
        }
        s.push('.');
        sentences.push(s);
    }

    if !attrs.yard.is_empty() {
        let items: Vec<String> = attrs
            .yard
            .iter()
            .map(|&y| yard_surface(&mut rng, y).to_string())
            .collect();
        let verb = pick(&mut rng, &["has", "includes", "features"]);
        sentences.push(format!("The property {verb} {}.", join_list(&items)));
    }

    if !attrs.environment.is_empty() {
        let adjectives: Vec<String> = attrs
            .environment
            .iter()
            .filter(|e| matches!(e, EnvFeature::Urban | EnvFeature::Rural))
            .map(|&e| env_surface(e).to_string())
            .collect();
        let nouns: Vec<String> = attrs
            .environment
            .iter()
            .filter(|e| !matches!(e, EnvFeature::Urban | EnvFeature::Rural))
            .map(|&e| env_surface(e).to_string())
            .collect();
        let place = pick(&mut rng, &["setting", "area"]);
        let tail = pick(&mut rng, &["around", "nearby"]);
        let s = match (adjectives.is_empty(), nouns.is_empty()) {
            (false, false) => format!(
                "The {place} is {}, with {} {tail}.",
                join_list(&adjectives),
                join_list(&nouns)
            ),
            (false, true) => format!("The {place} is {}.", join_list(&adjectives)),
            (true, false) => format!("There are {} {tail}.", join_list(&nouns)),
            (true, true) => unreachable!(),
        };
        sentences.push(s);
    }

    if sentences.is_empty() {
        return "A satellite view of a property.".to_string();
    }
    sentences.join(" ")
}

/// Every token the renderer can emit: glue words plus all render-phrase
/// tokens. The captioner vocabulary is built from this.
pub fn render_lexicon() -> BTreeSet<String> {
    let glue = [
        "a", "house", "with", "roof", "in", "condition", "on", "along", "visible", "parked",
        "nearby", "the", "property", "has", "includes", "features", "and", "setting", "area",
        "is", "there", "are", "around", "satellite", "view", "of",
    ];
    let mut lex: BTreeSet<String> = glue.iter().map(|s| s.to_string()).collect();
    for fr in &PhraseTable::builtin().fields {
        for rule in &fr.rules {
            for t in &rule.tokens {
                lex.insert(t.clone());
            }
        }
    }
    lex
}

// ---------------------------------------------------------------------------
// One-hot encoding of the attribute space
// ---------------------------------------------------------------------------

/// Dimension of the one-hot attribute encoding.
pub fn one_hot_dim() -> usize {
    one_hot_labels().len()
}

/// Slot labels, e.g. "roof_type=metal". Enum fields get one slot per value
/// including unknown (so each enum block sums to 1); set fields get one slot
/// per member.
pub fn one_hot_labels() -> Vec<String> {
    let mut labels = Vec::new();
    for field in FieldId::ALL {
        if field.is_enum() {
            for v in field.known_values() {
                labels.push(format!("{}={}", field.name(), v));
            }
            labels.push(format!("{}=unknown", field.name()));
        } else {
            for v in field.known_values() {
                labels.push(format!("{}={}", field.name(), v));
            }
        }
    }
    labels
}

pub fn one_hot(attrs: &StructuredAttributes) -> Vec<f64> {
    fn enum_block<T: Copy + PartialEq>(out: &mut Vec<f64>, all: &[T], v: T) {
        for cand in all {
            out.push(if *cand == v { 1.0 } else { 0.0 });
        }
    }
    let mut x = Vec::with_capacity(one_hot_dim());
    enum_block(&mut x, RoofType::ALL, attrs.roof_type);
    enum_block(&mut x, RoofCondition::ALL, attrs.roof_condition);
    enum_block(&mut x, HouseSize::ALL, attrs.house_size);
    for v in EnvFeature::KNOWN {
        x.push(if attrs.environment.contains(v) { 1.0 } else { 0.0 });
    }
    for v in YardFeature::KNOWN {
        x.push(if attrs.yard.contains(v) { 1.0 } else { 0.0 });
    }
    enum_block(&mut x, Road::ALL, attrs.road);
    enum_block(&mut x, CarsPresent::ALL, attrs.cars_present);
    x
}
