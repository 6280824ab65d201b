//! Brief extraction, steerable-dimension elicitation, and the 2×2 persona
//! panel.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{AssetRef, Gateway, GatewayError, ModelRequest, ResponseSchema, UserPart};
use crate::prompt::{grounding, JSON_ONLY};

pub const TAG_EXTRACT: &str = "brief.extract";
pub const TAG_DIMENSIONS: &str = "persona.dimensions";
pub const TAG_BUILD: &str = "persona.build";
pub const TAG_AVATAR: &str = "persona.avatar";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PersonaError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid brief: {0}")]
    InvalidBrief(String),
    #[error("persona field `{0}` is empty")]
    EmptyField(String),
    #[error("image page {0} is not in the asset store")]
    MissingPage(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BriefPage {
    Text(String),
    /// A scanned page, stored as an asset.
    Image(AssetRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketingBrief {
    pub pages: Vec<BriefPage>,
    pub source_name: String,
}

impl MarketingBrief {
    pub fn from_text(source_name: impl Into<String>, text: impl Into<String>) -> Self {
        MarketingBrief {
            pages: vec![BriefPage::Text(text.into())],
            source_name: source_name.into(),
        }
    }

    pub fn validate(&self) -> Result<(), PersonaError> {
        if self.pages.is_empty() {
            return Err(PersonaError::InvalidBrief("brief has no pages".into()));
        }
        for (i, p) in self.pages.iter().enumerate() {
            if let BriefPage::Text(t) = p {
                if t.trim().is_empty() {
                    return Err(PersonaError::InvalidBrief(format!("page {} is empty", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// All text pages joined by blank lines.
    pub fn text(&self) -> String {
        self.pages
            .iter()
            .filter_map(|p| match p {
                BriefPage::Text(t) => Some(t.as_str()),
                BriefPage::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn has_images(&self) -> bool {
        self.pages.iter().any(|p| matches!(p, BriefPage::Image(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefExtract {
    pub goal: String,
    pub audience_summary: String,
    pub constraints: Vec<String>,
    /// Brief content carried verbatim into every downstream prompt.
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BriefExtraction {
    pub goal: String,
    #[serde(default)]
    pub audience_summary: String,
    #[serde(default)]
    pub constraints: Vec<String>,
    /// Text read from image pages, if any.
    #[serde(default)]
    pub transcription: Option<String>,
}

impl ResponseSchema for BriefExtraction {
    const SCHEMA_ID: &'static str = TAG_EXTRACT;

    fn check(&self) -> Result<(), String> {
        if self.goal.trim().is_empty() {
            return Err("`goal` must not be empty".into());
        }
        if self.goal.contains('\n') {
            return Err("`goal` must be a single line".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionSource {
    FromBrief,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteerableDimension {
    pub name: String,
    pub low_label: String,
    pub high_label: String,
    pub source: DimensionSource,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DimensionDraft {
    pub name: String,
    pub low_label: String,
    pub high_label: String,
    #[serde(default)]
    pub from_brief: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DimensionReply {
    pub dimensions: Vec<DimensionDraft>,
}

impl ResponseSchema for DimensionReply {
    const SCHEMA_ID: &'static str = TAG_DIMENSIONS;

    fn check(&self) -> Result<(), String> {
        if self.dimensions.len() != 2 {
            return Err(format!("expected exactly 2 dimensions, got {}", self.dimensions.len()));
        }
        let mut labels = BTreeSet::new();
        for d in &self.dimensions {
            if d.name.trim().is_empty() {
                return Err("dimension `name` must not be empty".into());
            }
            for l in [&d.low_label, &d.high_label] {
                let key = l.trim().to_lowercase();
                if key.is_empty() {
                    return Err(format!("dimension `{}` has an empty label", d.name));
                }
                if !labels.insert(key) {
                    return Err(format!("label `{l}` is used more than once"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    High,
}

/// Grid order used for persona ids p1..p4.
pub const GRID: [(Level, Level); 4] = [
    (Level::Low, Level::Low),
    (Level::Low, Level::High),
    (Level::High, Level::Low),
    (Level::High, Level::High),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Generated,
    Manual,
}

/// The eight descriptive fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaDetails {
    pub name: String,
    pub summary: String,
    pub background: String,
    pub motivation: String,
    pub pain_point: String,
    pub need: String,
    pub quote: String,
    pub rationale: String,
}

impl PersonaDetails {
    fn fields(&self) -> [(&'static str, &str); 8] {
        [
            ("name", &self.name),
            ("summary", &self.summary),
            ("background", &self.background),
            ("motivation", &self.motivation),
            ("pain_point", &self.pain_point),
            ("need", &self.need),
            ("quote", &self.quote),
            ("rationale", &self.rationale),
        ]
    }

    /// First empty field, by name.
    pub fn validate(&self) -> Result<(), PersonaError> {
        match self.fields().iter().find(|(_, v)| v.trim().is_empty()) {
            Some((name, _)) => Err(PersonaError::EmptyField((*name).to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub name: String,
    pub summary: String,
    pub background: String,
    pub motivation: String,
    pub pain_point: String,
    pub need: String,
    pub quote: String,
    pub rationale: String,
    /// Levels on the two dimensions; `None` for manual personas.
    pub coords: Option<(Level, Level)>,
    pub avatar: AssetRef,
    pub origin: Origin,
}

impl Persona {
    fn from_details(id: String, d: PersonaDetails, coords: Option<(Level, Level)>, avatar: AssetRef, origin: Origin) -> Self {
        Persona {
            id,
            name: d.name,
            summary: d.summary,
            background: d.background,
            motivation: d.motivation,
            pain_point: d.pain_point,
            need: d.need,
            quote: d.quote,
            rationale: d.rationale,
            coords,
            avatar,
            origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PersonaDraft {
    #[serde(flatten)]
    pub details: PersonaDetails,
    pub coords: (Level, Level),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PersonaReply {
    pub personas: Vec<PersonaDraft>,
}

impl ResponseSchema for PersonaReply {
    const SCHEMA_ID: &'static str = TAG_BUILD;

    fn check(&self) -> Result<(), String> {
        if self.personas.len() != 4 {
            return Err(format!("expected exactly 4 personas, got {}", self.personas.len()));
        }
        let coords: BTreeSet<_> = self.personas.iter().map(|p| p.coords).collect();
        if coords.len() != 4 {
            return Err("persona coords must cover all four low/high combinations".into());
        }
        for p in &self.personas {
            p.details.validate().map_err(|e| e.to_string())?;
            if p.details.name.split_whitespace().count() != 2 {
                return Err(format!("persona name `{}` must be exactly two words", p.details.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSet {
    pub personas: Vec<Persona>,
    pub dimensions: (SteerableDimension, SteerableDimension),
}

impl PersonaSet {
    pub fn get(&self, id: &str) -> Option<&Persona> {
        self.personas.iter().find(|p| p.id == id)
    }

    pub fn generated(&self) -> impl Iterator<Item = &Persona> {
        self.personas.iter().filter(|p| p.origin == Origin::Generated)
    }

    /// Checks the grid invariant: four generated personas in grid order,
    /// manual ones after.
    pub fn validate(&self) -> Result<(), String> {
        let generated: Vec<_> = self.generated().collect();
        if generated.len() != 4 {
            return Err(format!("{} generated personas, expected 4", generated.len()));
        }
        for (p, want) in self.personas.iter().take(4).zip(GRID) {
            if p.origin != Origin::Generated || p.coords != Some(want) {
                return Err(format!("persona `{}` is out of grid order", p.id));
            }
        }
        let ids: BTreeSet<_> = self.personas.iter().map(|p| &p.id).collect();
        if ids.len() != self.personas.len() {
            return Err("persona ids are not unique".into());
        }
        Ok(())
    }
}

pub fn avatar_prompt(name: &str) -> String {
    format!("Cartoon-style avatar portrait of a person described as \"{name}\", flat colors, friendly face, plain background")
}

pub fn generate_avatar(gw: &Gateway, name: &str) -> Result<AssetRef, GatewayError> {
    gw.generate_image(TAG_AVATAR, &avatar_prompt(name))
}

const EXTRACT_SYSTEM: &str = "You read marketing briefs. Extract the high-level marketing goal as one line, \
a short description of the target audience, and any explicit constraints. If pages are attached as images, \
also transcribe their text into `transcription`.";

pub fn extract_brief(gw: &Gateway, brief: &MarketingBrief) -> Result<BriefExtract, PersonaError> {
    brief.validate()?;
    let text = brief.text();
    if !gw.has_chat() {
        return Ok(heuristic_extract(&text));
    }
    let mut req = ModelRequest::new(TAG_EXTRACT, BriefExtraction::SCHEMA_ID)
        .system(format!("{EXTRACT_SYSTEM}\n{JSON_ONLY}\nShape: {{\"goal\": str, \"audience_summary\": str, \"constraints\": [str], \"transcription\": str|null}}"))
        .temperature(0.2);
    for (i, page) in brief.pages.iter().enumerate() {
        match page {
            BriefPage::Text(t) => req.user_parts.push(UserPart::Text(format!("Brief page {}:\n{t}", i + 1))),
            BriefPage::Image(r) => {
                let img = gw.assets().get(r).ok_or(PersonaError::MissingPage(i + 1))?;
                req.user_parts.push(UserPart::Image(img));
            }
        }
    }
    let (reply, _) = gw.complete::<BriefExtraction>(&req, &|_| Ok(()))?;
    let mut raw_text = text;
    if brief.has_images() {
        if let Some(t) = reply.transcription.filter(|t| !t.trim().is_empty()) {
            if !raw_text.is_empty() {
                raw_text.push_str("\n\n");
            }
            raw_text.push_str(t.trim());
        }
    }
    if raw_text.trim().is_empty() {
        return Err(PersonaError::InvalidBrief("no text could be read from the brief".into()));
    }
    Ok(BriefExtract {
        goal: reply.goal.trim().to_string(),
        audience_summary: reply.audience_summary.trim().to_string(),
        constraints: reply.constraints,
        raw_text,
    })
}

const DIMENSIONS_SYSTEM: &str = "You design audience personas. Return two steerable audience dimensions: \
attributes that can be set lower or higher, whose extremes stay compatible with every audience description \
in the brief. Prefer dimensions the brief itself mentions and mark those with from_brief=true; otherwise \
propose dimensions relevant to the campaign. All four labels must be distinct.";

pub fn derive_dimensions(gw: &Gateway, extract: &BriefExtract) -> Result<(SteerableDimension, SteerableDimension), PersonaError> {
    if !gw.has_chat() {
        return Ok(heuristic_dimensions());
    }
    let req = ModelRequest::new(TAG_DIMENSIONS, DimensionReply::SCHEMA_ID)
        .system(format!(
            "{DIMENSIONS_SYSTEM}\n{JSON_ONLY}\nShape: {{\"dimensions\": [{{\"name\": str, \"low_label\": str, \"high_label\": str, \"from_brief\": bool}}, ...2]}}"
        ))
        .text(grounding(extract))
        .temperature(0.4);
    let (reply, _) = gw.complete::<DimensionReply>(&req, &|_| Ok(()))?;
    let mut dims = reply.dimensions.into_iter().map(|d| SteerableDimension {
        name: d.name.trim().to_string(),
        low_label: d.low_label.trim().to_string(),
        high_label: d.high_label.trim().to_string(),
        source: if d.from_brief {
            DimensionSource::FromBrief
        } else {
            DimensionSource::Generated
        },
    });
    let a = dims.next().expect("checked length");
    let b = dims.next().expect("checked length");
    Ok((a, b))
}

const BUILD_SYSTEM: &str = "You write audience personas for a poster campaign. Create four personas, one \
for each combination of the two dimension extremes. Each persona has: name (a two-word description), \
summary (one line), background, motivation, pain_point, need, quote (one line) and rationale (one line on \
how this perspective helps the poster design). Use details from the brief.";

pub fn build_personas(
    gw: &Gateway,
    extract: &BriefExtract,
    dims: &(SteerableDimension, SteerableDimension),
) -> Result<PersonaSet, PersonaError> {
    let drafts = if gw.has_chat() {
        let req = ModelRequest::new(TAG_BUILD, PersonaReply::SCHEMA_ID)
            .system(format!(
                "{BUILD_SYSTEM}\n{JSON_ONLY}\nShape: {{\"personas\": [{{\"name\", \"summary\", \"background\", \"motivation\", \
                 \"pain_point\", \"need\", \"quote\", \"rationale\": str, \"coords\": [\"low\"|\"high\", \"low\"|\"high\"]}}, ...4]}}"
            ))
            .text(grounding(extract))
            .text(describe_dimensions(dims))
            .temperature(0.8);
        gw.complete::<PersonaReply>(&req, &|_| Ok(()))?.0.personas
    } else {
        heuristic_personas(extract, dims)
    };
    let mut drafts = drafts;
    drafts.sort_by_key(|d| GRID.iter().position(|g| *g == d.coords).expect("grid covers every pair"));
    let prompts: Vec<String> = drafts.iter().map(|d| avatar_prompt(&d.details.name)).collect();
    let avatars = gw.generate_images(TAG_AVATAR, &prompts);
    let mut personas = Vec::with_capacity(4);
    for (i, (draft, avatar)) in drafts.into_iter().zip(avatars).enumerate() {
        let mut details = draft.details;
        details.name = details.name.split_whitespace().collect::<Vec<_>>().join(" ");
        personas.push(Persona::from_details(format!("p{}", i + 1), details, Some(draft.coords), avatar?, Origin::Generated));
    }
    Ok(PersonaSet {
        personas,
        dimensions: dims.clone(),
    })
}

fn describe_dimensions(dims: &(SteerableDimension, SteerableDimension)) -> String {
    let (a, b) = dims;
    format!(
        "Dimension 1: {} (low = {}, high = {})\nDimension 2: {} (low = {}, high = {})\n\
         coords[0] is the level on dimension 1, coords[1] the level on dimension 2.",
        a.name, a.low_label, a.high_label, b.name, b.low_label, b.high_label
    )
}

/// Appends a user-written persona with a fresh `m<n>` id.
pub fn add_manual_persona(gw: &Gateway, set: &PersonaSet, details: PersonaDetails) -> Result<PersonaSet, PersonaError> {
    details.validate()?;
    let n = (1..)
        .find(|n| set.get(&format!("m{n}")).is_none())
        .expect("unbounded");
    let avatar = generate_avatar(gw, details.name.trim())?;
    let mut out = set.clone();
    out.personas.push(Persona::from_details(format!("m{n}"), details, None, avatar, Origin::Manual));
    Ok(out)
}

/// Extraction, dimensions and personas in one call.
pub fn construct_panel(gw: &Gateway, brief: &MarketingBrief) -> Result<(BriefExtract, PersonaSet), PersonaError> {
    let extract = extract_brief(gw, brief)?;
    let dims = derive_dimensions(gw, &extract)?;
    let set = build_personas(gw, &extract, &dims)?;
    Ok((extract, set))
}

fn labelled_line<'a>(text: &'a str, keys: &[&str]) -> Option<&'a str> {
    text.lines().find_map(|line| {
        let l = line.trim().trim_start_matches(['-', '*', '#', ' ']);
        let (head, rest) = l.split_once(':')?;
        let head = head.trim().to_lowercase();
        (keys.iter().any(|k| head.contains(k)) && !rest.trim().is_empty()).then(|| rest.trim())
    })
}

fn heuristic_extract(text: &str) -> BriefExtract {
    let first_line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("Promote the campaign");
    let goal = labelled_line(text, &["goal", "objective", "purpose"]).unwrap_or(first_line);
    let audience = labelled_line(text, &["audience", "target"]).unwrap_or("");
    let constraints = text
        .lines()
        .filter(|l| {
            let l = l.to_lowercase();
            l.contains("must") || l.contains("constraint") || l.contains("avoid")
        })
        .map(|l| l.trim().to_string())
        .collect();
    BriefExtract {
        goal: goal.to_string(),
        audience_summary: audience.to_string(),
        constraints,
        raw_text: text.to_string(),
    }
}

fn heuristic_dimensions() -> (SteerableDimension, SteerableDimension) {
    (
        SteerableDimension {
            name: "visit frequency".into(),
            low_label: "occasional".into(),
            high_label: "frequent".into(),
            source: DimensionSource::Generated,
        },
        SteerableDimension {
            name: "spending attitude".into(),
            low_label: "saver".into(),
            high_label: "splurger".into(),
            source: DimensionSource::Generated,
        },
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn heuristic_personas(extract: &BriefExtract, dims: &(SteerableDimension, SteerableDimension)) -> Vec<PersonaDraft> {
    let label = |d: &SteerableDimension, l: Level| match l {
        Level::Low => d.low_label.clone(),
        Level::High => d.high_label.clone(),
    };
    GRID.iter()
        .map(|&(l1, l2)| {
            let (a, b) = (label(&dims.0, l1), label(&dims.1, l2));
            let first = |s: &str| capitalize(s.split_whitespace().next().unwrap_or("Audience"));
            let last = |s: &str| capitalize(s.split_whitespace().last().unwrap_or("Member"));
            PersonaDraft {
                details: PersonaDetails {
                    name: format!("{} {}", first(&a), last(&b)),
                    summary: format!("A {a}, {b} member of the target audience."),
                    background: format!("Sits at the {a} end of {} and the {b} end of {}.", dims.0.name, dims.1.name),
                    motivation: format!("Wants the campaign to speak to them: {}", extract.goal),
                    pain_point: "Ignores posters that feel generic or unclear.".into(),
                    need: "A clear message and a reason to act.".into(),
                    quote: format!("Show me why this is for someone {a} like me."),
                    rationale: format!("Represents the {a} and {b} part of the audience."),
                },
                coords: (l1, l2),
            }
        })
        .collect()
}
