use std::collections::HashMap;

use serde::de::DeserializeOwned;
use serde_json::Value;

/// A reply structure the gateway can validate. `check` holds the rules
/// serde cannot express (counts, distinctness, non-empty fields).
pub trait ResponseSchema: DeserializeOwned {
    const SCHEMA_ID: &'static str;

    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

impl ResponseSchema for Value {
    const SCHEMA_ID: &'static str = "any";
}

type Validator = fn(&Value) -> Result<(), String>;

#[derive(Clone, Default)]
pub struct SchemaRegistry {
    validators: HashMap<String, Validator>,
}

fn validate_as<T: ResponseSchema>(v: &Value) -> Result<(), String> {
    let typed: T = serde_json::from_value(v.clone()).map_err(|e| format!("reply does not match `{}`: {e}", T::SCHEMA_ID))?;
    typed.check()
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every reply structure used by the engines.
    pub fn standard() -> Self {
        use crate::{discussion, feedback, persona, theme};
        let mut r = Self::empty();
        r.register::<Value>();
        r.register::<persona::BriefExtraction>();
        r.register::<persona::DimensionReply>();
        r.register::<persona::PersonaReply>();
        r.register::<feedback::FeedbackReply>();
        r.register::<theme::MappingReply>();
        r.register::<theme::OverlapReply>();
        r.register::<discussion::DetectReply>();
        r.register::<discussion::QuestionReply>();
        r.register::<discussion::AnswerReply>();
        r.register::<discussion::ConclusionReply>();
        r
    }

    /// Ids that accept any JSON value.
    pub fn permissive(ids: &[&str]) -> Self {
        let mut r = Self::empty();
        for id in ids {
            r.validators.insert((*id).to_string(), |_| Ok(()));
        }
        r
    }

    pub fn register<T: ResponseSchema>(&mut self) {
        self.validators.insert(T::SCHEMA_ID.to_string(), validate_as::<T>);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.validators.contains_key(id)
    }

    pub fn validate(&self, id: &str, v: &Value) -> Result<(), String> {
        match self.validators.get(id) {
            Some(f) => f(v),
            None => Err(format!("schema `{id}` is not registered")),
        }
    }
}
