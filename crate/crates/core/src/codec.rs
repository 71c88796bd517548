//! Named serialization codecs for values that cross the network.
//!
//! Codecs map payloads to and from JSON values. Client/session crossing nodes
//! refer to codecs by name; names are resolved when the graph is finalized.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::value::{ClientChange, ClientToken, Data, Val, ValueType};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("codec `{0}` is already registered")]
    Duplicate(String),
    #[error("codec `{0}` is not registered")]
    Unknown(String),
    #[error("codec `{codec}` cannot encode value: {reason}")]
    Encode { codec: String, reason: String },
    #[error("codec `{codec}` cannot decode payload: {reason}")]
    Decode { codec: String, reason: String },
}

type EncodeFn = Arc<dyn Fn(&Val) -> Result<serde_json::Value, String> + Send + Sync>;
type DecodeFn = Arc<dyn Fn(&serde_json::Value) -> Result<Val, String> + Send + Sync>;

/// A named, typed JSON codec.
#[derive(Clone)]
pub struct Codec {
    name: String,
    ty: ValueType,
    encode: EncodeFn,
    decode: DecodeFn,
}

impl Codec {
    /// A codec backed by the type's serde implementation.
    pub fn json<T: Data + Serialize + DeserializeOwned>(name: impl Into<String>) -> Self {
        Codec::custom::<T>(
            name,
            |v: &T| serde_json::to_value(v).map_err(|e| e.to_string()),
            |j| T::deserialize(j).map_err(|e| e.to_string()),
        )
    }

    pub fn custom<T: Data>(
        name: impl Into<String>,
        encode: impl Fn(&T) -> Result<serde_json::Value, String> + Send + Sync + 'static,
        decode: impl Fn(&serde_json::Value) -> Result<T, String> + Send + Sync + 'static,
    ) -> Self {
        Codec {
            name: name.into(),
            ty: ValueType::of::<T>(),
            encode: Arc::new(move |v| encode(v.downcast_ref::<T>())),
            decode: Arc::new(move |j| decode(j).map(Val::new)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value_type(&self) -> ValueType {
        self.ty
    }

    pub fn encode(&self, value: &Val) -> Result<serde_json::Value, CodecError> {
        (self.encode)(value).map_err(|reason| CodecError::Encode {
            codec: self.name.clone(),
            reason,
        })
    }

    pub fn decode(&self, payload: &serde_json::Value) -> Result<Val, CodecError> {
        (self.decode)(payload).map_err(|reason| CodecError::Decode {
            codec: self.name.clone(),
            reason,
        })
    }
}

impl fmt::Debug for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Codec({}: {})", self.name, self.ty.name)
    }
}

/// Name-indexed set of codecs.
#[derive(Clone, Debug, Default)]
pub struct CodecRegistry {
    codecs: BTreeMap<String, Codec>,
}

impl CodecRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding codecs for the common payload shapes.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.insert(Codec::json::<i64>("i64"));
        r.insert(Codec::json::<u64>("u64"));
        r.insert(Codec::json::<f64>("f64"));
        r.insert(Codec::json::<bool>("bool"));
        r.insert(Codec::json::<String>("string"));
        r.insert(Codec::json::<()>("unit"));
        r.insert(Codec::json::<Vec<i64>>("list<i64>"));
        r.insert(Codec::json::<Vec<String>>("list<string>"));
        r.insert(Codec::json::<Option<i64>>("option<i64>"));
        r.insert(Codec::json::<Option<String>>("option<string>"));
        r.insert(Codec::json::<BTreeMap<String, String>>("map<string,string>"));
        r.insert(Codec::json::<BTreeMap<String, i64>>("map<string,i64>"));
        r.insert(Codec::json::<(i64, i64)>("pair<i64,i64>"));
        r.insert(Codec::json::<ClientToken>("client"));
        r.insert(Codec::json::<ClientChange>("client-change"));
        r.insert(Codec::json::<BTreeSet<ClientToken>>("set<client>"));
        r
    }

    fn insert(&mut self, codec: Codec) {
        self.codecs.insert(codec.name.clone(), codec);
    }

    pub fn register(&mut self, codec: Codec) -> Result<(), CodecError> {
        if self.codecs.contains_key(&codec.name) {
            return Err(CodecError::Duplicate(codec.name));
        }
        self.insert(codec);
        Ok(())
    }

    pub fn register_json<T: Data + Serialize + DeserializeOwned>(
        &mut self,
        name: &str,
    ) -> Result<(), CodecError> {
        self.register(Codec::json::<T>(name))
    }

    pub fn get(&self, name: &str) -> Result<&Codec, CodecError> {
        self.codecs
            .get(name)
            .ok_or_else(|| CodecError::Unknown(name.to_string()))
    }

    /// First codec (in name order) for the given payload type.
    pub fn for_type(&self, ty: ValueType) -> Option<&Codec> {
        self.codecs.values().find(|c| c.ty == ty)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.codecs.keys().map(String::as_str)
    }
}
