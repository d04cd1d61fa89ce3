use std::collections::BTreeMap;
use std::sync::Arc;

use super::ContextualEncoder;
use crate::error::{Error, Result};
use crate::synthetic::{self, TinyModelSpec};

type Loader = Box<dyn Fn(&str) -> Result<ContextualEncoder> + Send + Sync>;

/// Resolves `scheme:argument` model identifiers to encoders.
///
/// Built-in schemes:
/// * `file:<path>`: an encoder saved with [`ContextualEncoder::save`].
/// * `builtin-tiny[:key=value,...]`: the small masked LM pretrained on the
///   planted-bias synthetic corpus (keys: `seed`, `hidden`, `layers`, `epochs`).
/// * `stub[:hidden=N,seed=S]`: context-free embedder over the synthetic
///   vocabulary with a uniform masked-LM head.
pub struct ModelRegistry {
    loaders: BTreeMap<String, Loader>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("file", |path| ContextualEncoder::load(path));
        r.register("builtin-tiny", |args| {
            let spec = TinyModelSpec::parse(args)?;
            synthetic::pretrain_tiny_model(&spec)
        });
        r.register("stub", |args| {
            let kv = parse_kv(args)?;
            let hidden = kv_get(&kv, "hidden", 8usize)?;
            let seed = kv_get(&kv, "seed", 0u64)?;
            let vocab = synthetic::SyntheticWorld::new(&crate::lexicon::Lexicon::builtin(), 0).vocabulary();
            Ok(ContextualEncoder::stub(format!("stub:hidden={hidden},seed={seed}"), Arc::new(vocab), hidden, seed))
        });
        r
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            loaders: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, scheme: &str, loader: F)
    where
        F: Fn(&str) -> Result<ContextualEncoder> + Send + Sync + 'static,
    {
        self.loaders.insert(scheme.to_string(), Box::new(loader));
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.loaders.keys().map(String::as_str)
    }

    pub fn resolve(&self, identifier: &str) -> Result<ContextualEncoder> {
        let (scheme, arg) = identifier.split_once(':').unwrap_or((identifier, ""));
        let loader = self
            .loaders
            .get(scheme)
            .ok_or_else(|| Error::UnknownModel(identifier.to_string()))?;
        let mut enc = loader(arg)?;
        if scheme != "file" {
            enc.set_identifier(identifier);
        }
        Ok(enc)
    }
}

/// Parses `a=1,b=2` into a map. Empty input gives an empty map.
pub(crate) fn parse_kv(args: &str) -> Result<BTreeMap<String, String>> {
    args.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

pub(crate) fn kv_get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        None => Ok(default),
    }
}
