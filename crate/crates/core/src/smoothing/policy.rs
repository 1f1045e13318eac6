use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{precompute_target_table, validate_mass, SmoothingConfig, SynonymLexicon, TargetTable};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// The smoothing half of a run: `s`, `t` and the synonym flag `w`, each
/// optional. `t` requires `s`, and `w` is present exactly when `t` is.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub s: Option<f64>,
    pub t: Option<f64>,
    pub w: Option<bool>,
}

impl SmoothingSpec {
    pub const HARD: Self = Self {
        s: None,
        t: None,
        w: None,
    };

    pub fn uniform(s: f64) -> Self {
        Self {
            s: Some(s),
            t: None,
            w: None,
        }
    }

    pub fn semantic(s: f64, t: f64, w: bool) -> Self {
        Self {
            s: Some(s),
            t: Some(t),
            w: Some(w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.is_some() && self.s.is_none() {
            return Err(Error::Config("a similarity threshold requires a smoothing mass".into()));
        }
        if self.w.is_some() != self.t.is_some() {
            return Err(Error::Config(
                "the synonym flag is set exactly when a similarity threshold is".into(),
            ));
        }
        if let Some(s) = self.s {
            validate_mass(s)?;
        }
        if let Some(t) = self.t {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold t = {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Name of the registered policy this spec selects.
    pub fn policy_name(&self) -> &'static str {
        match (self.s, self.t) {
            (None, _) => HardTargets::NAME,
            (Some(_), None) => UniformSmoothing::NAME,
            (Some(_), Some(_)) => SemanticSmoothing::NAME,
        }
    }
}

/// Data a policy may draw on when building its table.
#[derive(Clone, Copy)]
pub struct PolicyInputs<'a> {
    pub vocab: &'a Vocabulary,
    pub embeddings: Option<&'a EmbeddingMatrix>,
    pub lexicon: Option<&'a SynonymLexicon>,
}

/// A way of turning each correct label into a target distribution.
pub trait TargetPolicy: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn build_table(&self, inputs: &PolicyInputs<'_>) -> Result<TargetTable>;
}

#[derive(Debug, Clone, Copy)]
pub struct HardTargets;

impl HardTargets {
    pub const NAME: &'static str = "hard";
}

impl TargetPolicy for HardTargets {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn build_table(&self, inputs: &PolicyInputs<'_>) -> Result<TargetTable> {
        Ok(TargetTable::one_hot(inputs.vocab.len()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformSmoothing {
    pub s: f64,
}

impl UniformSmoothing {
    pub const NAME: &'static str = "uniform";
}

impl TargetPolicy for UniformSmoothing {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn build_table(&self, inputs: &PolicyInputs<'_>) -> Result<TargetTable> {
        TargetTable::uniform(inputs.vocab.len(), self.s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticSmoothing {
    pub config: SmoothingConfig,
}

impl SemanticSmoothing {
    pub const NAME: &'static str = "semantic";
}

impl TargetPolicy for SemanticSmoothing {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn build_table(&self, inputs: &PolicyInputs<'_>) -> Result<TargetTable> {
        let embeddings = inputs
            .embeddings
            .ok_or_else(|| Error::Config("similarity-weighted smoothing needs embeddings".into()))?;
        precompute_target_table(inputs.vocab, embeddings, &self.config, inputs.lexicon)
    }
}

type PolicyFactory = fn(&SmoothingSpec) -> Result<Box<dyn TargetPolicy>>;

/// Name → constructor map for target policies.
pub struct PolicyRegistry {
    factories: BTreeMap<&'static str, PolicyFactory>,
}

impl fmt::Debug for PolicyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

fn make_hard(_: &SmoothingSpec) -> Result<Box<dyn TargetPolicy>> {
    Ok(Box::new(HardTargets))
}

fn make_uniform(spec: &SmoothingSpec) -> Result<Box<dyn TargetPolicy>> {
    let s = spec
        .s
        .ok_or_else(|| Error::Config("uniform smoothing needs s".into()))?;
    validate_mass(s)?;
    Ok(Box::new(UniformSmoothing { s }))
}

fn make_semantic(spec: &SmoothingSpec) -> Result<Box<dyn TargetPolicy>> {
    let (Some(s), Some(t)) = (spec.s, spec.t) else {
        return Err(Error::Config("similarity-weighted smoothing needs s and t".into()));
    };
    let config = SmoothingConfig::semantic(s, t, spec.w.unwrap_or(false));
    config.validate()?;
    Ok(Box::new(SemanticSmoothing { config }))
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut registry = Self {
            factories: BTreeMap::new(),
        };
        registry.register(HardTargets::NAME, make_hard);
        registry.register(UniformSmoothing::NAME, make_uniform);
        registry.register(SemanticSmoothing::NAME, make_semantic);
        registry
    }
}

impl PolicyRegistry {
    pub fn register(&mut self, name: &'static str, factory: PolicyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, spec: &SmoothingSpec) -> Result<Box<dyn TargetPolicy>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("no target policy named `{name}`")))?;
        factory(spec)
    }

    /// Validate `spec` and build the policy it selects.
    pub fn resolve(&self, spec: &SmoothingSpec) -> Result<Box<dyn TargetPolicy>> {
        spec.validate()?;
        self.create(spec.policy_name(), spec)
    }
}
