//! Hook sites and intervention specifications.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// A named activation site inside one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Site {
    /// Token embedding + positional embedding, before layer 0.
    EmbeddingOut,
    /// Residual stream entering layer `layer`.
    ResidualIn { layer: usize },
    /// Attention sublayer output (sum of per-head contributions) at `layer`.
    AttnOut { layer: usize },
    /// One head's residual contribution (its W_O row-block product) at `layer`.
    HeadOut { layer: usize, head: usize },
    /// MLP sublayer output at `layer`.
    MlpOut { layer: usize },
    /// Concatenated [key | value] rows at `layer`; activation length is 2·d.
    Kv { layer: usize },
    /// Final vocabulary logits.
    FinalLogits,
}

impl Site {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Site::ResidualIn { layer }
            | Site::AttnOut { layer }
            | Site::HeadOut { layer, .. }
            | Site::MlpOut { layer }
            | Site::Kv { layer } => Some(layer),
            Site::EmbeddingOut | Site::FinalLogits => None,
        }
    }

    /// Activation vector length at this site.
    pub fn activation_len(&self, d_model: usize, vocab_size: usize) -> usize {
        match self {
            Site::Kv { .. } => 2 * d_model,
            Site::FinalLogits => vocab_size,
            _ => d_model,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Site::EmbeddingOut => "embedding_out".into(),
            Site::ResidualIn { layer } => format!("residual_in({layer})"),
            Site::AttnOut { layer } => format!("attn_out({layer})"),
            Site::HeadOut { layer, head } => format!("head_out({layer},{head})"),
            Site::MlpOut { layer } => format!("mlp_out({layer})"),
            Site::Kv { layer } => format!("kv({layer})"),
            Site::FinalLogits => "final_logits".into(),
        }
    }
}

/// A site plus the sequence positions it selects. Negative positions index
/// from the end, −1 being the last position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookSite {
    pub site: Site,
    pub positions: Vec<i64>,
}

impl HookSite {
    pub fn new(site: Site, positions: Vec<i64>) -> Self {
        HookSite { site, positions }
    }

    pub fn at(site: Site, position: i64) -> Self {
        HookSite { site, positions: vec![position] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EditAction {
    /// Replace the activation with the given vector.
    Replace(Vec<f64>),
    /// Zero the activation.
    Zero,
    /// Add the given delta to the activation.
    Add(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub site: Site,
    pub position: i64,
    pub action: EditAction,
}

/// A set of edits applied during one forward pass; at most one edit per
/// (site, position).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    edits: Vec<Edit>,
}

impl InterventionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn edits(&self) -> &[Edit] {
        &self.edits
    }

    pub fn push(&mut self, site: Site, position: i64, action: EditAction) -> Result<()> {
        if self.edits.iter().any(|e| e.site == site && e.position == position) {
            return Err(Error::DuplicateEdit(format!("{} @ {position}", site.describe())));
        }
        self.edits.push(Edit { site, position, action });
        Ok(())
    }

    pub fn push_hook(&mut self, hook: &HookSite, action: EditAction) -> Result<()> {
        for &p in &hook.positions {
            self.push(hook.site, p, action.clone())?;
        }
        Ok(())
    }

    /// Insert or replace the edit at (site, position); keeps the at-most-one
    /// invariant while letting a patch overlay override a corruption edit at
    /// the same site.
    pub fn set(&mut self, site: Site, position: i64, action: EditAction) {
        if let Some(e) =
            self.edits.iter_mut().find(|e| e.site == site && e.position == position)
        {
            e.action = action;
        } else {
            self.edits.push(Edit { site, position, action });
        }
    }

    /// Merge another spec into this one; duplicate (site, position) pairs error.
    pub fn extend(&mut self, other: &InterventionSpec) -> Result<()> {
        for e in &other.edits {
            self.push(e.site, e.position, e.action.clone())?;
        }
        Ok(())
    }

    /// Resolve negative positions against a sequence length and bounds-check
    /// every edit against the model dimensions.
    pub(crate) fn resolve(
        &self,
        seq_len: usize,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
    ) -> Result<ResolvedEdits> {
        let mut map: HashMap<(Site, usize), EditAction> = HashMap::new();
        for e in &self.edits {
            let pos = if e.position < 0 { seq_len as i64 + e.position } else { e.position };
            if pos < 0 || pos >= seq_len as i64 {
                return Err(Error::SiteOutOfBounds(format!(
                    "{} @ {} (seq_len {seq_len})",
                    e.site.describe(),
                    e.position
                )));
            }
            let layer_ok = match e.site {
                Site::HeadOut { layer, head } => layer < n_layers && head < n_heads,
                ref s => s.layer().map_or(true, |l| l < n_layers),
            };
            if !layer_ok {
                return Err(Error::SiteOutOfBounds(e.site.describe()));
            }
            let want = e.site.activation_len(d_model, vocab_size);
            match &e.action {
                EditAction::Replace(v) | EditAction::Add(v) if v.len() != want => {
                    return Err(Error::EditShapeMismatch { got: v.len(), want });
                }
                _ => {}
            }
            if map.insert((e.site, pos as usize), e.action.clone()).is_some() {
                return Err(Error::DuplicateEdit(format!("{} @ {pos}", e.site.describe())));
            }
        }
        Ok(ResolvedEdits { map })
    }
}

/// Edits with positions resolved; lookup only, never iterated, so the map's
/// internal order cannot affect results.
pub(crate) struct ResolvedEdits {
    map: HashMap<(Site, usize), EditAction>,
}

impl ResolvedEdits {
    pub(crate) fn apply(&self, site: Site, pos: usize, row: &mut [f64]) {
        if let Some(action) = self.map.get(&(site, pos)) {
            match action {
                EditAction::Replace(v) => row.copy_from_slice(v),
                EditAction::Zero => row.fill(0.0),
                EditAction::Add(delta) => {
                    for (r, d) in row.iter_mut().zip(delta) {
                        *r += d;
                    }
                }
            }
        }
    }
}
