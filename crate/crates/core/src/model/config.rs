use serde::{Deserialize, Serialize};

/// How intersection and union nodes are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogicalMode {
    /// Transformer logical encoder with type-aware bias.
    TabEncoder,
    /// Product t-norm / t-conorm in sigmoid space, no parameters.
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cardinality {
    /// Two operands per encoder pass, folded left over the children.
    Pairwise,
    /// All operands in one pass.
    Variadic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Cosine similarity between the answer embedding and entity-table rows.
    Cosine,
    /// Decoder logits.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    /// Two-layer MLP `d → d → |E|`.
    Mlp,
    /// Inner product with the entity table.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub logical: LogicalMode,
    pub cardinality: Cardinality,
    pub positional: Positional,
    pub score: ScoreMode,
    pub decoder: DecoderMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training instances scored each epoch for the log; 0 disables.
    pub log_mrr_sample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.0,
            logical: LogicalMode::TabEncoder,
            cardinality: Cardinality::Pairwise,
            positional: Positional::Sinusoidal,
            score: ScoreMode::Cosine,
            decoder: DecoderMode::Mlp,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            log_mrr_sample: 64,
        }
    }

    /// Embedding width 400 and 400 epochs.
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 400,
            heads: 8,
            epochs: 400,
            batch_size: 1024,
            ..ModelConfig::desk()
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
