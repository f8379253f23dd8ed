use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

/// Which inputs the query tower reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Caption tokens only.
    Text,
    /// Caption tokens followed by one trace box per token.
    TextTrace,
    /// Trace boxes only; the caption is masked out.
    TraceOnly,
}

impl QueryMode {
    pub fn uses_text(self) -> bool {
        !matches!(self, QueryMode::TraceOnly)
    }

    pub fn uses_traces(self) -> bool {
        !matches!(self, QueryMode::Text)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Text => "text",
            QueryMode::TextTrace => "text-trace",
            QueryMode::TraceOnly => "trace-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(QueryMode::Text),
            "text-trace" => Some(QueryMode::TextTrace),
            "trace-only" => Some(QueryMode::TraceOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Image tower depth (L).
    pub image_layers: usize,
    /// Query tower depth (M).
    pub text_layers: usize,
    pub heads: usize,
    /// Transformer feed-forward width.
    pub filter: usize,
    /// Hidden width of the IRE/TTE/TBE MLPs.
    pub embed_hidden: usize,
    pub pooler_hidden: usize,
    /// Final embedding width (E) shared by both towers.
    pub embed_dim: usize,
    pub dropout: f64,
    pub global_dim: usize,
    pub region_dim: usize,
    /// Query length (K).
    pub max_tokens: usize,
    /// Region slots per image (N), excluding the global entry.
    pub regions: usize,
    pub query_mode: QueryMode,
    /// 1D position embeddings in TTE/TBE.
    pub use_positions: bool,
    /// 2D location embedding in IRE.
    pub use_locations: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10_000,
            d_model: 64,
            image_layers: 2,
            text_layers: 2,
            heads: 4,
            filter: 256,
            embed_hidden: 128,
            pooler_hidden: 256,
            embed_dim: 256,
            dropout: 0.1,
            global_dim: 64,
            region_dim: 64,
            max_tokens: 64,
            regions: 16,
            query_mode: QueryMode::TextTrace,
            use_positions: true,
            use_locations: true,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("image_layers", self.image_layers),
            ("text_layers", self.text_layers),
            ("heads", self.heads),
            ("filter", self.filter),
            ("embed_hidden", self.embed_hidden),
            ("pooler_hidden", self.pooler_hidden),
            ("embed_dim", self.embed_dim),
            ("global_dim", self.global_dim),
            ("region_dim", self.region_dim),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0) {
            return Err("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Query sequence length fed to the text tower.
    pub fn query_len(&self) -> usize {
        match self.query_mode {
            QueryMode::TextTrace => 2 * self.max_tokens,
            _ => self.max_tokens,
        }
    }
}
