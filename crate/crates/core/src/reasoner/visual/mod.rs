//! Plot-based anchor extraction: prompts, the HTTP client, response validation and the
//! offline oracle.

pub mod anchor;
pub mod oracle;
pub mod parse;
pub mod prompt;
pub mod vlm;

pub use anchor::{Anchor, AnchorExtras, AnchorSet, AnomalyScore, ImputedValue, TauMap};
pub use oracle::{offline_anchor_oracle, oracle_anchors};
pub use parse::{parse_anchor_response, ParseConfig};
pub use prompt::{build_prompt, AnchorRanges, Prompt};
pub use vlm::{query_vlm, VlmConfig, VlmRequest};
