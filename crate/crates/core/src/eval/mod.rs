//! BLEU, token accuracy, the mutual-information gap, and attention maps.

mod attention;
mod bleu;
mod mi;
mod translate;

pub use attention::{extract_attention, write_attention_jsonl, AttentionKind, AttentionMap};
pub use bleu::{bleu, corpus_bleu, BleuReport, BleuStats, MAX_ORDER};
pub use mi::{mi_gap, Joint3, MiGap};
pub use translate::{
    evaluate, token_accuracy, translate, DirectionReport, EvalModality, EvalReport, LENGTH_SLACK,
};
