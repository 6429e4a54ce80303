//! Multiple-instance image/text retrieval datasets from document layouts,
//! plus contrastive adapter training and Recall@K evaluation.

pub mod bagger;
pub mod dedup;
pub mod embedstore;
pub mod layout;
pub mod milopt;
pub mod pipeline;
pub mod retrieval;
pub mod splits;
pub mod synth;
pub mod textmerge;
pub mod unionfind;

/// Corpus-wide key of a text block or image: `<doc_id>/<item_id>`.
pub fn item_key(doc_id: &str, item_id: &str) -> String {
    format!("{doc_id}/{item_id}")
}
