//! SQL lexing, schema-aware token classification, BM25 token bags and
//! template extraction. Lexical only: there is no grammar or AST here.

pub mod lexer;
pub mod template;

pub use lexer::{
    classify, has_top_level_order_by, normalize, render, token_bag, token_bag_with, tokenize,
    tokenize_classified, LexError, SchemaVocab, Token, TokenBag, TokenKind,
};
pub use template::{extract_template, extract_template_with, template_equal, SqlTemplate, TemplateItem};
