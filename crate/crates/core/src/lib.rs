//! Taxonomy-guided hypernym ranking for short financial terms.
//!
//! The pipeline augments terms with acronym expansions and glossary
//! definitions, turns a label hierarchy into graded similarity pairs, trains
//! a projection head over sentence vectors and ranks the 17 labels for each
//! term by cosine similarity.

pub mod acronym;
pub mod corpus;
pub mod embed;
pub mod glossary;
pub mod jsonl;
pub mod pairgen;
pub mod rankeval;
pub mod simtrain;
pub mod taxonomy;
pub mod textnorm;
