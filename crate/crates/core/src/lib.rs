//! Draft-Refine-Optimize toolkit for natural-language-to-MongoDB-query research.

pub mod curriculum;
pub mod engine;
pub mod evidence;
pub mod generator;
pub mod gspo;
pub mod mql;
pub mod orchestrator;
pub mod schema;
pub mod synthesis;
pub mod verdict;
