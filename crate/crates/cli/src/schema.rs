//! Published JSON schemas of configuration and output files.

use crate::SchemaKind;

pub const MODEL: &str = include_str!("../schemas/model.schema.json");
pub const SAMPLER: &str = include_str!("../schemas/sampler.schema.json");
pub const SIMULATION: &str = include_str!("../schemas/simulation.schema.json");
pub const SUMMARY: &str = include_str!("../schemas/summary.schema.json");

pub fn schema(kind: SchemaKind) -> &'static str {
    match kind {
        SchemaKind::Model => MODEL,
        SchemaKind::Sampler => SAMPLER,
        SchemaKind::Simulation => SIMULATION,
        SchemaKind::Summary => SUMMARY,
    }
}
