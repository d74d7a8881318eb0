//! Static shape audits: every tensor of a layout and its parameter count,
//! computed from the configuration alone.

use std::fmt;

use super::discriminator::{discriminator_shapes, DiscriminatorConfig};
use super::generator::{generator_shapes, BridgeMode, GeneratorConfig};
use super::params::ParamShape;
use crate::error::Result;

/// Literal-bridge parameter budget above which the audit warns.
pub const DEFAULT_BRIDGE_BUDGET: usize = 50_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeAudit {
    pub entries: Vec<ParamShape>,
    /// Trainable scalars (running statistics excluded).
    pub total_params: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub bridge_params: usize,
    /// Layer holding the most parameters.
    pub dominant_block: String,
    pub dominant_params: usize,
    pub warnings: Vec<String>,
}

impl ShapeAudit {
    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.shape.as_slice())
    }

    pub fn numel(&self, name: &str) -> usize {
        self.shape_of(name).map(|s| s.iter().product()).unwrap_or(0)
    }
}

fn block_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn summarize(entries: &[ParamShape]) -> (usize, String, usize) {
    let mut blocks: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for e in entries.iter().filter(|e| e.kind.trainable()) {
        total += e.numel();
        let b = block_of(&e.name);
        match blocks.iter_mut().find(|(n, _)| n == b) {
            Some((_, c)) => *c += e.numel(),
            None => blocks.push((b.to_string(), e.numel())),
        }
    }
    let (name, count) = blocks.into_iter().max_by_key(|(_, c)| *c).unwrap_or_default();
    (total, name, count)
}

pub fn shape_audit(config: &GeneratorConfig) -> Result<ShapeAudit> {
    shape_audit_with_budget(config, DEFAULT_BRIDGE_BUDGET)
}

pub fn shape_audit_with_budget(config: &GeneratorConfig, bridge_budget: usize) -> Result<ShapeAudit> {
    config.validate()?;
    let entries = generator_shapes(config);
    let (total_params, dominant_block, dominant_params) = summarize(&entries);
    let count = |prefix: &str| {
        entries.iter().filter(|e| e.name.starts_with(prefix) && e.name.ends_with(".weight")).count()
    };
    let bridge_params: usize = entries.iter().filter(|e| block_of(&e.name) == "bridge").map(|e| e.numel()).sum();
    let mut warnings = Vec::new();
    if dominant_block == "bridge" {
        warnings.push(format!(
            "flattening the final decoder features into the bridge dense layer is the dominant parameter block ({bridge_params} of {total_params})"
        ));
    }
    if config.bridge_mode == BridgeMode::Literal && bridge_params > bridge_budget {
        warnings.push(format!(
            "literal bridge holds {bridge_params} parameters, over the budget of {bridge_budget}; consider the compressed bridge"
        ));
    }
    Ok(ShapeAudit {
        encoder_blocks: count("enc"),
        decoder_blocks: count("dec"),
        entries,
        total_params,
        bridge_params,
        dominant_block,
        dominant_params,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorAudit {
    pub entries: Vec<ParamShape>,
    pub total_params: usize,
    /// Side length of the logits map.
    pub output_size: usize,
}

pub fn discriminator_audit(config: &DiscriminatorConfig) -> Result<DiscriminatorAudit> {
    config.validate()?;
    let entries = discriminator_shapes(config);
    let (total_params, _, _) = summarize(&entries);
    Ok(DiscriminatorAudit { entries, total_params, output_size: config.output_size() })
}

impl fmt::Display for ShapeAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:<28} {:?}", e.name, e.shape)?;
        }
        writeln!(f, "encoder blocks: {}  decoder blocks: {}", self.encoder_blocks, self.decoder_blocks)?;
        writeln!(f, "trainable parameters: {}", self.total_params)?;
        writeln!(f, "bridge parameters: {}", self.bridge_params)?;
        writeln!(f, "dominant block: {} ({})", self.dominant_block, self.dominant_params)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}
