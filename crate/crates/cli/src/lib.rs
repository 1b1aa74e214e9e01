//! Configuration and stages of the `ctsr` command-line pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;

/// A configuration or argument problem, reported with exit code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Whether an error stems from bad configuration or arguments rather than
/// from running the pipeline.
pub fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(
                e.downcast_ref::<ctsr_core::Error>(),
                Some(ctsr_core::Error::InvalidArgument(_) | ctsr_core::Error::DimMismatch { .. })
            )
    })
}
