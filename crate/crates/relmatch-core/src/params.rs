//! Bookkeeping for registering named parameters on a tape and collecting
//! their gradients back out, keeping optimizer and checkpoint code keyed by
//! one canonical set of names.

use crate::diffcore::{Array, NodeId, Tape};
use std::collections::HashMap;

#[derive(Default)]
pub struct ParamBindings {
    named: Vec<(String, NodeId)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tape: &mut Tape, name: impl Into<String>, value: &Array) -> NodeId {
        let id = tape.param(value.clone());
        self.named.push((name.into(), id));
        id
    }

    /// Gradients after backward, zeros for parameters the loss never touched.
    pub fn gradients(&self, tape: &Tape) -> HashMap<String, Array> {
        self.named
            .iter()
            .map(|(name, id)| (name.clone(), tape.grad_or_zeros(*id)))
            .collect()
    }

    pub fn named(&self) -> &[(String, NodeId)] {
        &self.named
    }
}
