//! Client-side helpers for the `bdb` binary: the wire client and the
//! request template store.

pub mod template;
pub mod wire;
