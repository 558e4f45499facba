//! Criterion benchmark harness for the core engine; see `benches/`.
