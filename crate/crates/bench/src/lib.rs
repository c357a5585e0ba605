//! Criterion benchmarks for the leaf engine live in `benches/`.
