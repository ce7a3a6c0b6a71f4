//! Criterion benchmarks for the hot paths of `adm-core`; see `benches/`.
