//! Criterion benchmarks for graph construction, encodings and the model step.
