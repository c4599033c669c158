//! Holds the `acceptance` test target, which exercises every binsep crate together.
//! Run one criterion with `cargo test -p binsep-validation --test acceptance -- 5`.
