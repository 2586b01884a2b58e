//! Holds the end-to-end acceptance suite under `tests/`.
