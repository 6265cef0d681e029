//! Experiments. (implementation in progress)
