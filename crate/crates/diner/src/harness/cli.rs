//! CLI dispatch. (implementation in progress)
pub fn cli_dispatch<I: IntoIterator<Item = String>>(_argv: I) -> i32 { 0 }
