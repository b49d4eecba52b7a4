//! Built-in test cases, so `--case ieee14` works without a file on disk.

use crate::error::Result;
use crate::grid::{parse_case, Grid};

pub const IEEE14: &str = include_str!("../cases/ieee14.m");
pub const IEEE30: &str = include_str!("../cases/ieee30.m");
pub const IEEE118: &str = include_str!("../cases/ieee118.m");

/// One line, r = 0.01, x = 0.1, no charging.
pub const TWO_BUS: &str =
    r#"{"name": "two-bus", "buses": [1, 2], "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b": 0.0}]}"#;

pub fn builtin(name: &str) -> Option<&'static str> {
    match name.to_ascii_lowercase().as_str() {
        "ieee14" | "case14" => Some(IEEE14),
        "ieee30" | "case30" => Some(IEEE30),
        "ieee118" | "case118" => Some(IEEE118),
        "two-bus" | "2bus" => Some(TWO_BUS),
        _ => None,
    }
}

/// Resolve a built-in case name, else read `name` as a file path.
pub fn load(name: &str) -> Result<Grid> {
    match builtin(name) {
        Some(text) => parse_case(text),
        None => parse_case(&std::fs::read_to_string(name)?),
    }
}

pub fn two_bus() -> Grid {
    parse_case(TWO_BUS).expect("built-in two-bus case parses")
}
