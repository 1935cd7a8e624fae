//! Shipped demo configs, embedded at build time.

use crate::config::{ConfigError, RunConfig};

pub const DEMOS: [(&str, &str); 3] = [
    ("lqr-1d", include_str!("../configs/lqr-1d.toml")),
    ("lqr-2d", include_str!("../configs/lqr-2d.toml")),
    ("academic-burgers", include_str!("../configs/academic-burgers.toml")),
];

pub fn demo_names() -> impl Iterator<Item = &'static str> {
    DEMOS.iter().map(|(name, _)| *name)
}

pub fn demo_source(name: &str) -> Option<&'static str> {
    DEMOS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// `None` for an unknown name.
pub fn demo_config(name: &str) -> Option<Result<RunConfig, ConfigError>> {
    demo_source(name).map(RunConfig::from_toml)
}
