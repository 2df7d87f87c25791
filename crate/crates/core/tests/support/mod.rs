#![allow(dead_code)]

pub mod gradchecks;
pub mod oracles;
