#![allow(dead_code)]

pub mod configs;
pub mod gradcheck;
pub mod oracles;
