// each test binary uses a different subset
#![allow(dead_code)]

pub mod checks;
pub mod grad;
