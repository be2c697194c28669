//! Reference implementations and checkers shared by several test targets.
#![allow(dead_code)]

pub mod grad;
pub mod refs;
pub mod scenes;
