//! Library half of the `gridbox` command: output rendering, exit-code
//! classification and federation bootstrapping.

pub mod exit;
pub mod federation;
pub mod render;
