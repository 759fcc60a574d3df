pub mod config;
pub mod disambiguation;
pub mod eval;
pub mod evidence;
pub mod frame;
pub mod fusion;
pub mod map;
pub mod opinion;
pub mod pipeline;
pub mod synth;
pub mod uncertainty;
