pub mod dynamics;
pub mod env;
pub mod eval;
pub mod geom;
pub mod interface;
pub mod perception;
pub mod policy;
pub mod ppo;
pub mod randomization;
pub mod rewards;
