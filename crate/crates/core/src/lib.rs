//! Multi-domain soft reinforcement learning treated as a multi-objective
//! problem: every domain is one objective, uncertainty over domains is a
//! preference, and uncertainty-aware policies are coverage sets over the
//! preference simplex.

pub mod dp_solvers;
pub mod envs;
pub mod harness;
pub mod linalg;
pub mod osi;
pub mod pmomdp;
pub mod report;
pub mod rl_loop;
pub mod seeding;
pub mod unscented;
pub mod utility;
