//! Bidirectional fusion: the `2T x 2T` mask, the row-to-target alignment and
//! a reachability oracle for what each fused row can see.

mod leakage;
mod mask;
mod targets;

pub use leakage::{leakage_check, leakage_check_with_mask, LeakageReport, LeakageViolation};
pub use mask::{build_mask, FusionMask};
pub use targets::{influence_oracle, target_map, Half, Instance, TargetMap};

#[cfg(test)]
mod tests;
