//! Configurations, group actions and alignment.

mod align;
mod config;
pub mod hungarian;
mod random;

pub use align::{
    apply_group_action, apply_group_action_mean_free, determinant, equivariant_cost, euclidean_cost,
    kabsch_rotation, optimal_permutation, orthogonality_defect, Alignment, ORTHO_TOL,
};
pub(crate) use align::{align_views, sq_dist_views};
#[cfg(test)]
pub(crate) use align::act;
pub use config::{
    project_mean_free, remove_center, Configuration, MeanFreeConfiguration, ParticleTyping, MEAN_FREE_TOL,
};
pub use random::{random_orthogonal, random_permutation, rotation_2d, small_rotation_3d};
