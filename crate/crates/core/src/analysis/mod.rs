//! Verification and diagnostics on top of the model: gradient checks,
//! block Jacobians, spectral norms, depth profiles and the logit lens.

pub mod gradcheck;
pub mod jacobian;
pub mod lens;
pub mod profile;
pub mod spectral;

pub use gradcheck::{gradcheck_model, gradcheck_suite, loss_and_grad, probe_batch, GradcheckDims, GradcheckResult};
pub use jacobian::{
    assemble_blocks, block_jacobian_assembled, jacobian_bruteforce, jacobian_gap_over_seeds, perturb_norm_scales,
    verify_layer_jacobians, BlockJacobian, JacobianCheck, JacobianLayerRecord, JacobianReport,
};
pub use lens::{lens_for_model, logit_lens_match, LensReport};
pub use profile::{
    contribution_ratio, full_profile, grad_norm_profile, magnitude_profile, mean_row_norm, parse_profile_csv,
    profile_to_csv, stream_contribution_ratios, GradNormProfile, ProfileRow, PROFILE_HEADER,
};
pub use spectral::{spectral_norm, SpectralNorm};
