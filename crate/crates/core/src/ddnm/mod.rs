//! Zero-shot projection super-resolution with a diffusion prior constrained
//! to the null space of the degradation operator.

mod denoiser;
mod operator;
mod pas;
mod sampler;
mod schedule;

pub use denoiser::{
    decode_request, decode_response, encode_request, encode_response, read_frame, Denoiser, ExternalDenoiser,
    IntensityMap, OracleDenoiser, ShrinkageDenoiser, MAX_FRAME_BYTES,
};
pub use operator::{bilinear_upsample, ddnm_plus_project, ddnm_plus_scale, ddnm_project, DegradationOp};
pub use pas::{pas_deltas, pas_init, pas_select_tstart, select_from_deltas, PasConfig, PasNorm, TStartRecord};
pub use sampler::{ddim_ddnm_sample, sr_projection_set, SampleResult, SamplerConfig};
pub use schedule::NoiseSchedule;
