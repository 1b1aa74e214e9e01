//! Example external denoiser: reads request frames on stdin and answers
//! each with a blurred, rescaled image on stdout.
//!
//! Usage: `ctsr-blur-denoiser [BLUR_STD]` (default 2.0 pixels).

use std::io::{BufReader, BufWriter, Write};

use anyhow::Context;
use ctsr_core::ddnm::{
    decode_request, encode_response, read_frame, Denoiser, IntensityMap, NoiseSchedule, ShrinkageDenoiser,
};
use ctsr_core::projector::Projection;

fn main() -> anyhow::Result<()> {
    let blur_std: f64 = match std::env::args().nth(1) {
        Some(a) => a.parse().with_context(|| format!("bad blur std {a:?}"))?,
        None => 2.0,
    };
    let denoiser = ShrinkageDenoiser { blur_std };
    let schedule = NoiseSchedule::default();
    let mut input = BufReader::new(std::io::stdin().lock());
    let mut output = BufWriter::new(std::io::stdout().lock());
    while let Some(body) = read_frame(&mut input)? {
        let (t, dims, data) = decode_request(&body)?;
        let t = usize::try_from(t).context("negative timestep")?;
        let x_t = Projection::new(dims, data.into_iter().map(f64::from).collect(), 0)?;
        let x0 = denoiser.denoise(&x_t, t, &schedule, &IntensityMap::IDENTITY)?;
        let values: Vec<f32> = x0.data().iter().map(|&v| v as f32).collect();
        output.write_all(&encode_response(&values))?;
        output.flush()?;
    }
    Ok(())
}
