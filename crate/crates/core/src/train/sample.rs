use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::{stream_rng, SALT_SAMPLE};
use crate::tensor_ad::{Tape, Tensor};
use crate::vae::sample_noise;

/// Decoder means for `n` draws from the prior, `[n, data_dim]`.
pub fn prior_means(model: &Model, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let z = sample_noise(&mut stream_rng(seed, SALT_SAMPLE, 0), n, model.spec().latent);
    let mut tape = Tape::new();
    let params = model.bind_frozen(&mut tape);
    let zv = tape.constant(z);
    let obs = model.decode(&mut tape, &params, zv)?;
    Ok(tape.value(obs.mean).clone())
}

/// Tiles square images into a near-square grid and encodes it as binary
/// PGM (P5, maxval 255). Values are clipped to `[0, 1]` first.
pub fn pgm_grid(images: &Tensor) -> Result<Vec<u8>> {
    let (n, d) = images.dims2()?;
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(Error::Data(format!("{d} pixels is not a square image")));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * side, rows * side);
    let mut pixels = vec![0u8; width * height];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for (p, &v) in images.row(k).iter().enumerate() {
            let (r, c) = (p / side, p % side);
            let y = gr * side + r;
            let x = gc * side + c;
            pixels[y * width + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
