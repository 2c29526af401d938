//! Prints the K = 9 TV reconstruction outcome for a few phantom seeds.

fn main() -> dernn::Result<()> {
    for seed in 0..4 {
        let r = dernn::selftest::tv_reconstruction(seed)?;
        println!(
            "seed {seed}: PSNR {:.6} -> {:.6} (+{:.6} dB), residual {:.6e} -> {:.6e}",
            r.psnr_init,
            r.psnr_final,
            r.psnr_final - r.psnr_init,
            r.residual_first,
            r.residual_final
        );
    }
    Ok(())
}
