//! Trains the tiny network on a handful of synthetic pairs and compares the
//! result with simple baselines on a held-out pair.
//!
//! ```text
//! cargo run --release --example desk_scale -- [steps] [lr0]
//! ```

use std::time::Instant;

use mfuse::imageio::save_luma;
use mfuse::metrics::{self, BinaryMask};
use mfuse::ssim::{self, SsimConstants};
use mfuse::train::{self, TrainConfig};
use mfuse::{Image, MfNetConfig};

fn make_pair(seed: u64, size: usize, sigma: f64) -> (Image, Image, Image) {
    let sharp = metrics::synthetic_scene(size, size, seed);
    let mask = BinaryMask::random_half_plane(size, size, seed ^ 0xa5a5);
    let (p1, p2) = metrics::synth_pair(&sharp, &mask, sigma).expect("valid sigma");
    (sharp, p1, p2)
}

fn main() -> mfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(500, |s| s.parse().expect("steps"));
    let lr0: f64 = args.next().map_or(1e-3, |s| s.parse().expect("lr0"));

    let dir = std::env::temp_dir().join("mfuse-desk-scale");
    let data = dir.join("data");
    std::fs::create_dir_all(&data)?;
    for i in 0..4u64 {
        let (_, p1, p2) = make_pair(100 + i, 128, 2.0);
        save_luma(&data.join(format!("s{i}_1.png")), &p1)?;
        save_luma(&data.join(format!("s{i}_2.png")), &p2)?;
    }

    let cfg = TrainConfig {
        data_dir: data,
        out_dir: None,
        num_patches: 2000,
        iters_per_epoch: steps,
        epochs: 1,
        batch_size: 8,
        lr0,
        model: MfNetConfig::tiny(),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let ckpt = train::train_with(&cfg, None, |r| {
        if r.step % 50 == 0 {
            println!("step {:4}  loss {:.4}", r.step, r.loss);
        }
    })?;
    println!("trained {} steps in {:.1?}", ckpt.step, t.elapsed());

    let h = &ckpt.loss_history;
    let w = 25.min(h.len());
    let mean = |s: &[(u64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
    println!(
        "smoothed loss: first {:.4}  last {:.4}",
        mean(&h[..w]),
        mean(&h[h.len() - w..])
    );

    let k = SsimConstants::default();
    let (sharp, p1, p2) = make_pair(999, 128, 2.0);
    let fused = ckpt.weights.fuse(&p1, &p2)?;
    let avg = Image::average(&p1, &p2)?;
    let scope = |f: &Image| 1.0 - ssim::fusion_loss_value(&p1, &p2, f, &k).unwrap();
    println!(
        "scope: fused {:.4}  average {:.4}",
        scope(&fused),
        scope(&avg)
    );
    println!(
        "ssim vs sharp: fused {:.4}  p1 {:.4}  p2 {:.4}",
        ssim::mean_ssim(&sharp, &fused, &k)?,
        ssim::mean_ssim(&sharp, &p1, &k)?,
        ssim::mean_ssim(&sharp, &p2, &k)?
    );
    Ok(())
}
