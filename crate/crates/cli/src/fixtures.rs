//! Synthetic stand-ins for a segmentation dataset and power logs.

use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge_core::tensor::{write_image_pnm, Tensor};

use crate::{FixtureArgs, Format, Usage};

/// Fixed start time for generated logs: 2024-05-29T16:26:40Z.
const LOG_START_MS: u64 = 1_717_000_000_000;

/// Blocky label map: a background class overlaid with random rectangles.
pub fn label_map(h: usize, w: usize, classes: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut labels = vec![rng.random_range(0..classes) as u8; h * w];
    for _ in 0..rng.random_range(3..=8) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0 + 1..=h), rng.random_range(c0 + 1..=w));
        let class = rng.random_range(0..classes) as u8;
        for r in r0..r1 {
            labels[r * w + c0..r * w + c1].fill(class);
        }
    }
    labels
}

/// Colors each pixel by its class with a little noise.
pub fn render(labels: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            let base = [l.wrapping_mul(73), l.wrapping_mul(151).wrapping_add(40), l.wrapping_mul(29).wrapping_add(90)];
            base.map(|b| b.saturating_add(rng.random_range(0..16)))
        })
        .collect()
}

pub fn ina_log(watts: f64, samples: usize) -> String {
    let mut s = String::new();
    let mw = watts * 1000.0;
    let mv = 5000.0;
    for i in 0..samples {
        let t = LOG_START_MS + 100 * i as u64;
        writeln!(s, "{t},{},{mv},{mw}", mw / mv * 1000.0).unwrap();
    }
    s
}

pub fn smi_log(watts: f64, samples: usize) -> String {
    let mut s = String::from("timestamp, power.draw [W]\n");
    let start = chrono::DateTime::from_timestamp_millis(LOG_START_MS as i64).unwrap();
    for i in 0..samples {
        let t = start + chrono::Duration::milliseconds(500 * i as i64);
        writeln!(s, "{}, {watts} W", t.format("%Y-%m-%dT%H:%M:%S%.3fZ")).unwrap();
    }
    s
}

pub fn write(a: &FixtureArgs, format: Format) -> Result<()> {
    if a.classes == 0 || a.classes > 256 {
        bail!(Usage(format!("--classes must be in 1..=256, got {}", a.classes)));
    }
    if a.height == 0 || a.width == 0 {
        bail!(Usage("--height and --width must be positive".into()));
    }
    if a.power_samples == 0 {
        bail!(Usage("--power-samples must be positive".into()));
    }
    let images = a.out.join("images");
    let labels = a.out.join("labels");
    let power = a.out.join("power");
    for d in [&images, &labels, &power] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let l = label_map(a.height, a.width, a.classes, &mut rng);
        let rgb = render(&l, &mut rng);
        let name = format!("img_{i:04}.pnm");
        write_image_pnm(&Tensor::from_labels(a.height, a.width, l)?, labels.join(&name))?;
        let img = Tensor::from_q8(vec![a.height, a.width, 3], rgb, segforge_core::tensor::QuantParams::from_range(0.0, 255.0))?;
        write_image_pnm(&img, images.join(&name))?;
    }
    let ina = power.join("ina.log");
    let smi = power.join("smi.csv");
    fs::write(&ina, ina_log(a.ina_watts, a.power_samples)).with_context(|| format!("writing {}", ina.display()))?;
    fs::write(&smi, smi_log(a.smi_watts, a.power_samples)).with_context(|| format!("writing {}", smi.display()))?;
    match format {
        Format::Csv => {
            println!("kind,path");
            println!("images,{}", images.display());
            println!("labels,{}", labels.display());
            println!("ina-sysfs,{}", ina.display());
            println!("gpu-smi-csv,{}", smi.display());
        }
        _ => println!(
            "{} image/label pairs in {} and {}; power logs {} ({} W) and {} ({} W)",
            a.count,
            images.display(),
            labels.display(),
            ina.display(),
            a.ina_watts,
            smi.display(),
            a.smi_watts
        ),
    }
    Ok(())
}
