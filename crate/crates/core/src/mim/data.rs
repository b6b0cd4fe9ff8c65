use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Striped test images: sinusoidal bands with random orientation, period
/// (4 or 8 pixels), phase and per-channel gain, values in `[0, 1]`.
pub fn synthetic_stripes(count: usize, channels: usize, size: usize, rng: &mut impl Rng) -> Vec<Tensor<f64>> {
    const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
    (0..count)
        .map(|_| {
            let (dx, dy) = DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())];
            let period = if rng.gen_bool(0.5) { 4.0 } else { 8.0 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let gains: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.3..1.0)).collect();
            let freq = std::f64::consts::TAU / period;
            Tensor::from_fn([channels, size, size], |i| {
                let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
                let t = (x as f64 * dx + y as f64 * dy) * freq + phase;
                0.5 + 0.5 * gains[ch] * t.sin()
            })
        })
        .collect()
}

/// Reads one PGM or PPM (ASCII or binary) image as `C×H×W` in `[0, 1]`.
pub fn read_netpbm(path: &Path) -> Result<Tensor<f64>> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let px = rgb.as_raw();
        Ok(Tensor::from_fn([3, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            px[p * 3 + ch] as f64
        }))
    } else {
        let luma = img.to_luma32f();
        Tensor::new([1, h, w], luma.as_raw().iter().map(|&v| v as f64).collect())
    }
}

/// Every `.pgm`/`.ppm`/`.pnm` file of a directory, in name order. Gray
/// images are repeated to `channels` when needed.
pub fn load_image_dir(dir: &Path, channels: usize) -> Result<Vec<Tensor<f64>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = read_netpbm(&p)?;
        let c = img.shape()[0];
        let img = match (c, channels) {
            (a, b) if a == b => img,
            (1, n) => {
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let src = img.data();
                Tensor::from_fn([n, h, w], |i| src[i % (h * w)])
            }
            (a, b) => return Err(Error::Input(format!("{}: {a} channels, expected {b}", p.display()))),
        };
        out.push(img);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no PGM/PPM images in {}", dir.display())));
    }
    Ok(out)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn stripes_are_in_unit_range() {
        let imgs = synthetic_stripes(5, 3, 32, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(imgs.len(), 5);
        for img in &imgs {
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ascii_and_binary_netpbm() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), "P2\n2 2\n255\n0 255\n51 102\n").unwrap();
        let mut ppm = b"P6\n1 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 0, 51]);
        fs::write(dir.path().join("b.ppm"), ppm).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let imgs = load_image_dir(dir.path(), 3).unwrap();
        assert_eq!(imgs[0].shape(), &[3, 2, 2]);
        assert!((imgs[0].get(&[2, 1, 0]).unwrap() - 0.2).abs() < 1e-6);
        assert_eq!(imgs[1].shape(), &[3, 1, 1]);
        assert!((imgs[1].data()[2] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn empty_directory_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir(dir.path(), 3), Err(Error::Input(_))));
    }
}
