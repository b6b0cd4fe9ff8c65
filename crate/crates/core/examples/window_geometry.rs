//! Partitions a 64x64 token grid into 7x7 windows, perturbs every window
//! with a random scale, offset and rotation, and writes CSV + SVG.
//!
//! cargo run --release --example window_geometry -- [out_dir] [seed]

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvsa::geometry::{geometry_records, render_svg, write_csv, WindowGrid, WindowTransform};

fn main() -> rvsa::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "geometry_out".into()));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let grid = WindowGrid::partition(64, 64, 7)?;
    println!("{} windows ({}x{}), padding {}x{}", grid.num_windows(), grid.rows, grid.cols, grid.pad_h, grid.pad_w);

    let heads = 2;
    let mut t = WindowTransform::identity(grid.num_windows(), heads);
    for p in &mut t.params {
        p.scale_x = rng.gen_range(0.6..1.6);
        p.scale_y = rng.gen_range(0.6..1.6);
        p.offset_x = rng.gen_range(-1.5..1.5);
        p.offset_y = rng.gen_range(-1.5..1.5);
        p.theta = rng.gen_range(-0.6..0.6);
    }
    let records = geometry_records(1, &grid, &t, None)?;
    fs::create_dir_all(&out)?;
    let mut csv = Vec::new();
    write_csv(&records, &mut csv)?;
    fs::write(out.join("windows.csv"), csv)?;
    fs::write(out.join("windows.svg"), render_svg(&grid, &records))?;
    println!("{} rectangles written to {}", records.len(), out.display());
    Ok(())
}
