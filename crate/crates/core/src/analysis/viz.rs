//! Export of the windows one layer generates for one image.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::geometry::{geometry_records, render_svg, write_csv, SampleStream, WindowGrid, WindowTransform};
use crate::mim::read_netpbm;
use crate::model::{load_checkpoint, Mode, Model};
use crate::tensor::{ParamStore, Session, Tensor};

/// Files written for one sampling stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFiles {
    pub stream: SampleStream,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub windows: usize,
    pub records: usize,
}

#[derive(Debug, Clone)]
pub struct VizOptions {
    /// 1-based block index
    pub layer: usize,
    pub head: Option<usize>,
    pub out_dir: PathBuf,
}

/// Repeats a gray image across channels or checks the channel count.
fn match_channels(img: Tensor<f64>, channels: usize) -> Result<Tensor<f64>> {
    let s = img.shape().to_vec();
    match (s[0], channels) {
        (a, b) if a == b => Ok(img),
        (1, n) => {
            let hw = s[1] * s[2];
            let src = img.data();
            Ok(Tensor::from_fn([n, s[1], s[2]], |i| src[i % hw]))
        }
        (a, b) => Err(Error::Input(format!("image has {a} channels, model expects {b}"))),
    }
}

/// Per-stream transforms layer `opts.layer` predicts for `image`.
pub fn layer_transforms(
    model: &Model,
    store: &ParamStore<f64>,
    image: &Tensor<f64>,
    layer: usize,
) -> Result<Vec<(SampleStream, WindowGrid, WindowTransform)>> {
    let depth = model.blocks.len();
    if layer == 0 || layer > depth {
        return Err(Error::config(format!("layer {layer} out of range 1..={depth}")));
    }
    let variant = model.cfg.layer_variant(layer - 1);
    if variant == Variant::Full {
        return Err(Error::config(format!("layer {layer} uses full attention and has no windows")));
    }
    let image = match_channels(image.clone(), model.cfg.in_channels)?;
    let p = model.cfg.patch_size;
    if image.shape()[1] % p != 0 || image.shape()[2] % p != 0 {
        return Err(Error::Input(format!("image {:?} is not a multiple of the {p}-pixel patch", &image.shape()[1..])));
    }
    let mut session = Session::new(store, false);
    let x = session.graph.leaf(image);
    let out = model.forward(&mut session, x)?;
    let taps: Vec<_> = session.transforms.iter().filter(|t| t.layer == layer - 1).collect();
    if taps.is_empty() {
        // fixed windows: the identity transform on the layer's grid
        let (h, w) = out.grid;
        let grid = WindowGrid::partition(h, w, model.cfg.window_size)?;
        let t = WindowTransform::identity(grid.num_windows(), model.cfg.heads);
        return Ok(vec![(SampleStream::KeyValue, grid, t)]);
    }
    taps.into_iter()
        .map(|t| Ok((t.stream, t.grid.clone(), WindowTransform::from_tensor(&t.values)?)))
        .collect()
}

/// Loads a finetune-mode checkpoint and an image, and writes CSV and SVG
/// geometry for one layer; the decoupled variant gets one pair per stream.
pub fn export_layer_geometry(ckpt: &Path, image: &Path, opts: &VizOptions) -> Result<Vec<GeometryFiles>> {
    let (model, store) = load_checkpoint(ckpt)?;
    if model.mode != Mode::Finetune {
        return Err(Error::Contract(format!("{} is a {} checkpoint; geometry export needs finetune mode", ckpt.display(), model.mode)));
    }
    let img = read_netpbm(image)?;
    let streams = layer_transforms(&model, &store, &img, opts.layer)?;
    fs::create_dir_all(&opts.out_dir)?;
    let mut written = Vec::new();
    for (stream, grid, transform) in streams {
        let records = geometry_records(opts.layer, &grid, &transform, opts.head)?;
        let stem = match stream {
            SampleStream::KeyValue => format!("layer{}_geometry", opts.layer),
            s => format!("layer{}_{}_geometry", opts.layer, s.tag()),
        };
        let csv = opts.out_dir.join(format!("{stem}.csv"));
        let svg = opts.out_dir.join(format!("{stem}.svg"));
        let mut buf = Vec::new();
        write_csv(&records, &mut buf)?;
        fs::write(&csv, buf)?;
        fs::write(&svg, render_svg(&grid, &records))?;
        written.push(GeometryFiles { stream, csv, svg, windows: grid.num_windows(), records: records.len() });
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{build_model, save_checkpoint, ModelConfig};

    fn write_ckpt(dir: &Path, variant: Variant, finetune: bool) -> PathBuf {
        let cfg = ModelConfig { embed_dim: 16, heads: 2, variant, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut model = build_model(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        if finetune {
            model.finetune(&mut store).unwrap();
        }
        let path = dir.join(format!("{variant}"));
        save_checkpoint(&path, &model, &store).unwrap();
        path
    }

    fn write_pgm(dir: &Path, size: usize) -> PathBuf {
        let mut body = format!("P2\n{size} {size}\n255\n");
        for i in 0..size * size {
            body.push_str(&format!("{}\n", (i * 7) % 256));
        }
        let p = dir.join("img.pgm");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn zero_heads_give_tiling_and_one_file_pair() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = write_ckpt(dir.path(), Variant::Rvsa, true);
        let img = write_pgm(dir.path(), 56);
        let opts = VizOptions { layer: 1, head: None, out_dir: dir.path().join("out") };
        let files = export_layer_geometry(&ckpt, &img, &opts).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].windows, 4);
        let csv = fs::read_to_string(&files[0].csv).unwrap();
        for line in csv.lines().skip(1) {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(&f[4..9], &[1.0, 1.0, 0.0, 0.0, 0.0]);
        }
        assert!(fs::read_to_string(&files[0].svg).unwrap().contains("<polygon"));
    }

    #[test]
    fn decoupled_variant_writes_two_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = write_ckpt(dir.path(), Variant::RvsaDecoupled, true);
        let img = write_pgm(dir.path(), 28);
        let opts = VizOptions { layer: 2, head: Some(1), out_dir: dir.path().to_path_buf() };
        let files = export_layer_geometry(&ckpt, &img, &opts).unwrap();
        let streams: Vec<_> = files.iter().map(|f| f.stream).collect();
        assert_eq!(streams, vec![SampleStream::Key, SampleStream::Value]);
        assert!(files[0].csv.ends_with("layer2_k_geometry.csv"));
    }

    #[test]
    fn bad_layers_and_modes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_pgm(dir.path(), 28);
        let ckpt = write_ckpt(dir.path(), Variant::Rvsa, true);
        for layer in [0, 4, 5] {
            let opts = VizOptions { layer, head: None, out_dir: dir.path().to_path_buf() };
            assert!(matches!(export_layer_geometry(&ckpt, &img, &opts), Err(Error::Config(_))), "layer {layer}");
        }
        let pre = write_ckpt(dir.path(), Variant::Vsa, false);
        let opts = VizOptions { layer: 1, head: None, out_dir: dir.path().to_path_buf() };
        assert!(matches!(export_layer_geometry(&pre, &img, &opts), Err(Error::Contract(_))));
    }
}
