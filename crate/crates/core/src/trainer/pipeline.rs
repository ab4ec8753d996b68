//! Translation and evaluation pipelines over image directories.

use super::Trainer;
use crate::dataset::{load_image, save_image, StainDomain, StainedImage};
use crate::error::{Error, Result};
use crate::metrics::{create_extractor, fid, kid, phv, FeatureMatrix, MetricReport};
use crate::networks::{from_model_range, to_model_range, Bind, GeneratorNet};
use crate::tensor::{Graph, ParamStore};
use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Evaluation settings. Defaults keep everything hermetic: the tiny
/// fixed-seed extractor, subset KID with seed 0, and T = 0.01 for PHV.
#[derive(Debug, Clone)]
pub struct MetricConfig {
    pub extractor_id: String,
    /// Defaults to `min(N, 100)` when unset.
    pub kid_subset_size: Option<usize>,
    pub kid_subsets: usize,
    pub kid_seed: u64,
    pub phv_t: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            extractor_id: "tiny-cnn-v1-seed0".into(),
            kid_subset_size: None,
            kid_subsets: 10,
            kid_seed: 0,
            phv_t: 0.01,
        }
    }
}

fn image_files_by_stem(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_img = matches!(
            path.extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref(),
            Some("png") | Some("jpg") | Some("jpeg")
        );
        if path.is_file() && is_img {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Pad (replicate borders) so both dims are divisible by `factor`.
fn pad_to_multiple(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ph = (factor - h % factor) % factor;
    let pw = (factor - w % factor) % factor;
    if ph == 0 && pw == 0 {
        return x.clone();
    }
    Array3::from_shape_fn((c, h + ph, w + pw), |(ci, i, j)| {
        x[[ci, i.min(h - 1), j.min(w - 1)]]
    })
}

fn forward_model_range(gen: &GeneratorNet, store: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
    let mut graph = Graph::new();
    let none = HashSet::new();
    let mut bind = Bind::new(&mut graph, store, &none);
    let xi = bind.graph.constant(x.clone().into_dyn());
    let (y, _) = gen.forward(&mut bind, xi);
    graph
        .value(y)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("generator output rank")
        .to_owned()
}

/// Axis tile offsets covering `0..dim` with `tile`-sized windows at
/// `stride`, the last window flush with the edge.
fn tile_offsets(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let mut offs: Vec<usize> = (0..=dim - tile).step_by(stride).collect();
    if *offs.last().expect("nonempty") != dim - tile {
        offs.push(dim - tile);
    }
    offs
}

/// Translate one image of arbitrary size: direct forward when it fits the
/// training crop, otherwise overlap-averaged tiling at stride `crop/2`.
pub fn translate_image(
    gen: &GeneratorNet,
    store: &ParamStore,
    crop: usize,
    image: &StainedImage,
) -> Result<StainedImage> {
    let factor = gen.downsample_factor();
    let (h, w) = (image.height(), image.width());
    let x = pad_to_multiple(&to_model_range(image), factor);
    let (_, ph, pw) = x.dim();

    let out = if ph <= crop && pw <= crop {
        forward_model_range(gen, store, &x)
    } else {
        let tile_h = crop.min(ph);
        let tile_w = crop.min(pw);
        let mut acc = Array3::<f64>::zeros((3, ph, pw));
        let mut count = Array3::<f64>::zeros((3, ph, pw));
        for &oy in &tile_offsets(ph, tile_h, crop / 2) {
            for &ox in &tile_offsets(pw, tile_w, crop / 2) {
                let tile = x
                    .slice(ndarray::s![.., oy..oy + tile_h, ox..ox + tile_w])
                    .to_owned();
                let y = forward_model_range(gen, store, &tile);
                let mut acc_s = acc.slice_mut(ndarray::s![.., oy..oy + tile_h, ox..ox + tile_w]);
                acc_s += &y;
                let mut cnt_s =
                    count.slice_mut(ndarray::s![.., oy..oy + tile_h, ox..ox + tile_w]);
                cnt_s += 1.0;
            }
        }
        acc / &count
    };
    let cropped = out.slice(ndarray::s![.., ..h, ..w]).to_owned();
    Ok(from_model_range(&cropped, StainDomain::IhcVirtual, &image.source_id))
}

/// Translate every image in `input_dir` into `output_dir`, one output per
/// input with the same filename. Returns the count written.
pub fn translate(checkpoint: &Path, input_dir: &Path, output_dir: &Path) -> Result<usize> {
    let trainer = Trainer::from_checkpoint(checkpoint)?;
    let inputs = image_files_by_stem(input_dir)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset(input_dir.into()));
    }
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut written = 0;
    for (stem, path) in &inputs {
        let img = load_image(path, StainDomain::He, stem)?;
        let out = translate_image(&trainer.gen, &trainer.store, trainer.cfg.crop, &img)?;
        let filename = path.file_name().expect("listed files have names");
        save_image(&out, &output_dir.join(filename))?;
        written += 1;
    }
    Ok(written)
}

/// Spatial mean of a (C,H,W) map.
fn spatial_mean(map: &Array3<f64>) -> Array1<f64> {
    let c = map.dim().0;
    Array1::from_shape_fn(c, |ci| {
        map.index_axis(Axis(0), ci).mean().expect("nonempty map")
    })
}

/// Compare a generated directory against a ground-truth directory with
/// paired stems: FID and KID on final-stage features, PHV over all four
/// extractor stages.
pub fn evaluate(generated_dir: &Path, gt_dir: &Path, mcfg: &MetricConfig) -> Result<MetricReport> {
    let gen_files = image_files_by_stem(generated_dir)?;
    let gt_files = image_files_by_stem(gt_dir)?;
    let gen_stems: Vec<&str> = gen_files.iter().map(|(s, _)| s.as_str()).collect();
    let gt_stems: Vec<&str> = gt_files.iter().map(|(s, _)| s.as_str()).collect();
    if gen_stems != gt_stems {
        let missing: Vec<&&str> = gt_stems.iter().filter(|s| !gen_stems.contains(s)).collect();
        let extra: Vec<&&str> = gen_stems.iter().filter(|s| !gt_stems.contains(s)).collect();
        return Err(Error::PairMismatch(format!(
            "stems differ (missing from generated: {missing:?}; extra: {extra:?})"
        )));
    }
    if gen_files.is_empty() {
        return Err(Error::EmptyDataset(generated_dir.into()));
    }

    let extractor = create_extractor(&mcfg.extractor_id)?;
    let n_layers = extractor.n_layers();
    let mut gen_maps: Vec<Vec<Array3<f64>>> = Vec::with_capacity(gen_files.len());
    let mut gt_maps: Vec<Vec<Array3<f64>>> = Vec::with_capacity(gt_files.len());
    for ((stem, gpath), (_, tpath)) in gen_files.iter().zip(gt_files.iter()) {
        let gimg = load_image(gpath, StainDomain::IhcVirtual, stem)?;
        let timg = load_image(tpath, StainDomain::IhcReal, stem)?;
        if (gimg.height(), gimg.width()) != (timg.height(), timg.width()) {
            return Err(Error::PairMismatch(format!(
                "pair `{stem}` dims differ: {}x{} vs {}x{}",
                gimg.height(),
                gimg.width(),
                timg.height(),
                timg.width()
            )));
        }
        gen_maps.push(extractor.feature_maps(&gimg)?);
        gt_maps.push(extractor.feature_maps(&timg)?);
    }

    // final-stage spatially averaged vectors feed the distribution metrics
    let last = n_layers - 1;
    let to_matrix = |maps: &[Vec<Array3<f64>>]| -> Result<FeatureMatrix> {
        let f = maps[0][last].dim().0;
        let mut rows = Array2::<f64>::zeros((maps.len(), f));
        for (i, m) in maps.iter().enumerate() {
            rows.row_mut(i).assign(&spatial_mean(&m[last]));
        }
        FeatureMatrix::new(rows, extractor.id(), Some(last))
    };
    let gen_features = to_matrix(&gen_maps)?;
    let gt_features = to_matrix(&gt_maps)?;

    let fid_v = fid(&gen_features, &gt_features)?;
    let n = gen_features.n();
    let subset = mcfg.kid_subset_size.unwrap_or_else(|| n.min(100));
    let mut kid_rng = ChaCha12Rng::seed_from_u64(mcfg.kid_seed);
    let kid_v = kid(&gen_features, &gt_features, subset, mcfg.kid_subsets, &mut kid_rng)?;
    let (phv_layers, _) = phv(&gen_maps, &gt_maps, mcfg.phv_t)?;

    MetricReport::new(
        fid_v,
        kid_v * 1000.0,
        phv_layers,
        n,
        mcfg.phv_t,
        extractor.id(),
    )
}
