//! Distribution and content metrics: FID, KID (reported ×1000), and
//! layer-wise PHV, over a pluggable feature extractor.
//!
//! The bundled extractor is a tiny fixed-seed CNN, which keeps every test
//! hermetic: no pretrained weights are downloaded anywhere in this crate. A
//! full-scale pretrained extractor can be plugged in through the
//! [`FeatureExtractor`] trait at runtime.

use crate::dataset::StainedImage;
use crate::error::{Error, Result};
use crate::tensor::{kernels, randn};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// N×F feature rows from one extractor layer.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub extractor_id: String,
    pub layer_id: Option<usize>,
}

impl FeatureMatrix {
    pub fn new(rows: Array2<f64>, extractor_id: impl Into<String>, layer_id: Option<usize>) -> Result<Self> {
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("feature matrix must be finite".into()));
        }
        Ok(Self {
            rows,
            extractor_id: extractor_id.into(),
            layer_id,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn f(&self) -> usize {
        self.rows.ncols()
    }
}

/// Deterministic image -> per-layer feature map function, identified by id.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn n_layers(&self) -> usize;
    /// Per-layer (C,H,W) feature maps for one image.
    fn feature_maps(&self, image: &StainedImage) -> Result<Vec<Array3<f64>>>;
}

/// Four-stage fixed-seed CNN: 3x3 stride-2 convs with ReLU, widths
/// 8/16/32/64. Weights are a pure function of the seed, so features are
/// identical across runs and platforms with the same build.
pub struct TinyCnnExtractor {
    id: String,
    weights: Vec<(Array4<f64>, Array1<f64>)>,
}

impl TinyCnnExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xFEA7_0001);
        let widths = [8usize, 16, 32, 64];
        let mut weights = Vec::new();
        let mut ci = 3;
        for &co in &widths {
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let w = randn(&[co, ci, 3, 3], std, &mut rng)
                .into_dimensionality::<ndarray::Ix4>()
                .expect("conv weight rank");
            let b = Array1::<f64>::zeros(co);
            weights.push((w, b));
            ci = co;
        }
        Self {
            id: format!("tiny-cnn-v1-seed{seed}"),
            weights,
        }
    }
}

impl FeatureExtractor for TinyCnnExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    fn feature_maps(&self, image: &StainedImage) -> Result<Vec<Array3<f64>>> {
        let (h, w) = (image.height(), image.width());
        if h < 16 || w < 16 {
            return Err(Error::ShapeError(format!(
                "extractor needs at least 16x16 input, got {h}x{w}"
            )));
        }
        let mut x = Array3::from_shape_fn((3, h, w), |(c, y, xx)| image.pixels[[y, xx, c]]);
        let mut maps = Vec::with_capacity(self.weights.len());
        for (w, b) in &self.weights {
            let (y, _) = kernels::conv2d_forward(x.view(), w.view(), b.view(), 2, 1);
            x = y.mapv(|v| v.max(0.0));
            maps.push(x.clone());
        }
        Ok(maps)
    }
}

/// Instantiate a registered extractor by id. The tiny CNN registers as
/// `tiny-cnn-v1-seed<k>`; anything else is unavailable in this build.
pub fn create_extractor(id: &str) -> Result<Box<dyn FeatureExtractor>> {
    if let Some(seed) = id.strip_prefix("tiny-cnn-v1-seed") {
        if let Ok(seed) = seed.parse::<u64>() {
            return Ok(Box::new(TinyCnnExtractor::new(seed)));
        }
    }
    Err(Error::ExtractorUnavailable(id.into()))
}

/// Spatially averaged per-layer feature matrices for an image list.
/// `layers` selects which extractor stages to keep (0-based).
pub fn extract_features(
    images: &[StainedImage],
    extractor: &dyn FeatureExtractor,
    layers: &[usize],
) -> Result<Vec<FeatureMatrix>> {
    for &l in layers {
        if l >= extractor.n_layers() {
            return Err(Error::InvalidArgument(format!(
                "layer {l} out of range for extractor with {} layers",
                extractor.n_layers()
            )));
        }
    }
    let mut per_layer: Vec<Vec<Array1<f64>>> = vec![Vec::with_capacity(images.len()); layers.len()];
    for img in images {
        let maps = extractor.feature_maps(img)?;
        for (slot, &l) in layers.iter().enumerate() {
            let m = &maps[l];
            let c = m.dim().0;
            let mut v = Array1::<f64>::zeros(c);
            for ci in 0..c {
                v[ci] = m.index_axis(Axis(0), ci).mean().expect("nonempty map");
            }
            per_layer[slot].push(v);
        }
    }
    let mut out = Vec::with_capacity(layers.len());
    for (slot, &l) in layers.iter().enumerate() {
        let f = per_layer[slot][0].len();
        let mut rows = Array2::<f64>::zeros((images.len(), f));
        for (i, v) in per_layer[slot].iter().enumerate() {
            rows.row_mut(i).assign(v);
        }
        out.push(FeatureMatrix::new(rows, extractor.id(), Some(l))?);
    }
    Ok(out)
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let mu = x.mean_axis(Axis(0)).expect("nonempty matrix");
    let centered = x - &mu.clone().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    (mu, cov)
}

fn sym_eigen(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let f = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(f, f, |i, j| m[[i, j]]);
    let eig = nalgebra::SymmetricEigen::try_new(dm, 1e-14, 100_000)
        .ok_or_else(|| Error::SqrtmFailure("symmetric eigen did not converge".into()))?;
    let vals = Array1::from_iter(eig.eigenvalues.iter().copied());
    let vecs = Array2::from_shape_fn((f, f), |(i, j)| eig.eigenvectors[(i, j)]);
    Ok((vals, vecs))
}

/// Fréchet distance between Gaussian fits of two feature matrices.
///
/// Covariances use 1/(N-1) normalization. The matrix square root uses the
/// symmetric form `tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2)`; negative
/// eigenvalue mass from roundoff is clamped to zero and logged if above
/// 1e-6, and the final value is clamped at 0.
pub fn fid(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.n() < 2 || b.n() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: a.n().min(b.n()),
        });
    }
    if a.f() != b.f() {
        return Err(Error::ShapeError(format!(
            "feature dims differ: {} vs {}",
            a.f(),
            b.f()
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.rows);
    let (mu_b, cov_b) = mean_and_cov(&b.rows);

    let diff = &mu_a - &mu_b;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();

    // Sa^{1/2} via symmetric eigendecomposition
    let (vals_a, vecs_a) = sym_eigen(&cov_a)?;
    let mut clamp_residue = 0.0f64;
    let sqrt_vals = vals_a.mapv(|v| {
        if v < 0.0 {
            clamp_residue += v.abs();
            0.0
        } else {
            v.sqrt()
        }
    });
    let sqrt_a = {
        let scaled = &vecs_a * &sqrt_vals.clone().insert_axis(Axis(0));
        scaled.dot(&vecs_a.t())
    };

    let inner = sqrt_a.dot(&cov_b).dot(&sqrt_a);
    // symmetrize against roundoff before the second eigen pass
    let inner = (&inner + &inner.t()) / 2.0;
    let (vals_i, _) = sym_eigen(&inner)?;
    let mut tr_sqrt = 0.0;
    for &v in vals_i.iter() {
        if v < 0.0 {
            clamp_residue += v.abs();
        } else {
            tr_sqrt += v.sqrt();
        }
    }
    if clamp_residue > 1e-6 {
        log::warn!("fid sqrtm clamped negative eigenvalue mass {clamp_residue:e}");
    }

    let tr_a: f64 = (0..cov_a.nrows()).map(|i| cov_a[[i, i]]).sum();
    let tr_b: f64 = (0..cov_b.nrows()).map(|i| cov_b[[i, i]]).sum();
    let value = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if value < 0.0 {
        if value.abs() > 1e-6 {
            log::warn!("fid clamped negative value {value:e} to 0");
        }
        return Ok(0.0);
    }
    Ok(value)
}

fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>, f: f64) -> f64 {
    let d = x.dot(&y) / f + 1.0;
    d * d * d
}

/// Unbiased MMD^2 with kernel `(x.y/F + 1)^3` over one subset pair of equal
/// size: the complete U-statistic form
///
/// ```text
/// 1/(m(m-1)) sum_{i != j} [ k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i) ]
/// ```
///
/// which excludes paired cross terms, so identical inputs give exactly 0
/// while the estimator stays unbiased (and sign-unconstrained) for
/// independent samples.
fn mmd2_unbiased(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let m = a.nrows();
    debug_assert_eq!(m, b.nrows(), "u-statistic estimator needs equal sizes");
    let f = a.ncols() as f64;
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                acc += poly_kernel(a.row(i), a.row(j), f) + poly_kernel(b.row(i), b.row(j), f)
                    - poly_kernel(a.row(i), b.row(j), f)
                    - poly_kernel(a.row(j), b.row(i), f);
            }
        }
    }
    acc / (m * (m - 1)) as f64
}

/// Kernel distance: mean over `n_subsets` random subset pairs of the
/// unbiased MMD^2 estimator. Deterministic given the rng. The estimator is
/// unbiased, so small negative values are legal.
///
/// When both sides hold the same number of rows (the paired-directory
/// case), one index sample selects both subsets, so identical inputs give
/// exactly 0; otherwise subsets are drawn independently.
pub fn kid(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    subset_size: usize,
    n_subsets: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if subset_size < 2 {
        return Err(Error::InvalidArgument("kid subset_size must be >= 2".into()));
    }
    if a.n() < subset_size || b.n() < subset_size {
        return Err(Error::InsufficientSamples {
            needed: subset_size,
            got: a.n().min(b.n()),
        });
    }
    if a.f() != b.f() {
        return Err(Error::ShapeError(format!(
            "feature dims differ: {} vs {}",
            a.f(),
            b.f()
        )));
    }
    if n_subsets == 0 {
        return Err(Error::InvalidArgument("kid needs at least one subset".into()));
    }
    let paired = a.n() == b.n();
    let mut acc = 0.0;
    for _ in 0..n_subsets {
        let ia = rand::seq::index::sample(rng, a.n(), subset_size);
        let ib = if paired {
            ia.clone()
        } else {
            rand::seq::index::sample(rng, b.n(), subset_size)
        };
        let sa = Array2::from_shape_fn((subset_size, a.f()), |(i, j)| a.rows[[ia.index(i), j]]);
        let sb = Array2::from_shape_fn((subset_size, b.f()), |(i, j)| b.rows[[ib.index(i), j]]);
        acc += mmd2_unbiased(&sa, &sb);
    }
    Ok(acc / n_subsets as f64)
}

/// Thresholded feature-difference fraction between paired images.
///
/// Per pair and layer both maps are normalized to `[0,1]` by their joint
/// min/max; the layer value is the fraction of elements differing by more
/// than `t`, averaged over pairs. Lower is better. Returns per-layer values
/// and their mean.
pub fn phv(
    a_layers: &[Vec<Array3<f64>>],
    b_layers: &[Vec<Array3<f64>>],
    t: f64,
) -> Result<(Vec<f64>, f64)> {
    if a_layers.len() != b_layers.len() {
        return Err(Error::PairMismatch(format!(
            "{} vs {} images",
            a_layers.len(),
            b_layers.len()
        )));
    }
    if a_layers.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("phv threshold must be positive".into()));
    }
    let n_layers = a_layers[0].len();
    let mut sums = vec![0.0f64; n_layers];
    for (ai, bi) in a_layers.iter().zip(b_layers.iter()) {
        if ai.len() != n_layers || bi.len() != n_layers {
            return Err(Error::PairMismatch("inconsistent layer counts".into()));
        }
        for (l, (ma, mb)) in ai.iter().zip(bi.iter()).enumerate() {
            if ma.dim() != mb.dim() {
                return Err(Error::PairMismatch(format!(
                    "layer {l} shapes differ: {:?} vs {:?}",
                    ma.dim(),
                    mb.dim()
                )));
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in ma.iter().chain(mb.iter()) {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            let range = hi - lo;
            let frac = if range < 1e-12 {
                0.0
            } else {
                let total = ma.len();
                let over = ma
                    .iter()
                    .zip(mb.iter())
                    .filter(|(x, y)| ((**x - lo) / range - (**y - lo) / range).abs() > t)
                    .count();
                over as f64 / total as f64
            };
            sums[l] += frac;
        }
    }
    let n = a_layers.len() as f64;
    let per_layer: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    let avg = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok((per_layer, avg))
}

/// Full evaluation report in the reporting convention: KID ×1000, PHV per
/// layer 1-4 plus average.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_x1000: f64,
    pub phv_layers: Vec<f64>,
    pub phv_average: f64,
    pub n_images: usize,
    pub threshold_t: f64,
    pub extractor_id: String,
}

impl MetricReport {
    pub fn new(
        fid: f64,
        kid_x1000: f64,
        phv_layers: Vec<f64>,
        n_images: usize,
        threshold_t: f64,
        extractor_id: impl Into<String>,
    ) -> Result<Self> {
        if phv_layers.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "expected 4 phv layers, got {}",
                phv_layers.len()
            )));
        }
        if !(fid >= 0.0) {
            return Err(Error::InvalidArgument(format!("fid must be >= 0, got {fid}")));
        }
        for (i, &v) in phv_layers.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "phv layer {} out of [0,1]: {v}",
                    i + 1
                )));
            }
        }
        let phv_average = phv_layers.iter().sum::<f64>() / 4.0;
        Ok(Self {
            fid,
            kid_x1000,
            phv_layers,
            phv_average,
            n_images,
            threshold_t,
            extractor_id: extractor_id.into(),
        })
    }

    /// Key/value text serialization; KID is already ×1000 here.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("fid = {:.17e}\n", self.fid));
        s.push_str(&format!("kid_x1000 = {:.17e}\n", self.kid_x1000));
        for (i, v) in self.phv_layers.iter().enumerate() {
            s.push_str(&format!("phv_layer{} = {:.17e}\n", i + 1, v));
        }
        s.push_str(&format!("phv_average = {:.17e}\n", self.phv_average));
        s.push_str(&format!("n_images = {}\n", self.n_images));
        s.push_str(&format!("threshold_t = {:.17e}\n", self.threshold_t));
        s.push_str(&format!("extractor = {}\n", self.extractor_id));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigError(format!("bad report line: `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::ConfigError(format!("report missing key `{k}`")))
        };
        let parse = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::ConfigError(format!("bad value for `{k}`: {e}")))
        };
        let mut phv_layers = Vec::with_capacity(4);
        for i in 1..=4 {
            phv_layers.push(parse(&format!("phv_layer{i}"))?);
        }
        let report = Self::new(
            parse("fid")?,
            parse("kid_x1000")?,
            phv_layers,
            get("n_images")?
                .parse()
                .map_err(|e| Error::ConfigError(format!("bad n_images: {e}")))?,
            parse("threshold_t")?,
            get("extractor")?,
        )?;
        let stated = parse("phv_average")?;
        if (stated - report.phv_average).abs() > 1e-9 {
            return Err(Error::ConfigError(format!(
                "phv_average {stated} inconsistent with layers (expected {})",
                report.phv_average
            )));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StainDomain;
    use rand::Rng;

    fn fm(rows: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(rows, "test", None).unwrap()
    }

    fn random_image(size: usize, seed: u64) -> StainedImage {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        StainedImage::new(
            Array3::from_shape_fn((size, size, 3), |_| r.gen::<f64>()),
            StainDomain::IhcReal,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn extractor_deterministic_across_instances() {
        let e1 = TinyCnnExtractor::new(0);
        let e2 = TinyCnnExtractor::new(0);
        let img = random_image(32, 1);
        let m1 = e1.feature_maps(&img).unwrap();
        let m2 = e2.feature_maps(&img).unwrap();
        assert_eq!(m1.len(), 4);
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(a, b);
        }
        assert_ne!(
            TinyCnnExtractor::new(1).feature_maps(&img).unwrap()[0],
            m1[0]
        );
    }

    #[test]
    fn extract_features_identical_lists_match() {
        let e = TinyCnnExtractor::new(0);
        let imgs: Vec<_> = (0..3).map(|i| random_image(32, i)).collect();
        let a = extract_features(&imgs, &e, &[0, 1, 2, 3]).unwrap();
        let b = extract_features(&imgs, &e, &[0, 1, 2, 3]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.rows, y.rows);
        }
        // single image still yields a valid 1xF matrix
        let single = extract_features(&imgs[..1], &e, &[3]).unwrap();
        assert_eq!(single[0].n(), 1);
        assert_eq!(single[0].f(), 64);
    }

    #[test]
    fn registry_resolves_tiny_and_rejects_unknown() {
        assert!(create_extractor("tiny-cnn-v1-seed0").is_ok());
        assert!(matches!(
            create_extractor("inception-v3"),
            Err(Error::ExtractorUnavailable(_))
        ));
    }

    #[test]
    fn fid_identity_is_zero() {
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let rows = Array2::from_shape_fn((6, 5), |_| r.gen::<f64>());
        let a = fm(rows.clone());
        let b = fm(rows);
        assert!(fid(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn fid_1d_closed_form() {
        // mu=0, var=1 vs mu=3, var=1 -> (0-3)^2 + 1 + 1 - 2 = 9
        let a = fm(ndarray::arr2(&[[-1.0], [0.0], [1.0]]));
        let b = fm(ndarray::arr2(&[[2.0], [3.0], [4.0]]));
        let v = fid(&a, &b).unwrap();
        assert!((v - 9.0).abs() < 1e-9, "fid = {v}");
        // symmetry
        let w = fid(&b, &a).unwrap();
        assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn fid_rejects_insufficient_samples() {
        let a = fm(ndarray::arr2(&[[1.0, 2.0]]));
        let b = fm(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        assert!(matches!(
            fid(&a, &b),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn kid_constant_rows_is_zero() {
        let rows = Array2::from_elem((5, 4), 0.7);
        let a = fm(rows.clone());
        let b = fm(rows);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let v = kid(&a, &b, 4, 3, &mut rng).unwrap();
        assert!(v.abs() < 1e-9);
    }

    /// Independent scalar oracle for the complete U-statistic MMD^2.
    fn oracle_mmd2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let m = a.nrows();
        let f = a.ncols() as f64;
        let k = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| -> f64 {
            let mut dot = 0.0;
            for (xi, yi) in x.iter().zip(y.iter()) {
                dot += xi * yi;
            }
            (dot / f + 1.0).powi(3)
        };
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                total += k(a.row(i), a.row(j)) + k(b.row(i), b.row(j))
                    - k(a.row(i), b.row(j))
                    - k(a.row(j), b.row(i));
            }
        }
        total / (m * (m - 1)) as f64
    }

    #[test]
    fn kid_full_subset_matches_oracle() {
        let mut r = ChaCha12Rng::seed_from_u64(3);
        for n in 4..=8 {
            let a_rows = Array2::from_shape_fn((n, 6), |_| r.gen::<f64>() - 0.5);
            let b_rows = Array2::from_shape_fn((n, 6), |_| r.gen::<f64>() - 0.5);
            let a = fm(a_rows.clone());
            let b = fm(b_rows.clone());
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let v = kid(&a, &b, n, 1, &mut rng).unwrap();
            let oracle = oracle_mmd2(&a_rows, &b_rows);
            assert!((v - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn kid_identical_sets_exactly_zero() {
        let mut r = ChaCha12Rng::seed_from_u64(7);
        let rows = Array2::from_shape_fn((6, 5), |_| r.gen::<f64>());
        let a = fm(rows.clone());
        let b = fm(rows);
        let v = kid(&a, &b, 6, 2, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kid_deterministic_given_seed() {
        let mut r = ChaCha12Rng::seed_from_u64(5);
        let a = fm(Array2::from_shape_fn((10, 4), |_| r.gen::<f64>()));
        let b = fm(Array2::from_shape_fn((10, 4), |_| r.gen::<f64>()));
        let v1 = kid(&a, &b, 5, 4, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let v2 = kid(&a, &b, 5, 4, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn phv_identity_monotone_and_counting() {
        let e = TinyCnnExtractor::new(0);
        let imgs: Vec<_> = (0..2).map(|i| random_image(32, 10 + i)).collect();
        let maps: Vec<Vec<Array3<f64>>> = imgs.iter().map(|i| e.feature_maps(i).unwrap()).collect();
        let (layers, avg) = phv(&maps, &maps, 0.01).unwrap();
        assert!(layers.iter().all(|&v| v == 0.0));
        assert_eq!(avg, 0.0);

        let other: Vec<Vec<Array3<f64>>> = imgs
            .iter()
            .map(|i| {
                let shifted = StainedImage::new(
                    i.pixels.mapv(|v| (v * 0.5 + 0.25).clamp(0.0, 1.0)),
                    StainDomain::IhcReal,
                    "s",
                )
                .unwrap();
                e.feature_maps(&shifted).unwrap()
            })
            .collect();
        let mut last = f64::NEG_INFINITY;
        let mut values = Vec::new();
        for t in [0.05, 0.01, 0.005] {
            let (_, avg) = phv(&maps, &other, t).unwrap();
            assert!(avg >= last, "phv should not decrease as t shrinks");
            last = avg;
            values.push(avg);
        }
        assert!(values[2] > 0.0);
    }

    #[test]
    fn phv_exact_half_case() {
        // one image, one layer, 4 elements; after joint [0,1] normalization
        // exactly half differ by more than t
        let a = vec![vec![Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 0.0, 1.0]).unwrap()]];
        let b = vec![vec![Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.004, 0.9, 0.5]).unwrap()]];
        let (layers, avg) = phv(&a, &b, 0.01).unwrap();
        assert_eq!(layers, vec![0.5]);
        assert_eq!(avg, 0.5);
    }

    #[test]
    fn phv_pair_mismatch() {
        let a = vec![vec![Array3::<f64>::zeros((1, 2, 2))]];
        let b: Vec<Vec<Array3<f64>>> = vec![];
        assert!(matches!(phv(&a, &b, 0.01), Err(Error::PairMismatch(_))));
    }

    #[test]
    fn report_roundtrip_and_invariants() {
        let r = MetricReport::new(12.5, -0.3, vec![0.1, 0.2, 0.3, 0.4], 8, 0.01, "tiny-cnn-v1-seed0")
            .unwrap();
        assert!((r.phv_average - 0.25).abs() < 1e-12);
        let text = r.to_text();
        let back = MetricReport::from_text(&text).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn report_rejects_inconsistent_average() {
        let r = MetricReport::new(1.0, 0.0, vec![0.1, 0.1, 0.1, 0.1], 2, 0.01, "x").unwrap();
        let mut text = r.to_text();
        text = text.replace("phv_average", "# phv_average");
        text.push_str("phv_average = 0.9\n");
        assert!(MetricReport::from_text(&text).is_err());
    }
}
