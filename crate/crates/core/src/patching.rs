//! Patch-location sampling and anchor/positive embedding-set construction.
//!
//! `M` spatial sites are sampled once over the encoder feature taps and
//! shared by all three embedding sets: anchors from the re-encoded virtual
//! IHC image, positives from the input H&E and the real-IHC ground truth.
//! Row `i` of each set is the same spatial site, which is what makes the
//! contrastive losses' positive pairs meaningful.

use crate::error::{Error, Result};
use crate::networks::{to_model_range, Bind, GeneratorNet, ProjectorNet};
use crate::tensor::{Graph, Id, ParamId, ParamStore};
use crate::dataset::StainedImage;
use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use std::collections::HashSet;

/// Which image a set of embeddings came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingDomain {
    /// Patches of the generated (virtual IHC) image.
    AnchorVirtual,
    /// Patches of the input H&E image.
    PosHe,
    /// Patches of the real IHC ground truth.
    PosGt,
}

/// Sampled patch sites: `(tap_id, flat spatial index)` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLocations {
    entries: Vec<(usize, usize)>,
}

impl PatchLocations {
    /// Validates the no-duplicate invariant.
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(*e) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate patch location {e:?}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn m_total(&self) -> usize {
        self.entries.len()
    }

    /// Entries regrouped per tap: `(tap_id, site_indices, original_rows)`.
    pub fn by_tap(&self) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
        let mut taps: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        taps.sort_unstable();
        taps.dedup();
        taps.into_iter()
            .map(|t| {
                let mut sites = Vec::new();
                let mut rows = Vec::new();
                for (row, &(tap, site)) in self.entries.iter().enumerate() {
                    if tap == t {
                        sites.push(site);
                        rows.push(row);
                    }
                }
                (t, sites, rows)
            })
            .collect()
    }
}

/// `M` unit-norm D-dimensional patch embeddings from one domain.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// (M, D); every row has Euclidean norm 1 ± 1e-6.
    pub vectors: Array2<f64>,
    pub domain: EmbeddingDomain,
    pub locations: PatchLocations,
}

impl EmbeddingSet {
    /// Validates unit-norm rows and row/location agreement.
    pub fn new(vectors: Array2<f64>, domain: EmbeddingDomain, locations: PatchLocations) -> Result<Self> {
        if vectors.nrows() != locations.m_total() {
            return Err(Error::ShapeError(format!(
                "{} embedding rows vs {} locations",
                vectors.nrows(),
                locations.m_total()
            )));
        }
        for (i, row) in vectors.outer_iter().enumerate() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "embedding row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self {
            vectors,
            domain,
            locations,
        })
    }

    /// Normalize arbitrary rows onto the unit sphere and tag them with
    /// synthetic single-tap locations. Intended for tests and standalone
    /// loss evaluation.
    pub fn from_unnormalized(mut vectors: Array2<f64>, domain: EmbeddingDomain) -> Result<Self> {
        for (i, mut row) in vectors.outer_iter_mut().enumerate() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::DegenerateEmbedding { row: i, norm: n });
            }
            row.mapv_inplace(|v| v / n);
        }
        let m = vectors.nrows();
        let locations = PatchLocations::new((0..m).map(|i| (0, i)).collect())?;
        Self::new(vectors, domain, locations)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Sample `m` distinct sites across taps, allocated proportionally to each
/// tap's site count with the remainder going to the largest tap.
pub fn sample_locations(
    tap_shapes: &[(usize, usize)],
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Result<PatchLocations> {
    let counts: Vec<usize> = tap_shapes.iter().map(|&(h, w)| h * w).collect();
    let total: usize = counts.iter().sum();
    if m > total {
        return Err(Error::NotEnoughLocations {
            requested: m,
            available: total,
        });
    }
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }

    let mut alloc: Vec<usize> = counts.iter().map(|&n| m * n / total).collect();
    let mut remainder = m - alloc.iter().sum::<usize>();
    // largest tap soaks up the remainder, spilling to the next largest if
    // its capacity binds
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(counts[i]));
    for &i in &order {
        if remainder == 0 {
            break;
        }
        let add = remainder.min(counts[i] - alloc[i]);
        alloc[i] += add;
        remainder -= add;
    }
    debug_assert_eq!(remainder, 0);

    let mut entries = Vec::with_capacity(m);
    for (tap, (&count, &take)) in counts.iter().zip(alloc.iter()).enumerate() {
        if take == 0 {
            continue;
        }
        for site in rand::seq::index::sample(rng, count, take) {
            entries.push((tap, site));
        }
    }
    PatchLocations::new(entries)
}

/// Build one (M, D) embedding matrix on the graph from per-tap feature maps.
///
/// Rows come back in the exact order of `locs.entries()`, whatever tap each
/// entry lives on.
pub fn embed_from_taps(
    bind: &mut Bind,
    proj: &ProjectorNet,
    taps: &[Id],
    locs: &PatchLocations,
) -> Result<Id> {
    let groups = locs.by_tap();
    let mut parts = Vec::with_capacity(groups.len());
    let mut concat_order = Vec::with_capacity(locs.m_total());
    for (tap, sites, rows) in &groups {
        if *tap >= taps.len() {
            return Err(Error::ShapeError(format!(
                "location references tap {tap} but only {} taps exist",
                taps.len()
            )));
        }
        let shape = bind.graph.value(taps[*tap]).shape().to_vec();
        let hw = shape[1] * shape[2];
        if let Some(bad) = sites.iter().find(|&&s| s >= hw) {
            return Err(Error::ShapeError(format!(
                "site {bad} out of range for tap {tap} with {hw} sites"
            )));
        }
        let raw = bind.graph.gather_sites(taps[*tap], sites);
        let z = proj.project(bind, *tap, raw)?;
        parts.push(z);
        concat_order.extend_from_slice(rows);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        bind.graph.concat_rows(&parts)
    };
    // permute concatenated rows back into entry order
    let mut perm = vec![0usize; locs.m_total()];
    for (concat_row, &orig_row) in concat_order.iter().enumerate() {
        perm[orig_row] = concat_row;
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        Ok(cat)
    } else {
        Ok(bind.graph.gather_rows(cat, &perm))
    }
}

/// Gather flat spatial sites of a (C,H,W) map into an (M,C) matrix without
/// graph bookkeeping.
pub fn gather_sites_array(map: &ndarray::Array3<f64>, sites: &[usize]) -> Array2<f64> {
    let (c, _h, w) = map.dim();
    let mut out = Array2::<f64>::zeros((sites.len(), c));
    for (m, &site) in sites.iter().enumerate() {
        let (i, j) = (site / w, site % w);
        for ci in 0..c {
            out[[m, ci]] = map[[ci, i, j]];
        }
    }
    out
}

fn encode_taps_const(
    graph: &mut Graph,
    store: &ParamStore,
    gen: &GeneratorNet,
    image: &StainedImage,
) -> Vec<Id> {
    let trainable: HashSet<ParamId> = HashSet::new();
    let mut bind = Bind::new(graph, store, &trainable);
    let x = bind.graph.constant(to_model_range(image).into_dyn());
    gen.encode(&mut bind, x)
}

/// Construct the anchor set `A` and positive sets `P_he`, `P_gt` at shared
/// locations (inference mode).
///
/// Anchors re-encode the generated image through the generator's own
/// encoder; positives encode the H&E input and the real-IHC ground truth.
pub fn build_sets(
    gen: &GeneratorNet,
    proj: &ProjectorNet,
    store: &ParamStore,
    he: &StainedImage,
    virtual_ihc: &StainedImage,
    ihc_gt: &StainedImage,
    locs: &PatchLocations,
) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
    let dims = (he.height(), he.width());
    for img in [virtual_ihc, ihc_gt] {
        if (img.height(), img.width()) != dims {
            return Err(Error::ShapeError(
                "build_sets requires all three images to share dimensions".into(),
            ));
        }
    }
    let mut out = Vec::with_capacity(3);
    for (img, domain) in [
        (virtual_ihc, EmbeddingDomain::AnchorVirtual),
        (he, EmbeddingDomain::PosHe),
        (ihc_gt, EmbeddingDomain::PosGt),
    ] {
        let mut graph = Graph::new();
        let taps = encode_taps_const(&mut graph, store, gen, img);
        let trainable: HashSet<ParamId> = HashSet::new();
        let mut bind = Bind::new(&mut graph, store, &trainable);
        let z = embed_from_taps(&mut bind, proj, &taps, locs)?;
        let vectors = graph
            .value(z)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embedding matrix rank")
            .to_owned();
        out.push(EmbeddingSet::new(vectors, domain, locs.clone())?);
    }
    let p_gt = out.pop().expect("three sets");
    let p_he = out.pop().expect("three sets");
    let anchors = out.pop().expect("three sets");
    Ok((anchors, p_he, p_gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetConfig;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_tap_exhaustive_is_permutation() {
        let locs = sample_locations(&[(16, 16)], 256, &mut rng(1)).unwrap();
        assert_eq!(locs.m_total(), 256);
        let mut sites: Vec<usize> = locs.entries().iter().map(|e| e.1).collect();
        sites.sort_unstable();
        assert_eq!(sites, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn not_enough_locations() {
        assert!(matches!(
            sample_locations(&[(4, 4)], 17, &mut rng(2)),
            Err(Error::NotEnoughLocations {
                requested: 17,
                available: 16
            })
        ));
    }

    #[test]
    fn proportional_allocation() {
        // 256 + 64 sites, m = 40 -> 32 and 8
        let locs = sample_locations(&[(16, 16), (8, 8)], 40, &mut rng(3)).unwrap();
        let n0 = locs.entries().iter().filter(|e| e.0 == 0).count();
        let n1 = locs.entries().iter().filter(|e| e.0 == 1).count();
        assert_eq!((n0, n1), (32, 8));
    }

    #[test]
    fn sampling_is_deterministic_and_injective() {
        let a = sample_locations(&[(8, 8), (4, 4)], 40, &mut rng(7)).unwrap();
        let b = sample_locations(&[(8, 8), (4, 4)], 40, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        let unique: HashSet<_> = a.entries().iter().collect();
        assert_eq!(unique.len(), 40);
    }

    #[test]
    fn remainder_spills_when_largest_tap_is_full() {
        // ten 1-site taps plus one 10-site tap, m = 19: floor allocation
        // gives 9 to the big tap and 0 elsewhere; the remainder cannot all
        // fit in the big tap
        let mut shapes = vec![(1, 1); 10];
        shapes.push((1, 10));
        let locs = sample_locations(&shapes, 19, &mut rng(4)).unwrap();
        assert_eq!(locs.m_total(), 19);
        let big = locs.entries().iter().filter(|e| e.0 == 10).count();
        assert_eq!(big, 10, "big tap saturates");
    }

    fn tiny_setup() -> (ParamStore, GeneratorNet, ProjectorNet) {
        let mut store = ParamStore::new();
        let cfg = NetConfig {
            base_width: 4,
            n_res_blocks: 1,
            disc_width: 4,
            disc_layers: 2,
            embed_dim: 8,
            proj_hidden: 8,
        };
        let mut r = rng(0);
        let gen = GeneratorNet::build(&mut store, &cfg, &mut r);
        let proj = ProjectorNet::build(&mut store, &gen.tap_channels(), &cfg, &mut r);
        (store, gen, proj)
    }

    fn random_image(size: usize, seed: u64) -> StainedImage {
        let mut r = rng(seed);
        let px = ndarray::Array3::from_shape_fn((size, size, 3), |_| r.gen::<f64>());
        StainedImage::new(px, crate::dataset::StainDomain::He, "t").unwrap()
    }

    #[test]
    fn identical_images_give_identical_anchor_and_he_sets() {
        let (store, gen, proj) = tiny_setup();
        let img = random_image(16, 5);
        let gt = random_image(16, 6);
        let shapes: Vec<(usize, usize)> = gen
            .tap_factors()
            .iter()
            .map(|f| (16 / f, 16 / f))
            .collect();
        let locs = sample_locations(&shapes, 24, &mut rng(8)).unwrap();
        let (a, p_he, p_gt) = build_sets(&gen, &proj, &store, &img, &img, &gt, &locs).unwrap();
        assert_eq!(a.vectors, p_he.vectors);
        assert_eq!(a.locations, p_he.locations);
        assert_eq!(a.locations, p_gt.locations);
        assert_eq!(a.domain, EmbeddingDomain::AnchorVirtual);
        assert_eq!(p_gt.domain, EmbeddingDomain::PosGt);
    }

    #[test]
    fn permuting_locations_permutes_all_sets_together() {
        let (store, gen, proj) = tiny_setup();
        let he = random_image(16, 9);
        let virt = random_image(16, 10);
        let gt = random_image(16, 11);
        let shapes: Vec<(usize, usize)> = gen
            .tap_factors()
            .iter()
            .map(|f| (16 / f, 16 / f))
            .collect();
        let locs = sample_locations(&shapes, 12, &mut rng(12)).unwrap();
        let (a1, h1, g1) = build_sets(&gen, &proj, &store, &he, &virt, &gt, &locs).unwrap();

        // reverse entry order as the permutation
        let rev: Vec<_> = locs.entries().iter().rev().cloned().collect();
        let locs_rev = PatchLocations::new(rev).unwrap();
        let (a2, h2, g2) = build_sets(&gen, &proj, &store, &he, &virt, &gt, &locs_rev).unwrap();

        let m = locs.m_total();
        for i in 0..m {
            let j = m - 1 - i;
            for ((x, y), (w, z)) in [
                ((&a1, &a2), (&h1, &h2)),
                ((&h1, &h2), (&g1, &g2)),
            ] {
                let d1: f64 = x
                    .vectors
                    .row(i)
                    .iter()
                    .zip(y.vectors.row(j).iter())
                    .map(|(p, q)| (p - q).abs())
                    .sum();
                let d2: f64 = w
                    .vectors
                    .row(i)
                    .iter()
                    .zip(z.vectors.row(j).iter())
                    .map(|(p, q)| (p - q).abs())
                    .sum();
                assert!(d1 < 1e-12 && d2 < 1e-12, "row {i} mismatch after permutation");
            }
        }
    }

    #[test]
    fn unit_norm_rows_in_all_sets() {
        let (store, gen, proj) = tiny_setup();
        let he = random_image(16, 13);
        let virt = random_image(16, 14);
        let gt = random_image(16, 15);
        let shapes: Vec<(usize, usize)> = gen
            .tap_factors()
            .iter()
            .map(|f| (16 / f, 16 / f))
            .collect();
        let locs = sample_locations(&shapes, 20, &mut rng(16)).unwrap();
        let (a, h, g) = build_sets(&gen, &proj, &store, &he, &virt, &gt, &locs).unwrap();
        for set in [&a, &h, &g] {
            for row in set.vectors.outer_iter() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_locations_rejected() {
        assert!(PatchLocations::new(vec![(0, 1), (0, 1)]).is_err());
    }

    #[test]
    fn from_unnormalized_rejects_zero_rows() {
        let m = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            EmbeddingSet::from_unnormalized(m, EmbeddingDomain::AnchorVirtual),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }
}
