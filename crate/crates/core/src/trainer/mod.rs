//! Training orchestration: alternating discriminator/generator steps,
//! epoch scheduling, checkpointing, and the translation and evaluation
//! pipelines.

pub mod config;
mod pipeline;

pub use config::{lr_schedule, TapReduction, TrainConfig};
pub use pipeline::{evaluate, translate, MetricConfig};

use crate::dataset::{random_crop_pair, scan_dataset, MatchedPair, Split};
use crate::error::{Error, Result};
use crate::networks::{
    checkpoint::Checkpoint, encoder_features, to_model_range, Bind, DiscriminatorNet,
    GeneratorNet, NetConfig, ProjectorNet,
};
use crate::objectives::{
    adaptive_weights_from_rows, contrastive_loss_graph, gp_loss_graph, lsgan_discriminator_graph,
    lsgan_generator_graph, ContrastiveConfig, LossBreakdown,
};
use crate::patching::{gather_sites_array, sample_locations, PatchLocations};
use crate::tensor::{Adam, Arr, Graph, Id, ParamId, ParamStore};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub mix_he: f64,
    pub mix_gt: f64,
    pub gp: f64,
    pub total_g: f64,
}

const TRACE_HEADER: &str = "iteration,epoch,lr,adv_g,adv_d,mix_he,mix_gt,gp,total_g";

/// Append rows to a trace file, writing the header when the file is new.
pub fn append_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{TRACE_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.iteration, r.epoch, r.lr, r.adv_g, r.adv_d, r.mix_he, r.mix_gt, r.gp, r.total_g
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a trace file back into rows.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != TRACE_HEADER {
                return Err(Error::ConfigError(format!("bad trace header: `{line}`")));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::ConfigError(format!("bad trace row: `{line}`")));
        }
        let pf = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::ConfigError(format!("bad trace value `{s}`: {e}")))
        };
        rows.push(TraceRow {
            iteration: parts[0]
                .parse()
                .map_err(|e| Error::ConfigError(format!("bad iteration: {e}")))?,
            epoch: parts[1]
                .parse()
                .map_err(|e| Error::ConfigError(format!("bad epoch: {e}")))?,
            lr: pf(parts[2])?,
            adv_g: pf(parts[3])?,
            adv_d: pf(parts[4])?,
            mix_he: pf(parts[5])?,
            mix_gt: pf(parts[6])?,
            gp: pf(parts[7])?,
            total_g: pf(parts[8])?,
        });
    }
    Ok(rows)
}

/// Independent deterministic stream off a master seed. Streams in use:
/// 1 weight init, 2 data order and crops, 3 patch locations, 4 toy
/// synthesis.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut r = ChaCha12Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha12Rng {
    seeded_rng(seed, stream)
}

/// Full mutable training state: weights, optimizer moments, rng streams,
/// and counters. Checkpoints capture all of it.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub gen: GeneratorNet,
    pub disc: DiscriminatorNet,
    pub proj: ProjectorNet,
    opt_g: Adam,
    opt_d: Adam,
    rng_data: ChaCha12Rng,
    rng_locs: ChaCha12Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization iterations (one D step plus one G step each).
    pub iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng_init = seeded_stream(cfg.seed, 1);
        let gen = GeneratorNet::build(&mut store, &cfg.net, &mut rng_init);
        let disc = DiscriminatorNet::build(&mut store, &cfg.net, &mut rng_init);
        let proj = ProjectorNet::build(&mut store, &gen.tap_channels(), &cfg.net, &mut rng_init);
        let mut g_params = gen.params();
        g_params.extend(proj.params());
        let opt_g = Adam::new(&store, g_params, cfg.adam_beta1, cfg.adam_beta2);
        let opt_d = Adam::new(&store, disc.params(), cfg.adam_beta1, cfg.adam_beta2);
        let rng_data = seeded_stream(cfg.seed, 2);
        let rng_locs = seeded_stream(cfg.seed, 3);
        Ok(Self {
            cfg,
            store,
            gen,
            disc,
            proj,
            opt_g,
            opt_d,
            rng_data,
            rng_locs,
            epoch: 0,
            iteration: 0,
        })
    }

    fn trainable_set(ids: &[ParamId]) -> HashSet<ParamId> {
        ids.iter().copied().collect()
    }

    /// One alternating update: discriminator step on the adversarial loss,
    /// then generator+projector step on the total objective. The pair must
    /// already be cropped to `cfg.crop`.
    pub fn train_step(&mut self, pair: &MatchedPair) -> Result<LossBreakdown> {
        let c = self.cfg.crop;
        if pair.he.height() != c || pair.he.width() != c {
            return Err(Error::InvalidArgument(format!(
                "train_step expects a {c}x{c} crop, got {}x{}",
                pair.he.height(),
                pair.he.width()
            )));
        }
        let lr = lr_schedule(self.epoch.min(self.cfg.epochs - 1), &self.cfg);

        let x_he = to_model_range(&pair.he).into_dyn();
        let x_gt = to_model_range(&pair.ihc_gt).into_dyn();

        // ---- D step (generator output detached) ----
        let fake_const = {
            let mut graph = Graph::new();
            let none = HashSet::new();
            let mut bind = Bind::new(&mut graph, &self.store, &none);
            let x = bind.graph.constant(x_he.clone());
            let (y, _) = self.gen.forward(&mut bind, x);
            graph.value(y).clone()
        };
        let adv_d = {
            let trainable = Self::trainable_set(self.opt_d.params());
            let mut graph = Graph::new();
            let mut bind = Bind::new(&mut graph, &self.store, &trainable);
            let real = bind.graph.constant(x_gt.clone());
            let fake = bind.graph.constant(fake_const.clone());
            let lr_real = self.disc.forward(&mut bind, real);
            let lr_fake = self.disc.forward(&mut bind, fake);
            let adv_d = lsgan_discriminator_graph(bind.graph, lr_real, lr_fake);
            bind.graph.backward(adv_d);
            let grads: Vec<Option<Arr>> = self
                .opt_d
                .params()
                .to_vec()
                .iter()
                .map(|&p| bind.grad_of(p))
                .collect();
            let value = bind.graph.scalar(adv_d);
            self.opt_d.step(&mut self.store, lr, &grads);
            value
        };

        // ---- G step ----
        let progress = self.epoch as f64 / self.cfg.epochs as f64;
        let ccfg = ContrastiveConfig::new(self.cfg.tau, self.cfg.loss_variant)?;

        // ground-truth encoder features, constant unless the ablation flag
        // routes gradients through them
        let gt_taps_const = if self.cfg.use_gt_branch && !self.cfg.gt_branch_gradient {
            Some(encoder_features(&self.gen, &self.store, &pair.ihc_gt)?)
        } else {
            None
        };

        let trainable = Self::trainable_set(self.opt_g.params());
        let mut graph = Graph::new();
        let mut bind = Bind::new(&mut graph, &self.store, &trainable);
        let x = bind.graph.constant(x_he);
        let (y, taps_he) = self.gen.forward(&mut bind, x);

        let fake_logits = self.disc.forward(&mut bind, y);
        let adv_g_id = lsgan_generator_graph(bind.graph, fake_logits);

        // anchors re-encode the generated image through the same encoder
        let taps_v = self.gen.encode(&mut bind, y);
        let tap_shapes: Vec<(usize, usize)> = taps_v
            .iter()
            .map(|&t| {
                let s = bind.graph.value(t).shape();
                (s[1], s[2])
            })
            .collect();
        let locs = sample_locations(&tap_shapes, self.cfg.m_patches, &mut self.rng_locs)?;

        let gt_taps_graph = if self.cfg.use_gt_branch && self.cfg.gt_branch_gradient {
            let xg = bind.graph.constant(x_gt.clone());
            Some(self.gen.encode(&mut bind, xg))
        } else {
            None
        };

        let (mix_he_id, mix_gt_id) = self.contrastive_terms(
            &mut bind,
            &locs,
            &taps_v,
            &taps_he,
            gt_taps_const.as_deref(),
            gt_taps_graph.as_deref(),
            ccfg,
            progress,
        )?;

        let virt01 = bind.graph.affine(y, 0.5, 0.5);
        let gt01 = {
            let (h, w) = (pair.ihc_gt.height(), pair.ihc_gt.width());
            let chw =
                Array3::from_shape_fn((3, h, w), |(cc, yy, xx)| pair.ihc_gt.pixels[[yy, xx, cc]]);
            bind.graph.constant(chw.into_dyn())
        };
        let gp_id = gp_loss_graph(
            bind.graph,
            virt01,
            gt01,
            self.cfg.gp_levels,
            &self.cfg.gp_weights,
        );

        let mut total = bind.graph.add(adv_g_id, mix_he_id);
        if let Some(gt_id) = mix_gt_id {
            total = bind.graph.add(total, gt_id);
        }
        let gp_scaled = bind.graph.affine(gp_id, self.cfg.lambda_gp, 0.0);
        total = bind.graph.add(total, gp_scaled);

        bind.graph.backward(total);
        let grads: Vec<Option<Arr>> = self
            .opt_g
            .params()
            .to_vec()
            .iter()
            .map(|&p| bind.grad_of(p))
            .collect();

        let adv_g = bind.graph.scalar(adv_g_id);
        let mix_he = bind.graph.scalar(mix_he_id);
        let mix_gt = mix_gt_id.map_or(0.0, |id| bind.graph.scalar(id));
        let gp = bind.graph.scalar(gp_id);
        self.opt_g.step(&mut self.store, lr, &grads);

        let breakdown = LossBreakdown::new(adv_g, adv_d, mix_he, mix_gt, gp, self.cfg.lambda_gp)?;
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Contrastive losses over shared locations. Returns the H&E term and
    /// the optional weighted ground-truth term.
    #[allow(clippy::too_many_arguments)]
    fn contrastive_terms(
        &self,
        bind: &mut Bind,
        locs: &PatchLocations,
        taps_v: &[Id],
        taps_he: &[Id],
        gt_taps_const: Option<&[Array3<f64>]>,
        gt_taps_graph: Option<&[Id]>,
        ccfg: ContrastiveConfig,
        progress: f64,
    ) -> Result<(Id, Option<Id>)> {
        struct TapSets {
            za: Id,
            zhe: Id,
            zgt: Option<Id>,
        }
        let mut per_tap = Vec::new();
        for (tap, sites, _rows) in locs.by_tap() {
            let raw_a = bind.graph.gather_sites(taps_v[tap], &sites);
            let za = self.proj.project(bind, tap, raw_a)?;
            let raw_he = bind.graph.gather_sites(taps_he[tap], &sites);
            let zhe = self.proj.project(bind, tap, raw_he)?;
            let zgt = if let Some(graph_taps) = gt_taps_graph {
                let raw_gt = bind.graph.gather_sites(graph_taps[tap], &sites);
                Some(self.proj.project(bind, tap, raw_gt)?)
            } else if let Some(const_taps) = gt_taps_const {
                let raw = gather_sites_array(&const_taps[tap], &sites);
                let z = crate::networks::project_patches(&self.proj, &self.store, &raw, tap)?;
                Some(bind.graph.constant(z.into_dyn()))
            } else {
                None
            };
            per_tap.push(TapSets { za, zhe, zgt });
        }

        let as2 = |g: &Graph, id: Id| {
            g.value(id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("embedding rank")
                .to_owned()
        };

        match self.cfg.tap_reduction {
            TapReduction::Mean => {
                let n = per_tap.len() as f64;
                let mut he_total: Option<Id> = None;
                let mut gt_total: Option<Id> = None;
                for sets in &per_tap {
                    let l_he = contrastive_loss_graph(bind.graph, sets.za, sets.zhe, ccfg, None);
                    he_total = Some(match he_total {
                        Some(t) => bind.graph.add(t, l_he),
                        None => l_he,
                    });
                    if let Some(zgt) = sets.zgt {
                        let a_rows = as2(bind.graph, sets.za);
                        let g_rows = as2(bind.graph, zgt);
                        let w =
                            adaptive_weights_from_rows(a_rows.view(), g_rows.view(), progress)?;
                        let l_gt =
                            contrastive_loss_graph(bind.graph, sets.za, zgt, ccfg, Some(&w.omega));
                        gt_total = Some(match gt_total {
                            Some(t) => bind.graph.add(t, l_gt),
                            None => l_gt,
                        });
                    }
                }
                let he = he_total.expect("at least one tap");
                let he = bind.graph.affine(he, 1.0 / n, 0.0);
                let gt = gt_total.map(|t| bind.graph.affine(t, 1.0 / n, 0.0));
                Ok((he, gt))
            }
            TapReduction::Pooled => {
                let za_ids: Vec<Id> = per_tap.iter().map(|s| s.za).collect();
                let zhe_ids: Vec<Id> = per_tap.iter().map(|s| s.zhe).collect();
                let za = bind.graph.concat_rows(&za_ids);
                let zhe = bind.graph.concat_rows(&zhe_ids);
                let l_he = contrastive_loss_graph(bind.graph, za, zhe, ccfg, None);
                let l_gt = if per_tap.iter().all(|s| s.zgt.is_some()) && !per_tap.is_empty() {
                    let zgt_ids: Vec<Id> = per_tap.iter().map(|s| s.zgt.unwrap()).collect();
                    let zgt = bind.graph.concat_rows(&zgt_ids);
                    let a_rows = as2(bind.graph, za);
                    let g_rows = as2(bind.graph, zgt);
                    let w = adaptive_weights_from_rows(a_rows.view(), g_rows.view(), progress)?;
                    Some(contrastive_loss_graph(bind.graph, za, zgt, ccfg, Some(&w.omega)))
                } else {
                    None
                };
                Ok((l_he, l_gt))
            }
        }
    }

    /// Capture the full training state into a checkpoint file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Arr)> = self
            .store
            .iter()
            .map(|(_, name, arr)| (name.to_string(), arr.clone()))
            .collect();
        for (pid, m, v) in self.opt_g.moments() {
            let name = self.store.name(pid);
            tensors.push((format!("opt_g.m.{name}"), m.clone()));
            tensors.push((format!("opt_g.v.{name}"), v.clone()));
        }
        for (pid, m, v) in self.opt_d.moments() {
            let name = self.store.name(pid);
            tensors.push((format!("opt_d.m.{name}"), m.clone()));
            tensors.push((format!("opt_d.v.{name}"), v.clone()));
        }
        let extra = serde_json::json!({
            "config": self.cfg,
            "rng_data_word_pos": self.rng_data.get_word_pos().to_string(),
            "rng_locs_word_pos": self.rng_locs.get_word_pos().to_string(),
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
            "tool_version": env!("CARGO_PKG_VERSION"),
        });
        Checkpoint {
            epoch: self.epoch,
            iteration: self.iteration,
            extra,
            tensors,
        }
        .save(path)
    }

    /// Restore a trainer from a checkpoint; architecture and config come
    /// from the checkpoint itself.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: TrainConfig = serde_json::from_value(ck.extra["config"].clone())
            .map_err(|e| Error::CheckpointFormatError(format!("config decode: {e}")))?;
        let mut trainer = Self::new(cfg)?;

        let names: Vec<(ParamId, String)> = trainer
            .store
            .iter()
            .map(|(pid, name, _)| (pid, name.to_string()))
            .collect();
        for (pid, name) in &names {
            let t = ck.tensor(name).ok_or_else(|| {
                Error::CheckpointFormatError(format!("checkpoint missing tensor `{name}`"))
            })?;
            *trainer.store.get_mut(*pid) = t.clone();
        }
        let restore_opt = |opt: &mut Adam, prefix: &str, t: u64| -> Result<()> {
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            for &pid in opt.params() {
                let name = names
                    .iter()
                    .find(|(p, _)| *p == pid)
                    .map(|(_, n)| n.clone())
                    .expect("param registered");
                let m = ck.tensor(&format!("{prefix}.m.{name}")).ok_or_else(|| {
                    Error::CheckpointFormatError(format!("missing moment {prefix}.m.{name}"))
                })?;
                let v = ck.tensor(&format!("{prefix}.v.{name}")).ok_or_else(|| {
                    Error::CheckpointFormatError(format!("missing moment {prefix}.v.{name}"))
                })?;
                ms.push(m.clone());
                vs.push(v.clone());
            }
            opt.restore(t, ms, vs);
            Ok(())
        };
        let g_t = ck.extra["opt_g_t"].as_u64().unwrap_or(0);
        let d_t = ck.extra["opt_d_t"].as_u64().unwrap_or(0);
        restore_opt(&mut trainer.opt_g, "opt_g", g_t)?;
        restore_opt(&mut trainer.opt_d, "opt_d", d_t)?;

        let parse_pos = |key: &str| -> Result<u128> {
            ck.extra[key]
                .as_str()
                .ok_or_else(|| Error::CheckpointFormatError(format!("missing {key}")))?
                .parse::<u128>()
                .map_err(|e| Error::CheckpointFormatError(format!("bad {key}: {e}")))
        };
        trainer.rng_data.set_word_pos(parse_pos("rng_data_word_pos")?);
        trainer.rng_locs.set_word_pos(parse_pos("rng_locs_word_pos")?);
        trainer.epoch = ck.epoch;
        trainer.iteration = ck.iteration;
        Ok(trainer)
    }

    /// Architecture config in use (mirrors `cfg.net`).
    pub fn net_config(&self) -> &NetConfig {
        &self.cfg.net
    }
}

/// Artifacts produced by a [`train`] run.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub trace_path: PathBuf,
    pub epochs_completed: usize,
    pub iterations: u64,
}

/// Full training loop over `<data_root>/train`. Writes per-epoch
/// checkpoints, a `checkpoint-latest.ckpt`, and an append-only loss trace.
/// `resume` continues from a previous checkpoint, appending to its trace.
pub fn train(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs = scan_dataset(data_root, Split::Train)?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(path)?,
        None => Trainer::new(cfg.clone())?,
    };
    let cfg = trainer.cfg.clone();
    for p in &pairs {
        if p.he.height() < cfg.crop || p.he.width() < cfg.crop {
            return Err(Error::CropTooLarge {
                size: cfg.crop,
                height: p.he.height(),
                width: p.he.width(),
            });
        }
    }

    let trace_path = out_dir.join("trace.csv");
    if resume.is_none() && trace_path.exists() {
        std::fs::remove_file(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    }

    let latest = out_dir.join("checkpoint-latest.ckpt");
    let mut stop = false;
    while trainer.epoch < cfg.epochs && !stop {
        let epoch = trainer.epoch;
        let lr = lr_schedule(epoch, &cfg);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut trainer.rng_data);
        for idx in order {
            let cropped = random_crop_pair(&pairs[idx], cfg.crop, &mut trainer.rng_data)?;
            let iteration = trainer.iteration;
            let breakdown = match trainer.train_step(&cropped) {
                Ok(b) => b,
                Err(e) => {
                    write_diagnostic_dump(out_dir, &trainer, &cropped, &e)?;
                    return Err(e);
                }
            };
            append_trace(
                &trace_path,
                &[TraceRow {
                    iteration,
                    epoch,
                    lr,
                    adv_g: breakdown.adv_g,
                    adv_d: breakdown.adv_d,
                    mix_he: breakdown.mix_he,
                    mix_gt: breakdown.mix_gt,
                    gp: breakdown.gp,
                    total_g: breakdown.total_g,
                }],
            )?;
            if let Some(max) = cfg.max_iters {
                if trainer.iteration >= max {
                    stop = true;
                    break;
                }
            }
        }
        if !stop {
            trainer.epoch += 1;
            if trainer.epoch % cfg.checkpoint_every == 0 || trainer.epoch == cfg.epochs {
                let path = out_dir.join(format!("checkpoint-epoch-{:03}.ckpt", trainer.epoch));
                trainer.save_checkpoint(&path)?;
            }
        }
        trainer.save_checkpoint(&latest)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: latest,
        trace_path,
        epochs_completed: trainer.epoch,
        iterations: trainer.iteration,
    })
}

fn write_diagnostic_dump(
    out_dir: &Path,
    trainer: &Trainer,
    pair: &MatchedPair,
    err: &Error,
) -> Result<()> {
    let path = out_dir.join("diagnostic-dump.txt");
    let body = format!(
        "training halted\n\
         error = {err}\n\
         iteration = {}\n\
         epoch = {}\n\
         pair_id = {}\n\n\
         # resolved config\n{}",
        trainer.iteration,
        trainer.epoch,
        pair.pair_id,
        trainer.cfg.to_flat_text()
    );
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_toy_dataset;
    use crate::objectives::LossVariant;

    fn toy_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.net.base_width = 8;
        cfg.net.n_res_blocks = 1;
        cfg.net.disc_width = 8;
        cfg.net.embed_dim = 32;
        cfg.net.proj_hidden = 32;
        cfg.crop = 32;
        cfg.m_patches = 32;
        cfg.epochs = 4;
        cfg.decay_start = 2;
        cfg.seed = 11;
        cfg
    }

    fn toy_root(n: usize, size: usize, seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        make_toy_dataset(dir.path(), n, size, &mut rng).unwrap();
        dir
    }

    fn first_crop(root: &Path, cfg: &TrainConfig, seed: u64) -> MatchedPair {
        let pairs = scan_dataset(root, Split::Train).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        random_crop_pair(&pairs[0], cfg.crop, &mut rng).unwrap()
    }

    #[test]
    fn step_produces_finite_consistent_breakdown() {
        let cfg = toy_cfg();
        let data = toy_root(2, 48, 1);
        let pair = first_crop(data.path(), &cfg, 5);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let b = t.train_step(&pair).unwrap();
        for v in [b.adv_g, b.adv_d, b.mix_he, b.mix_gt, b.gp, b.total_g] {
            assert!(v.is_finite());
        }
        let expect = b.adv_g + b.mix_he + b.mix_gt + cfg.lambda_gp * b.gp;
        assert!((b.total_g - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        assert_eq!(t.iteration, 1);
    }

    #[test]
    fn mix_variant_dominates_nce_at_step_level() {
        let data = toy_root(2, 48, 2);
        let mut cfg_nce = toy_cfg();
        cfg_nce.loss_variant = LossVariant::PatchNce;
        let mut cfg_mix = toy_cfg();
        cfg_mix.loss_variant = LossVariant::MixDomain;

        let pair = first_crop(data.path(), &cfg_nce, 7);
        let b_nce = Trainer::new(cfg_nce).unwrap().train_step(&pair).unwrap();
        let b_mix = Trainer::new(cfg_mix).unwrap().train_step(&pair).unwrap();
        assert!(
            b_mix.mix_he > b_nce.mix_he,
            "mix {} must exceed nce {}",
            b_mix.mix_he,
            b_nce.mix_he
        );
    }

    #[test]
    fn steps_are_deterministic_across_runs() {
        let cfg = toy_cfg();
        let data = toy_root(2, 48, 3);
        let pair = first_crop(data.path(), &cfg, 9);
        let run = |cfg: TrainConfig| {
            let mut t = Trainer::new(cfg).unwrap();
            (0..3)
                .map(|_| t.train_step(&pair).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run(cfg.clone());
        let b = run(cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_next_step_exactly() {
        let cfg = toy_cfg();
        let data = toy_root(2, 48, 4);
        let pair = first_crop(data.path(), &cfg, 13);

        let mut t = Trainer::new(cfg).unwrap();
        t.train_step(&pair).unwrap();
        t.train_step(&pair).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("mid.ckpt");
        t.save_checkpoint(&ck).unwrap();

        let direct = t.train_step(&pair).unwrap();
        let mut restored = Trainer::from_checkpoint(&ck).unwrap();
        assert_eq!(restored.iteration, 2);
        let resumed = restored.train_step(&pair).unwrap();
        assert!((direct.total_g - resumed.total_g).abs() <= 1e-12);
        assert_eq!(direct, resumed);
    }

    #[test]
    fn gt_branch_off_zeroes_mix_gt() {
        let mut cfg = toy_cfg();
        cfg.use_gt_branch = false;
        let data = toy_root(2, 48, 5);
        let pair = first_crop(data.path(), &cfg, 15);
        let b = Trainer::new(cfg).unwrap().train_step(&pair).unwrap();
        assert_eq!(b.mix_gt, 0.0);
        assert!(b.mix_he > 0.0);
    }

    #[test]
    fn pooled_reduction_runs() {
        let mut cfg = toy_cfg();
        cfg.tap_reduction = TapReduction::Pooled;
        let data = toy_root(2, 48, 6);
        let pair = first_crop(data.path(), &cfg, 17);
        let b = Trainer::new(cfg).unwrap().train_step(&pair).unwrap();
        assert!(b.total_g.is_finite());
    }

    #[test]
    fn gt_gradient_ablation_runs() {
        let mut cfg = toy_cfg();
        cfg.gt_branch_gradient = true;
        let data = toy_root(2, 48, 7);
        let pair = first_crop(data.path(), &cfg, 19);
        let b = Trainer::new(cfg).unwrap().train_step(&pair).unwrap();
        assert!(b.mix_gt > 0.0);
    }

    #[test]
    fn train_loop_writes_trace_and_checkpoints_and_resumes() {
        let mut cfg = toy_cfg();
        cfg.epochs = 3;
        cfg.decay_start = 2;
        let data = toy_root(2, 48, 8);
        let out = tempfile::tempdir().unwrap();

        let outcome = train(&cfg, data.path(), out.path(), None).unwrap();
        assert_eq!(outcome.epochs_completed, 3);
        assert_eq!(outcome.iterations, 6); // 2 pairs x 3 epochs
        let rows = read_trace(&outcome.trace_path).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let expect = r.adv_g + r.mix_he + r.mix_gt + cfg.lambda_gp * r.gp;
            assert!((r.total_g - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            assert_eq!(r.lr, lr_schedule(r.epoch, &cfg));
        }
        assert!(out.path().join("checkpoint-epoch-003.ckpt").exists());
        assert!(out.path().join("checkpoint-latest.ckpt").exists());

        // resuming the epoch-2 checkpoint reproduces the final epoch of the
        // uninterrupted run bit-for-bit, starting at the epoch-2 lr
        let ck2 = out.path().join("checkpoint-epoch-002.ckpt");
        assert!(ck2.exists());
        let out2 = tempfile::tempdir().unwrap();
        let outcome2 = train(&cfg, data.path(), out2.path(), Some(&ck2)).unwrap();
        let rows2 = read_trace(&outcome2.trace_path).unwrap();
        assert_eq!(rows2.len(), 2); // one remaining epoch over 2 pairs
        for (a, b) in rows[4..].iter().zip(rows2.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(rows2[0].epoch, 2);
        assert_eq!(rows2[0].lr, lr_schedule(2, &cfg));
    }

    #[test]
    fn non_finite_loss_halts_with_diagnostic_dump() {
        let mut cfg = toy_cfg();
        let data = toy_root(2, 48, 10);
        let out = tempfile::tempdir().unwrap();
        // poison the generator head so the first step produces NaN (the
        // head feeds tanh, which propagates NaN into the pyramid loss)
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let pid = t.store.id_of("g.head.conv.w").unwrap();
        t.store.get_mut(pid).fill(f64::NAN);
        let pair = first_crop(data.path(), &cfg, 21);
        match t.train_step(&pair) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
        // the loop path writes a diagnostic dump before bubbling the error
        cfg.lr0 = f64::MAX; // first optimizer update overflows the weights
        let result = train(&cfg, data.path(), out.path(), None);
        assert!(matches!(result, Err(Error::NonFiniteLoss { .. })));
        let dump = out.path().join("diagnostic-dump.txt");
        assert!(dump.exists(), "diagnostic dump must be written");
        let body = std::fs::read_to_string(dump).unwrap();
        assert!(body.contains("error = non-finite loss"));
    }

    #[test]
    fn max_iters_stops_early() {
        let mut cfg = toy_cfg();
        cfg.max_iters = Some(3);
        let data = toy_root(2, 48, 9);
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, data.path(), out.path(), None).unwrap();
        assert_eq!(outcome.iterations, 3);
        let rows = read_trace(&outcome.trace_path).unwrap();
        assert_eq!(rows.len(), 3);
    }
}
