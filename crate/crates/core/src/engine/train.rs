use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::checkpoint::TrainState;
use super::config::RunConfig;
use super::embed::embed_images;
use super::optim::Sgd;
use super::schedule::lr_at;
use crate::autodiff::{Tape, Var};
use crate::csl::{bank_init, csl_loss_tape, select_positives, MemoryBank};
use crate::data::{augment, generate_dataset, pk_sample, Dataset};
use crate::encoder::{Encoder, EncoderParams};
use crate::error::{PatError, Result};
use crate::eval::{compute_metrics, RetrievalResult, SampleMeta};
use crate::objectives::{
    build_soft_label, psd_active, psd_loss_tape, smoothed_ce_tape, total_loss, AblationFlags, LossBreakdown,
    LossInputs,
};
use crate::tensor::{Real, Tensor};

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Whether the bank-based terms were active this epoch.
    pub csl_active: bool,
    /// Per-step means.
    pub loss: LossBreakdown,
}

/// Result of a single optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// A generated source set plus the model geometry, ready to train.
pub struct Trainer {
    config: RunConfig,
    encoder: Encoder,
    source: Dataset,
    images: Vec<Tensor<f32>>,
    ids: Vec<usize>,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::with_default_regions(config.model.clone())?;
        let d = &config.data;
        let source = generate_dataset(
            d.source_ids,
            d.images_per_id,
            &d.source,
            config.train.seed,
            config.model.image_h,
            config.model.image_w,
        )?;
        Self::with_dataset(config, encoder, source)
    }

    /// Trains on an explicit source set instead of the generated one.
    pub fn with_dataset(config: RunConfig, encoder: Encoder, source: Dataset) -> Result<Self> {
        let ids = source.ids();
        if let Some(&bad) = ids.iter().find(|&&i| i >= config.model.num_classes) {
            return Err(PatError::Index {
                what: "source identity",
                index: bad,
                len: config.model.num_classes,
            });
        }
        let t = &config.train;
        // batch count depends only on per-id chunk counts, not on the shuffle
        let steps_per_epoch = pk_sample(&ids, t.p, t.k_per_id, t.seed, 0)?.len();
        if steps_per_epoch == 0 {
            return Err(PatError::config("PK sampling yields no batch"));
        }
        let images = source.images();
        Ok(Self {
            config,
            encoder,
            source,
            images,
            ids,
            steps_per_epoch,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let m = &self.config.model;
        let params = EncoderParams::<f32>::init(m, self.config.train.seed)?;
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
        let bank = MemoryBank::empty(
            m.num_parts,
            self.images.len(),
            m.embed_dim,
            self.ids.clone(),
            self.config.csl.momentum as f32,
        )?;
        Ok(TrainState {
            epoch: 0,
            step: 0,
            params,
            velocity,
            bank,
        })
    }

    fn flags(&self) -> AblationFlags {
        self.config.train.ablation
    }

    /// One forward/backward/update on the samples `batch`. Numerical
    /// failures are reported with the epoch and step they occurred at.
    pub fn step(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepOutcome> {
        let (epoch, step) = (state.epoch, state.step);
        self.step_inner(state, batch).map_err(|e| match e {
            PatError::NonFinite(m) if !m.starts_with("epoch ") => {
                PatError::NonFinite(format!("epoch {epoch} step {step}: {m}"))
            }
            other => other,
        })
    }

    fn step_inner(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepOutcome> {
        let cfg = &self.config;
        let t = &cfg.train;
        let num_parts = cfg.model.num_parts;
        let lr = lr_at(state.step, t, self.steps_per_epoch);

        let augmented: Vec<Tensor<f32>> = batch
            .iter()
            .map(|&i| augment(&self.images[i], t.flip_prob, t.seed, state.step as u64, i as u64))
            .collect();
        let refs: Vec<&Tensor<f32>> = augmented.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.ids[i]).collect();

        let mut tape = Tape::<f32>::new();
        let vars = state.params.register(&mut tape);
        let out = self.encoder.forward_tape(&mut tape, &state.params, &vars, &refs)?;

        let triplet = tape.soft_margin_triplet(out.global, &labels)?;
        let mut terms = vec![triplet];
        let mut inputs = LossInputs {
            triplet: tape.scalar(triplet).f64(),
            csl: vec![0.0; num_parts],
            ..Default::default()
        };

        // the bank-based terms start once the bank has been filled
        let csl_active = self.flags().csl_on && state.bank.is_initialized() && state.epoch >= 1;
        let mut neighbor_ids: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        if csl_active {
            for part in 0..num_parts {
                let feats = tape.value(out.locals[part]).clone();
                let positives = batch
                    .iter()
                    .enumerate()
                    .map(|(r, &j)| select_positives(&state.bank, part, feats.row(r), Some(j), cfg.csl.k))
                    .collect::<Result<Vec<_>>>()?;
                for (n, p) in neighbor_ids.iter_mut().zip(&positives) {
                    n.extend_from_slice(&p.ids);
                }
                let l = csl_loss_tape(&mut tape, out.locals[part], &state.bank, part, &positives, cfg.csl.tau as f32)?;
                inputs.csl[part] = tape.scalar(l).f64();
                terms.push(l);
            }
        }
        let effective = AblationFlags {
            csl_on: csl_active,
            psd_on: self.flags().psd_on,
        };
        if psd_active(effective) {
            let soft = neighbor_ids
                .iter()
                .zip(&labels)
                .map(|(n, &y)| build_soft_label(y, n, cfg.psd.alpha, cfg.model.num_classes))
                .collect::<Result<Vec<_>>>()?;
            let l = psd_loss_tape(&mut tape, out.logits, &soft, &labels, cfg.psd.lambda, cfg.psd.smoothing)?;
            inputs.psd = tape.scalar(l).f64();
            terms.push(l);
        } else {
            let l = smoothed_ce_tape(&mut tape, out.logits, &labels, cfg.psd.smoothing)?;
            inputs.ce = tape.scalar(l).f64();
            terms.push(l);
        }
        let loss = total_loss(&inputs, effective);

        let mut total: Var = terms[0];
        for &v in &terms[1..] {
            total = tape.add(total, v)?;
        }
        let value = tape.scalar(total).f64();
        if !value.is_finite() {
            return Err(PatError::NonFinite(format!(
                "epoch {} step {}: training loss ({loss:?})",
                state.epoch, state.step
            )));
        }
        let grads = tape.backward(total)?;
        let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

        // bank rows track this iteration's features, taken before the update
        if state.bank.is_initialized() {
            for part in 0..num_parts {
                let feats = tape.value(out.locals[part]);
                for (r, &j) in batch.iter().enumerate() {
                    state.bank.update(j, part, feats.row(r))?;
                }
            }
        }

        let sgd = Sgd {
            momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            clip_norm: t.grad_clip,
        };
        sgd.step(lr, state.params.tensors_mut(), &mut state.velocity, &grads)?;
        state.step += 1;
        Ok(StepOutcome { lr, loss })
    }

    /// Runs epoch `state.epoch` and advances the state past it. The bank is
    /// filled at the end of the first epoch.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let t = &self.config.train;
        let batches = pk_sample(&self.ids, t.p, t.k_per_id, t.seed, state.epoch as u64)?;
        let csl_active = self.flags().csl_on && state.bank.is_initialized() && state.epoch >= 1;
        let mut sum = LossBreakdown {
            csl: vec![0.0; self.config.model.num_parts],
            ..Default::default()
        };
        let mut lr = 0.0;
        for batch in &batches {
            let o = self.step(state, batch)?;
            lr = o.lr;
            sum.triplet += o.loss.triplet;
            sum.psd += o.loss.psd;
            sum.ce += o.loss.ce;
            sum.total += o.loss.total;
            for (a, b) in sum.csl.iter_mut().zip(&o.loss.csl) {
                *a += b;
            }
        }
        let n = batches.len() as f64;
        let mean = LossBreakdown {
            triplet: sum.triplet / n,
            csl: sum.csl.iter().map(|c| c / n).collect(),
            psd: sum.psd / n,
            ce: sum.ce / n,
            total: sum.total / n,
        };
        if !state.bank.is_initialized() {
            state.bank = bank_init(
                &self.encoder,
                &state.params,
                &self.images,
                self.ids.clone(),
                self.config.csl.momentum as f32,
                t.eval_batch,
            )?;
        }
        state.epoch += 1;
        state.bank.epoch = state.epoch;
        let log = EpochLog {
            epoch: state.epoch - 1,
            steps: batches.len(),
            lr,
            csl_active,
            loss: mean,
        };
        info!(
            "epoch {} lr {:.2e} total {:.4} triplet {:.4}",
            log.epoch, log.lr, log.loss.total, log.loss.triplet
        );
        Ok(log)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run<F>(&self, state: &mut TrainState, mut on_epoch: F) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&EpochLog, &TrainState) -> Result<()>,
    {
        let mut logs = Vec::new();
        while state.epoch < self.config.train.epochs {
            let log = self.run_epoch(state)?;
            on_epoch(&log, state)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Retrieval over the training set itself under the cross-camera
    /// protocol (every sample is both query and gallery).
    pub fn train_retrieval(&self, params: &EncoderParams<f32>) -> Result<RetrievalResult> {
        let meta = sample_meta(&self.source);
        let emb = embed_images(&self.encoder, params, &self.images, self.config.train.eval_batch)?;
        compute_metrics(&emb.global, &meta, &emb.global, &meta)
    }

    /// The unseen target domain, generated from the run's seed.
    pub fn target_dataset(&self) -> Result<Dataset> {
        let d = &self.config.data;
        generate_dataset(
            d.target_ids,
            d.images_per_id,
            &d.target,
            self.config.train.seed,
            self.config.model.image_h,
            self.config.model.image_w,
        )
    }

    pub fn evaluate_target(&self, params: &EncoderParams<f32>) -> Result<RetrievalResult> {
        evaluate_split(&self.encoder, params, &self.target_dataset()?, self.config.train.eval_batch)
    }
}

pub fn sample_meta(ds: &Dataset) -> Vec<SampleMeta> {
    ds.records
        .iter()
        .map(|r| SampleMeta {
            id: r.id,
            camera: r.camera,
        })
        .collect()
}

/// Query = first image of every (identity, camera) pair, gallery = the rest.
pub fn query_gallery_split(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    split_by_meta(&sample_meta(ds))
}

/// [`query_gallery_split`] on bare metadata, in the given order.
pub fn split_by_meta(meta: &[SampleMeta]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashSet::new();
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (i, m) in meta.iter().enumerate() {
        if seen.insert((m.id, m.camera)) {
            query.push(i);
        } else {
            gallery.push(i);
        }
    }
    (query, gallery)
}

/// Embeds `ds` and scores its query/gallery split.
pub fn evaluate_split<T: Real>(
    encoder: &Encoder,
    params: &EncoderParams<T>,
    ds: &Dataset,
    batch: usize,
) -> Result<RetrievalResult> {
    let images: Vec<Tensor<T>> = ds.records.iter().map(|r| r.image.cast()).collect();
    let emb = embed_images(encoder, params, &images, batch)?;
    let meta = sample_meta(ds);
    let (q, g) = query_gallery_split(ds);
    let pick = |idx: &[usize]| -> Result<Tensor<T>> {
        let d = emb.global.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(emb.global.row(i));
        }
        Tensor::new(vec![idx.len(), d], data)
    };
    let qm: Vec<SampleMeta> = q.iter().map(|&i| meta[i]).collect();
    let gm: Vec<SampleMeta> = g.iter().map(|&i| meta[i]).collect();
    if q.is_empty() || g.is_empty() {
        warn!("empty query or gallery split");
    }
    compute_metrics(&pick(&q)?, &qm, &pick(&g)?, &gm)
}
