//! Training stages: a float teacher, distillation into a progressively
//! ternarized student, and metric fine-tuning of the last block and head
//! with progressive binarization.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::PlacesDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::index::{recall_at_k, BinaryIndex};
use crate::model::{ForwardTrace, Linear, Mode, ViT};
use crate::quantize::BinaryEmbedding;
use crate::tensor::Matrix;

use super::augment::augment;
use super::config::{ScheduleKind, TrainConfig};
use super::graph::{Params, TapeViT};
use super::losses::{pretrain_loss, tape_finetune_loss, FinetuneLoss, PretrainLoss};
use super::optim::{cosine_lr, step_decay_lr, Adam};

pub const LOG_HEADER: &str =
    "step,stage,lambda,loss_cls,loss_tok,loss_attn,loss_total,recall_at_1";

/// Images used for the end-of-stage distillation loss.
const EVAL_IMAGES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: &'static str,
    pub lambda: f64,
    pub parts: Option<PretrainLoss>,
    pub total: f64,
    pub recall_at_1: Option<f64>,
}

impl LogRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        format!(
            "{},{},{:.9},{},{},{},{:.9},{}",
            self.step,
            self.stage,
            self.lambda,
            opt(self.parts.map(|p| p.cls)),
            opt(self.parts.map(|p| p.tok)),
            opt(self.parts.map(|p| p.attn)),
            self.total,
            opt(self.recall_at_1)
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageResult {
    /// Latent float weights after the stage.
    pub model: ViT,
    pub log: Vec<LogRow>,
    /// Pretrain: distillation loss of the fully quantized student on clean
    /// images. Other stages: loss of the last step.
    pub final_loss: Option<f64>,
    pub recall_at_1: f64,
}

fn check_finite(stage: &str, step: usize, v: f64, detail: impl FnOnce() -> String) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "{stage} step {step}: non-finite loss {v} ({})",
            detail()
        )));
    }
    Ok(())
}

fn sum_grads(per_item: Vec<Vec<Matrix<f64>>>, scale: f64) -> Vec<Matrix<f64>> {
    let mut iter = per_item.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in acc.iter_mut().zip(&g) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    }
    acc
}

/// Sign embeddings of `images` under `model`'s configured mode.
pub fn binary_embeddings(model: &ViT, images: &[Image]) -> Result<Vec<BinaryEmbedding>> {
    images.par_iter().map(|img| model.binary_embedding(img)).collect()
}

/// Recall@k for each `k` with binary embeddings and Hamming search.
pub fn evaluate_recall(model: &ViT, data: &PlacesDataset, ks: &[usize]) -> Result<Vec<f64>> {
    let db = binary_embeddings(model, &data.database)?;
    let qs = binary_embeddings(model, &data.queries)?;
    let index = BinaryIndex::from_entries(model.config.embed_dim, db.into_iter().enumerate().map(|(i, e)| (i as u64, e)))?;
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let results = qs
        .iter()
        .enumerate()
        .map(|(i, q)| Ok((i as u64, index.search(q, kmax)?)))
        .collect::<Result<Vec<_>>>()?;
    ks.iter().map(|&k| recall_at_k(&results, &data.ground_truth, k)).collect()
}

fn recall1(model: &ViT, data: &PlacesDataset) -> Result<f64> {
    Ok(evaluate_recall(model, data, &[1])?[0])
}

/// Places with at least two labelled database images, and their images.
fn place_groups(data: &PlacesDataset) -> Vec<(u64, Vec<usize>)> {
    let labels = data.database_labels();
    data.ground_truth
        .positives
        .keys()
        .map(|&q| {
            let imgs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(q)).collect();
            (q, imgs)
        })
        .filter(|(_, imgs)| imgs.len() >= 2)
        .collect()
}

fn sample_metric_batch(
    rng: &mut ChaCha8Rng,
    groups: &[(u64, Vec<usize>)],
    places: usize,
    per_place: usize,
) -> Vec<(usize, u64)> {
    let mut batch = Vec::new();
    for gi in sample(rng, groups.len(), places.min(groups.len())).into_iter() {
        let (label, imgs) = &groups[gi];
        for ii in sample(rng, imgs.len(), per_place.min(imgs.len())).into_iter() {
            batch.push((imgs[ii], *label));
        }
    }
    batch
}

/// What a metric-learning step feeds each tape.
enum MetricInput {
    /// Whole model from patches.
    Patches(Matrix<f64>),
    /// Last block and head from precomputed tokens.
    Tokens(Matrix<f64>),
    /// Head only from a precomputed class token.
    Cls(Matrix<f64>),
}

/// One multi-similarity step; returns the loss parts and gradients for
/// `active` parameters, summed over the batch.
fn metric_step(
    params: &Params,
    cfg: &TrainConfig,
    active: &[usize],
    inputs: Vec<MetricInput>,
    labels: &[u64],
    weight_lambda: f64,
    bin_lambda: f64,
) -> Result<(FinetuneLoss, Vec<Matrix<f64>>)> {
    let config = &cfg.model;
    let mut tapes = inputs
        .into_par_iter()
        .map(|input| {
            let mut tape = Tape::new();
            let vars = params.load(&mut tape, |i| active.binary_search(&i).is_ok());
            let g = TapeViT {
                config,
                vars: &vars,
                lambda: weight_lambda,
                gammas: None,
            };
            let cls = match input {
                MetricInput::Patches(p) => g.forward(&mut tape, &p)?.cls,
                MetricInput::Tokens(t) => {
                    let x = tape.constant(t);
                    g.blocks(&mut tape, x, config.layers - 1..config.layers)?.cls
                }
                MetricInput::Cls(c) => tape.constant(c),
            };
            let y = g.head(&mut tape, cls)?;
            Ok((tape, vars, y))
        })
        .collect::<Result<Vec<_>>>()?;

    let ys: Vec<Matrix<f64>> = tapes.iter().map(|(t, _, y)| t.value(*y).clone()).collect();
    let mut loss_tape = Tape::new();
    let yv = loss_tape.param(Matrix::concat_rows(&ys)?);
    let (total, parts) = tape_finetune_loss(&mut loss_tape, yv, labels, bin_lambda, &cfg.ms)?;
    let mut dy = loss_tape.backward(total)?;
    let dy = dy.take_or_zeros(yv, loss_tape.value(yv).shape());

    let grads = tapes
        .par_iter_mut()
        .enumerate()
        .map(|(i, (tape, vars, y))| {
            let seed = tape.scalar_fn(*y, 0.0, dy.slice_rows(i, i + 1))?;
            let mut g = tape.backward(seed)?;
            Ok(active
                .iter()
                .map(|&p| g.take_or_zeros(vars[p], params.tensors[p].shape()))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, sum_grads(grads, 1.0)))
}

fn patches64(config: &crate::model::ViTConfig, img: &Image) -> Result<Matrix<f64>> {
    Ok(config.patchify(img)?.cast())
}

/// Float training of the whole model with the multi-similarity loss on
/// cosine similarities.
pub fn train_teacher(cfg: &TrainConfig, data: &PlacesDataset) -> Result<StageResult> {
    cfg.validate()?;
    let init = ViT::init(cfg.model.clone(), cfg.seed)?;
    let mut params = Params::from_vit(&init)?;
    let groups = place_groups(data);
    if cfg.teacher_steps > 0 && groups.len() < 2 {
        return Err(Error::InvalidArgument("teacher needs >= 2 places with >= 2 images".into()));
    }
    let active: Vec<usize> = (0..params.len()).collect();
    let mut opt = Adam::new(&params.shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7465_6163);
    let mut log = Vec::with_capacity(cfg.teacher_steps);
    let mut last = None;
    for step in 0..cfg.teacher_steps {
        let batch = sample_metric_batch(&mut rng, &groups, cfg.batch_places, cfg.batch_per_place);
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let inputs = batch
            .iter()
            .zip(&seeds)
            .map(|(&(i, _), &s)| {
                let img = augment(&data.database[i], s, &cfg.augment);
                Ok(MetricInput::Patches(patches64(&cfg.model, &img)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u64> = batch.iter().map(|b| b.1).collect();
        let (loss, grads) = metric_step(&params, cfg, &active, inputs, &labels, 0.0, 0.0)?;
        check_finite("teacher", step, loss.total(), || format!("{loss:?}"))?;
        let lr = cosine_lr(cfg.teacher_lr, step, cfg.teacher_steps);
        opt.update(&mut params.tensors, &active, &grads, lr);
        last = Some(loss.total());
        log.push(LogRow {
            step,
            stage: "teacher",
            lambda: 0.0,
            parts: None,
            total: loss.total(),
            recall_at_1: None,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.teacher_steps {
            let model = params.to_vit(&cfg.model, Mode::Float)?;
            log.last_mut().unwrap().recall_at_1 = Some(recall1(&model, data)?);
        }
    }
    let model = params.to_vit(&cfg.model, Mode::Float)?;
    let recall = recall1(&model, data)?;
    if let Some(r) = log.last_mut() {
        r.recall_at_1 = Some(recall);
    }
    Ok(StageResult {
        model,
        log,
        final_loss: last,
        recall_at_1: recall,
    })
}

fn trace64(t: &ForwardTrace) -> (Matrix<f64>, Matrix<f64>, Vec<Matrix<f64>>) {
    (
        Matrix::from_fn(1, t.cls.len(), |_, c| t.cls[c] as f64),
        t.patches.cast(),
        t.attention.iter().map(|a| a.cast()).collect(),
    )
}

/// `λ` used at `step` of a distillation run.
pub fn pretrain_lambda(cfg: &TrainConfig, step: usize) -> Result<f64> {
    match cfg.schedule {
        ScheduleKind::Abrupt => Ok(1.0),
        ScheduleKind::Progressive => Ok(cfg.schedule_for(cfg.pretrain_steps)?.at(step as u64).lambda()),
    }
}

/// Mean distillation loss of the fully quantized student against the
/// teacher on the first clean database images.
pub fn quantized_distill_loss(cfg: &TrainConfig, teacher: &ViT, student: &ViT, data: &PlacesDataset) -> Result<PretrainLoss> {
    let q = student.to_quantized()?;
    let n = data.database.len().min(EVAL_IMAGES);
    if n == 0 {
        return Err(Error::Empty("database"));
    }
    let parts = data.database[..n]
        .par_iter()
        .map(|img| {
            let t = teacher.forward_with(img, Linear::Float)?;
            let s = q.forward(img)?;
            pretrain_loss(&t, &s, &cfg.distill)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = PretrainLoss::default();
    parts.iter().for_each(|p| acc.add(p));
    Ok(acc.scaled(1.0 / n as f64))
}

/// Distills `teacher` into a student initialized from it, blending in
/// ternary weights and 8-bit activations by the configured schedule.
pub fn train_pretrain(cfg: &TrainConfig, teacher: &ViT, data: &PlacesDataset) -> Result<StageResult> {
    cfg.validate()?;
    if data.database.is_empty() {
        return Err(Error::Empty("database"));
    }
    let mut params = Params::from_vit(teacher)?;
    let config = &cfg.model;
    let targets = data
        .database
        .par_iter()
        .map(|img| Ok(trace64(&teacher.forward_with(img, Linear::Float)?)))
        .collect::<Result<Vec<_>>>()?;
    let active: Vec<usize> = (0..params.len()).collect();
    let mut opt = Adam::new(&params.shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let w = cfg.distill;
    let batch = cfg.pretrain_batch.min(data.database.len());
    let mut log = Vec::with_capacity(cfg.pretrain_steps);
    let mut lambda = pretrain_lambda(cfg, 0)?;
    for step in 0..cfg.pretrain_steps {
        lambda = pretrain_lambda(cfg, step)?;
        let picks: Vec<(usize, u64)> = sample(&mut rng, data.database.len(), batch)
            .into_iter()
            .map(|i| (i, rng.random()))
            .collect();
        let per_image = picks
            .par_iter()
            .map(|&(i, seed)| {
                let img = augment(&data.database[i], seed, &cfg.augment);
                let patches = patches64(config, &img)?;
                let mut tape = Tape::new();
                let vars = params.load(&mut tape, |_| true);
                let g = TapeViT {
                    config,
                    vars: &vars,
                    lambda,
                    gammas: None,
                };
                let tr = g.forward(&mut tape, &patches)?;
                let (t_cls, t_tok, t_attn) = &targets[i];
                let lc = tape.sq_diff_sum(tr.cls, t_cls, w.cls)?;
                let lt = tape.sq_diff_sum(tr.patches, t_tok, w.tok)?;
                let from = config.layers.saturating_sub(w.attn_layers);
                let mut terms = vec![(lc, 1.0), (lt, 1.0)];
                let mut attn = 0.0;
                for l in from..config.layers {
                    let la = tape.kl_rows(tr.attention[l], &t_attn[l], w.attn)?;
                    attn += tape.scalar(la);
                    terms.push((la, 1.0));
                }
                let total = tape.weighted_sum(&terms)?;
                let parts = PretrainLoss {
                    cls: tape.scalar(lc),
                    tok: tape.scalar(lt),
                    attn,
                };
                let mut grads = tape.backward(total)?;
                let gs: Vec<_> = active
                    .iter()
                    .map(|&p| grads.take_or_zeros(vars[p], params.tensors[p].shape()))
                    .collect();
                Ok((parts, gs))
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch as f64;
        let mut loss = PretrainLoss::default();
        per_image.iter().for_each(|(p, _)| loss.add(p));
        let loss = loss.scaled(inv);
        check_finite("pretrain", step, loss.total(), || format!("{loss:?}"))?;
        let grads = sum_grads(per_image.into_iter().map(|(_, g)| g).collect(), inv);
        let lr = cosine_lr(cfg.pretrain_lr, step, cfg.pretrain_steps);
        opt.update(&mut params.tensors, &active, &grads, lr);
        log.push(LogRow {
            step,
            stage: "pretrain",
            lambda,
            parts: Some(loss),
            total: loss.total(),
            recall_at_1: None,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.pretrain_steps {
            let model = params.to_vit(config, Mode::Float)?.to_quantized()?;
            log.last_mut().unwrap().recall_at_1 = Some(recall1(&model, data)?);
        }
    }
    let model = params.to_vit(config, Mode::Blend(lambda as f32))?;
    let final_loss = quantized_distill_loss(cfg, teacher, &model, data)?.total();
    check_finite("pretrain", cfg.pretrain_steps, final_loss, || "final quantized loss".into())?;
    let recall = recall1(&model.to_quantized()?, data)?;
    if let Some(r) = log.last_mut() {
        r.recall_at_1 = Some(recall);
    }
    Ok(StageResult {
        model,
        log,
        final_loss: Some(final_loss),
        recall_at_1: recall,
    })
}

/// `λ` of the binarization blend at `step` of fine-tuning.
pub fn finetune_lambda(cfg: &TrainConfig, step: usize) -> Result<f64> {
    Ok(cfg.schedule_for(cfg.finetune_steps)?.at(step as u64).lambda())
}

/// Freezes the backbone (all blocks but the last unless disabled) and
/// trains the rest with the progressive binarized multi-similarity loss.
/// The unfrozen block runs fully ternary.
pub fn train_finetune(cfg: &TrainConfig, student: &ViT, data: &PlacesDataset) -> Result<StageResult> {
    cfg.validate()?;
    let config = &cfg.model;
    let mut params = Params::from_vit(student)?;
    let latent = params.to_vit(config, Mode::Float)?;
    let frozen = latent.to_quantized()?;
    let groups = place_groups(data);
    if cfg.finetune_steps > 0 && groups.len() < 2 {
        return Err(Error::InvalidArgument("finetune needs >= 2 places with >= 2 images".into()));
    }
    let last = config.layers - 1;
    let mut active: Vec<usize> = params.head_range().collect();
    if cfg.unfreeze_last_block {
        active.extend(params.block_range(last));
    }
    active.sort_unstable();
    let features = data
        .database
        .par_iter()
        .map(|img| {
            let x = frozen.embed_tokens(img, Linear::Integer)?;
            if cfg.unfreeze_last_block {
                Ok(frozen.run_blocks(x, 0..last, Linear::Integer)?.0.cast::<f64>())
            } else {
                let (x, _) = frozen.run_blocks(x, 0..config.layers, Linear::Integer)?;
                Ok(x.slice_rows(0, 1).cast::<f64>())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(&params.shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6669_6e65);
    let mut log = Vec::with_capacity(cfg.finetune_steps);
    let mut last_loss = None;
    for step in 0..cfg.finetune_steps {
        let lambda = finetune_lambda(cfg, step)?;
        let batch = sample_metric_batch(&mut rng, &groups, cfg.batch_places, cfg.batch_per_place);
        let inputs = batch
            .iter()
            .map(|&(i, _)| {
                if cfg.unfreeze_last_block {
                    MetricInput::Tokens(features[i].clone())
                } else {
                    MetricInput::Cls(features[i].clone())
                }
            })
            .collect();
        let labels: Vec<u64> = batch.iter().map(|b| b.1).collect();
        let (loss, grads) = metric_step(&params, cfg, &active, inputs, &labels, 1.0, lambda)?;
        check_finite("finetune", step, loss.total(), || format!("{loss:?}"))?;
        let lr = step_decay_lr(cfg.finetune_lr, step, cfg.finetune_steps, cfg.warmup_steps);
        opt.update(&mut params.tensors, &active, &grads, lr);
        last_loss = Some(loss.total());
        log.push(LogRow {
            step,
            stage: "finetune",
            lambda,
            parts: None,
            total: loss.total(),
            recall_at_1: None,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.finetune_steps {
            let model = params.to_vit(config, Mode::Float)?.to_quantized()?;
            log.last_mut().unwrap().recall_at_1 = Some(recall1(&model, data)?);
        }
    }
    let model = params.to_vit(config, Mode::Float)?;
    let recall = recall1(&model.to_quantized()?, data)?;
    if let Some(r) = log.last_mut() {
        r.recall_at_1 = Some(recall);
    }
    Ok(StageResult {
        model,
        log,
        final_loss: last_loss,
        recall_at_1: recall,
    })
}
