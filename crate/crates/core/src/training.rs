//! Training recipe: inverse-frequency class weights, weighted cross-entropy,
//! plain SGD under a poly learning-rate schedule, random crops.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Mode};
use crate::dataset::{class_frequencies, LabeledFrame, SegmentationMask, Task, IGNORE};
use crate::error::{Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::fsio;
use crate::model::{argmax_mask, image_batch, save_checkpoint, NetworkSpec, ParameterSet};
use crate::rng::{derive_seed, SeedStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub crop_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Share of the training frames held out for best-checkpoint selection.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Write `{task}_{epoch:03}.ckpt` after every epoch (`best.ckpt` is
    /// always written).
    #[serde(default = "default_true")]
    pub checkpoint_every_epoch: bool,
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Reference recipe per task: 500 px crops and batch 4 for lake detection,
    /// 321 px crops and batch 8 for ice segmentation, 100 epochs, base
    /// learning rate 1e-5, poly power 0.9.
    pub fn for_task(task: Task) -> Self {
        let (crop_size, batch_size) = match task {
            Task::LakeDetection => (500, 4),
            Task::IceSegmentation => (321, 8),
        };
        Self {
            task,
            crop_size,
            batch_size,
            epochs: 100,
            base_lr: 1e-5,
            poly_power: 0.9,
            seed: 0,
            validation_fraction: default_validation_fraction(),
            checkpoint_every_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "crop_size, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.poly_power > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be non-negative and poly_power positive (got {}, {})",
                self.base_lr, self.poly_power
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

/// `w_c = (1 / f_c) / |present|` for present classes, 0 for absent ones,
/// so that `sum_c w_c f_c = 1`.
pub fn compute_class_weights(freqs: &[f64]) -> Result<ClassWeights> {
    if freqs.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Validation(format!(
            "class frequencies must be finite and non-negative, got {freqs:?}"
        )));
    }
    let present = freqs.iter().filter(|&&f| f > 0.0).count();
    if present == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let sum: f64 = freqs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "class frequencies must sum to 1, got {sum}"
        )));
    }
    Ok(ClassWeights {
        w: freqs
            .iter()
            .map(|&f| if f > 0.0 { 1.0 / f / present as f64 } else { 0.0 })
            .collect(),
    })
}

/// Weighted mean cross-entropy of `logits` against `targets` (outside any
/// training graph): `(loss, d loss / d logits)`.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    weights: &[f64],
    ignore: u8,
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.variable(logits.clone());
    let loss = g.weighted_cross_entropy(x, targets.to_vec(), weights.to_vec(), ignore)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward_scalar(loss)?;
    Ok((value, grads.take(x).expect("logits are tracked")))
}

/// `base_lr * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!(
            "poly_lr step {step} outside 0..={total_steps}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Crops a uniformly placed `size x size` window. Sides shorter than `size`
/// are first padded on the bottom/right, with black pixels and
/// [`IGNORE`] labels, so the original sits at offset (0, 0).
pub fn random_crop(
    image: &RgbImage,
    mask: &SegmentationMask,
    size: usize,
    rng: &mut SeedStream,
) -> Result<(RgbImage, SegmentationMask)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (w, h) != mask.dims() {
        return Err(Error::shape("random_crop image vs mask", &[h, w], &[mask.height(), mask.width()]));
    }
    let (pw, ph) = (w.max(size), h.max(size));
    let y0 = rng.below(ph - size + 1);
    let x0 = rng.below(pw - size + 1);
    let mut img = RgbImage::new(size as u32, size as u32);
    let mut labels = vec![IGNORE; size * size];
    let (x1, y1) = ((x0 + size).min(w), (y0 + size).min(h));
    if x1 > x0 && y1 > y0 {
        let view = imageops::crop_imm(image, x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32);
        imageops::replace(&mut img, &*view, 0, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                labels[(y - y0) * size + (x - x0)] = mask.get(x, y);
            }
        }
    }
    Ok((img, SegmentationMask::from_vec(size, size, labels)?))
}

/// `w <- w - lr * g` for every parameter. Gradients are checked first; a
/// non-finite entry aborts the step without touching any weight.
pub fn sgd_step<T: Scalar>(params: &mut ParameterSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if grads.len() != params.params().len() {
        return Err(Error::shape("sgd gradients", &[grads.len()], &[params.params().len()]));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape("sgd gradient", &g.shape(), &p.value.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                layer: p.name.clone(),
                norm: g.norm(),
            });
        }
    }
    let lr = T::from_f64(lr);
    for (p, g) in params.params_mut().iter_mut().zip(grads) {
        sgd_update(p.value.data_mut(), g.data(), lr);
    }
    params.step += 1;
    Ok(())
}

pub fn sgd_update<T: Scalar>(weights: &mut [T], grads: &[T], lr: T) {
    for (w, &g) in weights.iter_mut().zip(grads) {
        *w -= lr * g;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_miou: Option<f64>,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,step,lr,loss,val_miou\n");
    for e in log {
        let val = e.val_miou.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", e.epoch, e.step, e.lr, e.loss, val).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation mIoU (the last epoch's when
    /// there is no validation subset).
    pub best: ParameterSet<f32>,
    pub last: ParameterSet<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub train_freqs: Vec<f64>,
    pub class_weights: ClassWeights,
    pub validation_frames: usize,
    pub best_checkpoint: Option<PathBuf>,
}

/// Splits frame indices into (fit, validation) with a seeded shuffle; both
/// lists come back in ascending order.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = (n as f64 * fraction + 0.5).floor() as usize;
    if n_val == 0 || n_val >= n {
        return ((0..n).collect(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeedStream::with_stream(seed, 7).shuffle(&mut order);
    let mut val = order[..n_val].to_vec();
    let mut fit = order[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

/// Full-resolution evaluation of `params` on `frames` (eval mode).
pub fn evaluate_frames(params: &ParameterSet<f32>, frames: &[&LabeledFrame]) -> Result<ConfusionMatrix> {
    let k = params.spec().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for f in frames {
        let logits = params.predict(&image_batch::<f32>(&[&f.image])?)?;
        cm.accumulate(&argmax_mask(&logits, 0), &f.mask)?;
    }
    Ok(cm)
}

/// Trains a freshly built network on `frames` (whose masks use the task's
/// legend). With `out_dir`, writes `metrics.csv`, per-epoch checkpoints and
/// `best.ckpt`.
pub fn train(
    frames: &[LabeledFrame],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let params = ParameterSet::<f32>::build(spec, derive_seed(cfg.seed, 1))?;
    train_from(params, frames, cfg, out_dir)
}

pub fn train_from(
    mut params: ParameterSet<f32>,
    frames: &[LabeledFrame],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let legend = crate::dataset::ClassLegend::for_task(cfg.task);
    if legend.num_classes() != params.spec().num_classes {
        return Err(Error::Config(format!(
            "task {} has {} classes but the network predicts {}",
            cfg.task,
            legend.num_classes(),
            params.spec().num_classes
        )));
    }
    for f in frames {
        f.mask.validate(&legend)?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (fit, val) = validation_split(frames.len(), cfg.validation_fraction, cfg.seed);
    let fit_frames: Vec<&LabeledFrame> = fit.iter().map(|&i| &frames[i]).collect();
    let val_frames: Vec<&LabeledFrame> = val.iter().map(|&i| &frames[i]).collect();
    let train_freqs = class_frequencies(fit_frames.iter().map(|f| &f.mask), &legend)?;
    let weights = compute_class_weights(&train_freqs)?;

    let steps_per_epoch = fit_frames.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterSet<f32>)> = None;
    let mut initial_loss = f64::NAN;
    let mut best_checkpoint = None;

    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 1000 + epoch as u64);
        let mut order: Vec<usize> = (0..fit_frames.len()).collect();
        SeedStream::with_stream(epoch_seed, 0).shuffle(&mut order);
        let mut crop_rng = SeedStream::with_stream(epoch_seed, 1);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * cfg.crop_size * cfg.crop_size);
            for &i in chunk {
                let f = fit_frames[i];
                let (img, mask) = random_crop(&f.image, &f.mask, cfg.crop_size, &mut crop_rng)?;
                images.push(img);
                targets.extend_from_slice(mask.labels());
            }
            lr = poly_lr(step, total_steps, cfg.base_lr, cfg.poly_power)?;
            let refs: Vec<&RgbImage> = images.iter().collect();
            let batch = image_batch::<f32>(&refs)?;
            match train_step(&mut params, &batch, targets, &weights.w, lr) {
                Ok(loss) => {
                    if !loss.is_finite() {
                        return Err(Error::Diverged { step, loss });
                    }
                    if step == 0 {
                        initial_loss = loss;
                    }
                    loss_sum += loss;
                    batches += 1;
                }
                Err(Error::NoContributingPixels) => {
                    log::warn!("step {step}: batch has no labeled pixels, skipped");
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }

        let val_miou = if val_frames.is_empty() {
            None
        } else {
            let cm = evaluate_frames(&params, &val_frames)?;
            Some(cm.miou()?)
        };
        let entry = EpochLog {
            epoch,
            step,
            lr,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_miou,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, lr {:.3e}, val mIoU {}",
            cfg.epochs,
            entry.loss,
            lr,
            val_miou.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        log.push(entry);

        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || val_miou.is_none(),
        };
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        if let Some(dir) = out_dir {
            let meta = |e: usize| {
                BTreeMap::from([
                    ("task".to_string(), json!(cfg.task.as_str())),
                    ("epoch".to_string(), json!(e)),
                ])
            };
            if cfg.checkpoint_every_epoch {
                let path = dir.join(format!("{}_{epoch:03}.ckpt", cfg.task.as_str()));
                save_checkpoint(&path, &params, meta(epoch))?;
            }
            if improved {
                let path = dir.join("best.ckpt");
                save_checkpoint(&path, &params, meta(epoch))?;
                best_checkpoint = Some(path);
            }
            fsio::write_atomic(&dir.join("metrics.csv"), metrics_csv(&log).as_bytes())?;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_epoch,
        log,
        initial_loss,
        train_freqs,
        class_weights: weights,
        validation_frames: val_frames.len(),
        best_checkpoint,
    })
}

/// One forward/backward/update on a prepared batch; returns the loss before
/// the update.
pub fn train_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    batch: &Tensor<T>,
    targets: Vec<u8>,
    weights: &[f64],
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let x = g.constant(batch.clone());
    let fwd = params.forward(&mut g, &vars, x, Mode::Train)?;
    let loss = g.weighted_cross_entropy(fwd.logits, targets, weights.to_vec(), IGNORE)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward_scalar(loss)?;
    let grads: Vec<Tensor<T>> = vars
        .iter()
        .zip(params.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    sgd_step(params, &grads, lr)?;
    params.set_running_stats(fwd.stats)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_examples() {
        assert_eq!(compute_class_weights(&[0.25; 4]).unwrap().w, vec![1.0; 4]);
        let w = compute_class_weights(&[0.5, 0.25, 0.25]).unwrap().w;
        for (a, b) in w.iter().zip([2.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = compute_class_weights(&[0.9, 0.1, 0.0]).unwrap().w;
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-15 && (w[1] - 5.0).abs() < 1e-12 && w[2] == 0.0);
        assert!(compute_class_weights(&[0.0, 0.0]).is_err());
        assert!(compute_class_weights(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 1e-5, 0.9).unwrap(), 1e-5);
        assert_eq!(poly_lr(100, 100, 1e-5, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 1e-5, 0.9).unwrap() - 1e-5 * 0.5f64.powf(0.9)).abs() < 1e-20);
        assert!((poly_lr(50, 100, 1e-5, 0.9).unwrap() - 5.3589e-6).abs() < 1e-9);
        assert!(matches!(poly_lr(101, 100, 1e-5, 0.9), Err(Error::Range(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut w = [1.0f64];
        sgd_update(&mut w, &[2.0], 0.1);
        assert!((w[0] - 0.8).abs() < 1e-15);
        sgd_update(&mut w, &[5.0], 0.0);
        assert!((w[0] - 0.8).abs() < 1e-15);
        let mut w = [0.0f64];
        for expect in [0.6, 1.08] {
            let g = 2.0 * (w[0] - 3.0);
            sgd_update(&mut w, &[g], 0.1);
            assert!((w[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = ParameterSet::<f64>::build(&NetworkSpec::with_classes(2), 0).unwrap();
        let before = p.clone();
        let mut grads: Vec<Tensor<f64>> = p.params().iter().map(|t| Tensor::zeros(t.value.shape())).collect();
        grads[3].data_mut()[0] = f64::NAN;
        let err = sgd_step(&mut p, &grads, 0.1).unwrap_err();
        match err {
            Error::NonFiniteGradient { layer, .. } => assert_eq!(layer, before.params()[3].name),
            other => panic!("{other}"),
        }
        assert_eq!(p, before);
    }

    #[test]
    fn crop_identity_and_padding() {
        let img = RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8 * 10 + 1, y as u8 * 10 + 1, 7]));
        let mask = SegmentationMask::from_vec(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        let mut rng = SeedStream::new(1);
        let (ci, cm) = random_crop(&img, &mask, 4, &mut rng).unwrap();
        assert_eq!((ci, cm), (img.clone(), mask.clone()));

        let (ci, cm) = random_crop(&img, &mask, 8, &mut rng).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if x < 4 && y < 4 {
                    assert_eq!(ci.get_pixel(x as u32, y as u32), img.get_pixel(x as u32, y as u32));
                    assert_eq!(cm.get(x, y), mask.get(x, y));
                } else {
                    assert_eq!(ci.get_pixel(x as u32, y as u32).0, [0, 0, 0]);
                    assert_eq!(cm.get(x, y), IGNORE);
                }
            }
        }
        let a = random_crop(&img, &mask, 2, &mut SeedStream::new(5)).unwrap();
        let b = random_crop(&img, &mask, 2, &mut SeedStream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_pixel_ce() {
        let logits = Tensor::from_vec([1, 2, 1, 1], vec![0.0f64, 0.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&logits, &[1], &[1.0, 1.0], IGNORE).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let (doubled, _) = weighted_cross_entropy(&logits, &[1], &[2.0, 2.0], IGNORE).unwrap();
        assert!((doubled - loss).abs() < 1e-15);
    }

    #[test]
    fn validation_split_is_seeded_partition() {
        let (fit, val) = validation_split(200, 0.1, 3);
        assert_eq!((fit.len(), val.len()), (180, 20));
        assert_eq!(validation_split(200, 0.1, 3), (fit.clone(), val.clone()));
        let mut all = [fit, val].concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(validation_split(4, 0.1, 3).1.len(), 0);
    }

    #[test]
    fn tiny_training_run_writes_artifacts() {
        let frames: Vec<LabeledFrame> = crate::synth::generate_scene_set(6, 32, 1)
            .unwrap()
            .into_iter()
            .map(|f| LabeledFrame {
                mask: f.mask.to_lake_mask(),
                ..f
            })
            .collect();
        let spec = NetworkSpec {
            base_channels: 8,
            aspp_channels: 8,
            decoder_channels: 8,
            ..NetworkSpec::with_classes(2)
        };
        let cfg = TrainConfig {
            crop_size: 32,
            batch_size: 3,
            epochs: 2,
            base_lr: 0.05,
            validation_fraction: 0.2,
            ..TrainConfig::for_task(Task::LakeDetection)
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&frames, &spec, &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.log[1].step, 4);
        assert_eq!(out.validation_frames, 1);
        assert!(out.initial_loss.is_finite());
        for name in ["metrics.csv", "best.ckpt", "best.spec.json", "lake_detection_001.ckpt", "lake_detection_002.ckpt"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("epoch,step,lr,loss,val_miou\n1,2,"));
    }
}
