use std::collections::HashSet;

use glacio::autodiff::{atrous_conv2d, ConvSpec, ConvWeights, Graph, Mode};
use glacio::dataset::{rasterize_annotation, AnnotationDocument, ClassLegend, SegmentationMask, Shape, IGNORE};
use glacio::evaluation::{confusion, default_thresholds, PrAccumulator};
use glacio::model::{layer_table, EncoderStage, NetworkSpec, ParameterSet};
use glacio::rng::SeedStream;
use glacio::Tensor;

use super::random;

/// Even-odd test at `(x, y)` by ray casting to the right.
fn inside(polygon: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = polygon.len() - 1;
    for i in 0..polygon.len() {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes `n_docs` random documents (up to 16 x 16, up to four shapes,
/// vertices partly outside the image) and counts pixels that differ from a
/// per-pixel point-in-polygon evaluation.
pub fn rasterization_mismatches(n_docs: usize, seed: u64) -> usize {
    let legend = ClassLegend::ice_segmentation();
    let labels = &legend.names()[1..];
    let mut rng = SeedStream::new(seed);
    let mut mismatches = 0;
    for d in 0..n_docs {
        let (w, h) = (1 + rng.below(16), 1 + rng.below(16));
        let shapes: Vec<Shape> = (0..rng.below(5))
            .map(|_| Shape {
                label: labels[rng.below(labels.len())].to_string(),
                polygon: (0..3 + rng.below(6))
                    .map(|_| (rng.range(-2.0, w as f64 + 2.0), rng.range(-2.0, h as f64 + 2.0)))
                    .collect(),
            })
            .collect();
        let doc = AnnotationDocument {
            image_path: format!("doc{d}.jpg"),
            image_width: w,
            image_height: h,
            shapes,
        };
        let mask = rasterize_annotation(&doc, &legend).expect("rasterize");
        for y in 0..h {
            for x in 0..w {
                let expected = doc
                    .shapes
                    .iter()
                    .rev()
                    .find(|s| inside(&s.polygon, x as f64 + 0.5, y as f64 + 0.5))
                    .map_or(0, |s| legend.id_of(&s.label).unwrap());
                mismatches += usize::from(mask.get(x, y) != expected);
            }
        }
    }
    mismatches
}

fn random_mask(rng: &mut SeedStream, w: usize, h: usize, k: usize, ignore: bool) -> SegmentationMask {
    let labels = (0..w * h)
        .map(|_| {
            if ignore && rng.below(10) == 0 {
                IGNORE
            } else {
                rng.below(k) as u8
            }
        })
        .collect();
    SegmentationMask::from_vec(w, h, labels).unwrap()
}

/// Compares confusion-matrix IoU, mIoU and frequency-weighted mIoU against
/// pixel-set computations on random mask pairs; exact equality.
pub fn metric_oracle(n_pairs: usize, seed: u64) -> Result<(), String> {
    let mut rng = SeedStream::new(seed);
    for n in 0..n_pairs {
        let k = 2 + rng.below(4);
        let (w, h) = (1 + rng.below(16), 1 + rng.below(16));
        let pred = random_mask(&mut rng, w, h, k, false);
        let gt = random_mask(&mut rng, w, h, k, true);
        let cm = confusion(&pred, &gt, k).map_err(|e| e.to_string())?;

        let valid: Vec<usize> = (0..w * h).filter(|&i| gt.labels()[i] != IGNORE).collect();
        let set = |m: &SegmentationMask, c: usize| -> HashSet<usize> {
            valid.iter().copied().filter(|&i| m.labels()[i] as usize == c).collect()
        };
        let expected: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let (p, g) = (set(&pred, c), set(&gt, c));
                let union = p.union(&g).count();
                (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
            })
            .collect();
        if cm.iou() != expected {
            return Err(format!("pair {n}: iou {:?} vs {:?}", cm.iou(), expected));
        }
        let defined: Vec<f64> = expected.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        if cm.miou().map_err(|e| e.to_string())? != miou {
            return Err(format!("pair {n}: miou"));
        }
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.01).collect();
        let total: f64 = raw.iter().sum();
        let freqs: Vec<f64> = raw.iter().map(|f| f / total).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (iou, f) in expected.iter().zip(&freqs) {
            if let Some(v) = iou {
                num += f * v;
                den += f;
            }
        }
        if cm.weighted_miou(&freqs).map_err(|e| e.to_string())? != num / den {
            return Err(format!("pair {n}: weighted miou"));
        }
    }
    Ok(())
}

/// Random per-class score maps: recall must be non-decreasing as the
/// threshold falls, and every point must equal a direct count.
pub fn pr_oracle(n_maps: usize, seed: u64) -> Result<(), String> {
    let thresholds = default_thresholds();
    let mut rng = SeedStream::new(seed);
    for n in 0..n_maps {
        let k = 2 + rng.below(4);
        let (w, h) = (1 + rng.below(16), 1 + rng.below(16));
        let gt = random_mask(&mut rng, w, h, k, true);
        let probs = Tensor::from_fn([1, k, h, w], |_| rng.uniform());
        let mut acc = PrAccumulator::new(k, &thresholds).map_err(|e| e.to_string())?;
        acc.add(&probs, &gt).map_err(|e| e.to_string())?;
        for c in 0..k {
            let curve = acc.curve(c as u8);
            if !curve.recall_is_monotone() {
                return Err(format!("map {n}, class {c}: recall not monotone"));
            }
            let scores = probs.plane(0, c);
            let positives = gt.labels().iter().filter(|&&l| l as usize == c).count();
            for p in &curve.points {
                let (mut tp, mut fp) = (0usize, 0usize);
                for (s, &l) in scores.iter().zip(gt.labels()) {
                    if l == IGNORE || *s < p.threshold {
                        continue;
                    }
                    if l as usize == c {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
                let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
                let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
                if (p.precision, p.recall) != (precision, recall) {
                    return Err(format!("map {n}, class {c}, threshold {}", p.threshold));
                }
            }
        }
    }
    Ok(())
}

fn extent(changed: impl Iterator<Item = usize>) -> usize {
    let v: Vec<usize> = changed.collect();
    match (v.iter().min(), v.iter().max()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

/// Effective extent of a single `k x k` atrous conv at rate `r` on a
/// `1 x 1 x 31 x 31` probe, measured two ways: the output rows/cols that move
/// when the center input pixel is perturbed, and the input rows/cols that
/// carry gradient from the center output.
pub fn atrous_extent(k: usize, r: usize, seed: u64) -> (usize, usize) {
    let n = 31;
    let c = n / 2;
    let spec = ConvSpec::new(1, 1, k).dilation(r);
    let weight = Tensor::from_fn([1, 1, k, k], |[_, _, u, v]| 1.0 + (u * k + v) as f64 / 10.0);
    let weights = ConvWeights::Full { weight: weight.clone(), bias: None };
    let x = random([1, 1, n, n], seed);
    let base = atrous_conv2d(&x, &weights, &spec).unwrap();
    let mut bumped = x.clone();
    bumped.set(0, 0, c, c, x.get(0, 0, c, c) + 1.0);
    let moved = atrous_conv2d(&bumped, &weights, &spec).unwrap();
    let diff: Vec<(usize, usize)> = (0..n * n)
        .map(|i| (i / n, i % n))
        .filter(|&(i, j)| moved.get(0, 0, i, j) != base.get(0, 0, i, j))
        .collect();
    let forward = extent(diff.iter().map(|p| p.0)).max(extent(diff.iter().map(|p| p.1)));

    let mut g = Graph::new();
    let xv = g.variable(x);
    let wv = g.constant(weight);
    let y = g.conv2d(xv, wv, None, 1, r).unwrap();
    let mut up = Tensor::zeros([1, 1, n, n]);
    up.set(0, 0, c, c, 1.0);
    let grads = g.backward(y, up).unwrap();
    let gx = grads.get(xv).unwrap();
    let hit: Vec<(usize, usize)> = (0..n * n)
        .map(|i| (i / n, i % n))
        .filter(|&(i, j)| gx.get(0, 0, i, j) != 0.0)
        .collect();
    let backward = extent(hit.iter().map(|p| p.0)).max(extent(hit.iter().map(|p| p.1)));
    (forward, backward)
}

/// Output stride, decoder recovery, ASPP dims and the extra-skip variant,
/// checked on a forward pass at `size x size`.
pub fn architecture_check(size: usize) -> Result<(), String> {
    let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(what) };
    let base = NetworkSpec {
        base_channels: 8,
        aspp_channels: 8,
        decoder_channels: 8,
        low_level_channels: 4,
        skip_reduce_channels: 4,
        ..NetworkSpec::with_classes(5)
    };
    let deep = NetworkSpec {
        deep_u_lab: true,
        ..base.clone()
    };
    check(base.output_stride == 16 && base.atrous_rates == [6, 12, 18], "default spec".into())?;

    let table = layer_table(&base).map_err(|e| e.to_string())?;
    let encoder_os = table
        .iter()
        .filter(|l| l.name.starts_with("entry") || l.name.starts_with("middle") || l.name == "stem")
        .map(|l| l.output_stride())
        .max();
    check(encoder_os == Some(16), format!("encoder output stride {encoder_os:?}"))?;
    for l in table.iter().filter(|l| l.name.starts_with("decoder") || l.name == "classifier") {
        check(l.output_stride() == 4, format!("{} runs at stride {}", l.name, l.output_stride()))?;
    }
    for l in table.iter().filter(|l| l.name.starts_with("aspp")) {
        check(l.output_stride() == 16, format!("{} runs at stride {}", l.name, l.output_stride()))?;
    }

    let mut passes = Vec::new();
    for spec in [&base, &deep] {
        let params = ParameterSet::<f32>::build(spec, 3).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn([2, 3, size, size], |[b, c, i, j]| {
            ((b + c + i * 3 + j * 5) % 7) as f32 / 7.0
        }));
        let out = params.forward(&mut g, &vars, x, Mode::Train).map_err(|e| e.to_string())?;
        let os = size / 16;
        let enc = g.value(out.encoder).shape();
        check(enc == [2, spec.encoder_channels(), os, os], format!("encoder shape {enc:?}"))?;
        for b in &out.aspp_branches {
            let s = g.value(*b).shape();
            check(s == [2, spec.aspp_channels, os, os], format!("aspp branch shape {s:?}"))?;
        }
        let logits = g.value(out.logits).shape();
        check(logits == [2, spec.num_classes, size, size], format!("logits shape {logits:?}"))?;
        passes.push((params.param_count(), g.value(out.aspp_input).shape()));
    }
    let (base_count, base_in) = passes[0];
    let (deep_count, deep_in) = passes[1];
    check(base_in[1] == base.encoder_channels(), format!("base ASPP input {base_in:?}"))?;
    check(
        deep_in[1] == base_in[1] + 3 * deep.skip_reduce_channels && deep_in[2..] == base_in[2..],
        format!("extra skips: ASPP input {deep_in:?} vs {base_in:?}"),
    )?;
    let skips: Vec<_> = layer_table(&deep)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|l| l.name.starts_with("skip"))
        .collect();
    check(
        skips.len() == 3 && skips.iter().all(|l| l.conv.out_channels == deep.skip_reduce_channels),
        format!("{} skip reductions", skips.len()),
    )?;
    check(
        deep.skip_taps == [EncoderStage::Entry1, EncoderStage::Entry2, EncoderStage::Middle1],
        "skip taps".into(),
    )?;
    check(deep_count > base_count, format!("parameter count {deep_count} <= {base_count}"))?;
    Ok(())
}
