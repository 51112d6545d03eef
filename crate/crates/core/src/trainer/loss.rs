use serde::{Deserialize, Serialize};

use super::layers::{avg_pool, softsign_backward};
use super::model::ForwardPass;
use super::{Real, Tensor4};
use crate::coverage::{dominant_class, CoverageGrid};
use crate::error::{Error, Result};
use crate::geometry::NUM_CLASSES;

/// Smoothing added under the square root of the coverage loss.
pub const RMSE_SMOOTHING: f64 = 1e-8;

/// Which quantity a forward pass is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Per-tile input statistics, regressed by the surrogate head.
    Surrogate,
    /// Softsign coverage against ground-truth coverage.
    Coverage,
    /// Softmax against dominant tile labels.
    Classification,
}

/// Inputs of one step together with their targets. `inputs` are images for
/// full passes and encoder features when the encoder is cached.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub inputs: Tensor4<T>,
    pub coverage: Vec<CoverageGrid>,
    /// Surrogate targets; empty unless the surrogate objective is used.
    pub surrogate: Option<Tensor4<T>>,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Gradient w.r.t. the head's pre-activation output.
    pub d_logits: Tensor4<T>,
}

/// Intensity bins per channel in the surrogate histogram.
pub const SURROGATE_BINS: usize = 4;
/// Bins of the local contrast histogram.
pub const CONTRAST_BINS: usize = 4;
/// Upper end of the contrast histogram range.
const CONTRAST_RANGE: f64 = 0.04;
/// Scale of the joint histogram targets, raising their share of the loss.
const JOINT_WEIGHT: f64 = 3.0;

/// Number of surrogate target channels for `in_channels` input channels.
pub fn surrogate_width(in_channels: usize) -> usize {
    in_channels * (SURROGATE_BINS + 1) + SURROGATE_BINS * CONTRAST_BINS
}

/// Triangular soft-binning weight of `v` for bin `b` of `bins` over `[0, hi]`.
/// Values outside the outer bin centres go wholly to the outer bins, so the
/// weights of one value sum to 1.
fn soft_bin(v: f64, b: usize, bins: usize, hi: f64) -> f64 {
    let width = hi / bins as f64;
    let centre = (b as f64 + 0.5) * width;
    let v = v.clamp(0.5 * width, hi - 0.5 * width);
    (1.0 - (v - centre).abs() / width).max(0.0)
}

/// Per-tile intensity and texture statistics of an image batch, pooled
/// from per-pixel maps. Channels are the channel means, a soft
/// `SURROGATE_BINS`-bin intensity histogram per channel, and a joint soft
/// histogram of grey level (`SURROGATE_BINS` bins) and local contrast
/// (`CONTRAST_BINS` bins). Grey level is the channel mean; local contrast
/// is the absolute deviation from the 3x3 neighbourhood mean, averaged
/// over channels.
pub fn surrogate_targets<T: Real>(images: &Tensor4<T>, vtiles: usize, htiles: usize) -> Tensor4<T> {
    let (n, c, h, w) = (images.n, images.c, images.h, images.w);
    let mut stats = Tensor4::<T>::zeros(n, surrogate_width(c), h, w);
    for i in 0..n {
        let mut contrast = vec![0.0; h * w];
        let mut grey = vec![0.0; h * w];
        for ch in 0..c {
            let src: Vec<f64> = images.plane(i, ch).iter().map(|v| v.as_f64()).collect();
            for ((o, g), &v) in stats.plane_mut(i, ch).iter_mut().zip(&mut grey).zip(&src) {
                *o = T::of(v);
                *g += v / c as f64;
            }
            for b in 0..SURROGATE_BINS {
                for (o, &v) in stats
                    .plane_mut(i, c + ch * SURROGATE_BINS + b)
                    .iter_mut()
                    .zip(&src)
                {
                    *o = T::of(soft_bin(v, b, SURROGATE_BINS, 1.0));
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let (mut sum, mut count) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(w) {
                            sum += src[yy * w + xx];
                            count += 1.0;
                        }
                    }
                    contrast[y * w + x] += (src[y * w + x] - sum / count).abs() / c as f64;
                }
            }
        }
        for gb in 0..SURROGATE_BINS {
            for cb in 0..CONTRAST_BINS {
                let plane = stats.plane_mut(i, c * (SURROGATE_BINS + 1) + gb * CONTRAST_BINS + cb);
                for ((o, &g), &d) in plane.iter_mut().zip(&grey).zip(&contrast) {
                    let weight = soft_bin(g, gb, SURROGATE_BINS, 1.0)
                        * soft_bin(d, cb, CONTRAST_BINS, CONTRAST_RANGE);
                    *o = T::of(JOINT_WEIGHT * weight);
                }
            }
        }
    }
    avg_pool(&stats, h / vtiles, w / htiles)
}

fn coverage_target(
    grids: &[CoverageGrid],
    n: usize,
    c: usize,
    y: usize,
    x: usize,
    htiles: usize,
) -> f64 {
    grids[n].values[y * htiles + x][c]
}

fn check_targets<T: Real>(output: &Tensor4<T>, batch: &Batch<T>) -> Result<()> {
    if output.c != NUM_CLASSES || batch.coverage.len() != output.n {
        return Err(Error::Dimension(format!(
            "{} targets for a batch of {}",
            batch.coverage.len(),
            output.n
        )));
    }
    for g in &batch.coverage {
        if (g.vtiles, g.htiles) != (output.h, output.w) {
            return Err(Error::Dimension(format!(
                "target grid {}x{} vs output {}x{}",
                g.vtiles, g.htiles, output.h, output.w
            )));
        }
    }
    Ok(())
}

fn objective_matches<T: Real>(objective: Objective, pass: &ForwardPass<T>) -> Result<()> {
    if (objective == Objective::Surrogate) != pass.is_surrogate() {
        return Err(Error::Argument(format!(
            "objective {objective:?} does not match the head that produced the pass"
        )));
    }
    Ok(())
}

fn finite_or_error<T: Real>(loss: f64, pass: &ForwardPass<T>) -> Result<f64> {
    if loss.is_finite() {
        return Ok(loss);
    }
    Err(Error::Numeric {
        layer: pass.first_non_finite().unwrap_or_else(|| "loss".into()),
        detail: format!("loss evaluated to {loss}"),
    })
}

/// Loss of a forward pass and its gradient w.r.t. the head logits.
///
/// Coverage: mean over images of `sqrt(MSE_i + 1e-8)`, MSE over all tiles
/// and classes. Classification: cross-entropy averaged over every tile of
/// the batch. Surrogate: plain MSE.
pub fn loss_and_grad<T: Real>(
    objective: Objective,
    pass: &ForwardPass<T>,
    batch: &Batch<T>,
) -> Result<LossOutput<T>> {
    objective_matches(objective, pass)?;
    let out = &pass.output;
    let mut d = Tensor4::zeros_like(out);
    let (n, c, h, w) = (out.n, out.c, out.h, out.w);
    let loss = match objective {
        Objective::Surrogate => {
            let target = batch
                .surrogate
                .as_ref()
                .ok_or_else(|| Error::Argument("surrogate targets missing".into()))?;
            if target.data.len() != out.data.len() {
                return Err(Error::Dimension("surrogate target shape".into()));
            }
            let count = out.data.len() as f64;
            let mut sum = 0.0;
            for ((g, &p), &t) in d.data.iter_mut().zip(&out.data).zip(&target.data) {
                let diff = p.as_f64() - t.as_f64();
                sum += diff * diff;
                *g = T::of(2.0 * diff / count);
            }
            sum / count
        }
        Objective::Coverage => {
            check_targets(out, batch)?;
            let per_image = (c * h * w) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let mut sq = 0.0;
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let diff = out.at(i, ch, y, x).as_f64()
                                - coverage_target(&batch.coverage, i, ch, y, x, w);
                            sq += diff * diff;
                        }
                    }
                }
                let li = (sq / per_image + RMSE_SMOOTHING).sqrt();
                total += li;
                let scale = 1.0 / (n as f64 * per_image * li);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let idx = ((i * c + ch) * h + y) * w + x;
                            let diff = out.data[idx].as_f64()
                                - coverage_target(&batch.coverage, i, ch, y, x, w);
                            d.data[idx] =
                                softsign_backward(pass.logits.data[idx], T::of(diff * scale));
                        }
                    }
                }
            }
            total / n as f64
        }
        Objective::Classification => {
            check_targets(out, batch)?;
            let tiles = (n * h * w) as f64;
            let mut total = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let label = dominant_class(&batch.coverage[i].values[y * w + x]).index();
                        let logits: Vec<f64> = (0..c)
                            .map(|ch| pass.logits.at(i, ch, y, x).as_f64())
                            .collect();
                        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                        total += lse - logits[label];
                        for ch in 0..c {
                            let idx = ((i * c + ch) * h + y) * w + x;
                            let onehot = if ch == label { 1.0 } else { 0.0 };
                            d.data[idx] = T::of(((logits[ch] - lse).exp() - onehot) / tiles);
                        }
                    }
                }
            }
            total / tiles
        }
    };
    let loss = finite_or_error(loss, pass)?;
    Ok(LossOutput { loss, d_logits: d })
}

/// Loss value alone.
pub fn loss_only<T: Real>(
    objective: Objective,
    pass: &ForwardPass<T>,
    batch: &Batch<T>,
) -> Result<f64> {
    loss_and_grad(objective, pass, batch).map(|o| o.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{HeadMode, ModelConfig, ParamGroup, ToyModel};

    fn model(mode: HeadMode) -> ToyModel<f64> {
        ToyModel::new(
            ModelConfig {
                mode,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn images(n: usize) -> Tensor4<f64> {
        let mut x = Tensor4::zeros(n, 3, 64, 64);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 255) as f64 / 255.0;
        }
        x
    }

    fn batch_from(x: Tensor4<f64>, grids: Vec<CoverageGrid>) -> Batch<f64> {
        Batch {
            inputs: x,
            coverage: grids,
            surrogate: None,
        }
    }

    #[test]
    fn perfect_coverage_prediction() {
        let mut m = model(HeadMode::Coverage);
        let w = m.soiling_out_weight();
        m.store.get_mut(w).fill(0.0);
        let b = m.soiling_out_bias();
        // softsign(1) = 0.5
        m.store.get_mut(b).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let target = CoverageGrid::filled(4, 4, [0.5, 0.5, 0.0, 0.0]);
        let batch = batch_from(images(2), vec![target.clone(), target]);
        let pass = m.forward(&batch.inputs, false, false, true).unwrap();
        let out = loss_and_grad(Objective::Coverage, &pass, &batch).unwrap();
        assert!((out.loss - RMSE_SMOOTHING.sqrt()).abs() < 1e-15);
        let grads = m.backward(&pass, &out.d_logits);
        assert!(grads.get(b).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_classification_is_ln4() {
        let mut m = model(HeadMode::Classification);
        let w = m.soiling_out_weight();
        m.store.get_mut(w).fill(0.0);
        let target = CoverageGrid::filled(4, 4, [0.1, 0.2, 0.3, 0.4]);
        let batch = batch_from(images(2), vec![target.clone(), target]);
        let pass = m.forward(&batch.inputs, false, false, true).unwrap();
        let loss = loss_only(Objective::Classification, &pass, &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn surrogate_means_channel_is_tile_mean() {
        let mut x = Tensor4::<f64>::zeros(1, 1, 4, 4);
        x.data[0] = 4.0;
        let t = surrogate_targets(&x, 2, 2);
        assert_eq!(t.c, surrogate_width(1));
        assert_eq!(t.plane(0, 0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_image_hits_single_bins() {
        let mut x = Tensor4::<f64>::zeros(1, 1, 4, 4);
        x.data.iter_mut().for_each(|v| *v = 0.375);
        let t = surrogate_targets(&x, 1, 1);
        let mut expected = vec![0.0; surrogate_width(1)];
        expected[0] = 0.375;
        expected[1 + 1] = 1.0;
        expected[1 + SURROGATE_BINS + CONTRAST_BINS] = JOINT_WEIGHT;
        for (a, b) in t.data.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", t.data);
        }
    }

    #[test]
    fn histograms_sum_to_one_per_tile() {
        let mut x = Tensor4::<f64>::zeros(2, 3, 8, 8);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64 / 100.0).powi(2);
        }
        let t = surrogate_targets(&x, 2, 2);
        let joint = 3 * (SURROGATE_BINS + 1);
        for n in 0..2 {
            for k in 0..4 {
                for ch in 0..3 {
                    let sum: f64 = (0..SURROGATE_BINS)
                        .map(|b| t.plane(n, 3 + ch * SURROGATE_BINS + b)[k])
                        .sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
                let sum: f64 = (joint..t.c).map(|c| t.plane(n, c)[k]).sum();
                assert!((sum - JOINT_WEIGHT).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_objective_and_targets_are_errors() {
        let m = model(HeadMode::Coverage);
        let batch = batch_from(
            images(2),
            vec![CoverageGrid::filled(4, 4, [1.0, 0.0, 0.0, 0.0])],
        );
        let pass = m.forward(&batch.inputs, false, false, true).unwrap();
        assert!(matches!(
            loss_only(Objective::Coverage, &pass, &batch),
            Err(Error::Dimension(_))
        ));
        assert!(loss_only(Objective::Surrogate, &pass, &batch).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_layer() {
        let mut m = model(HeadMode::Coverage);
        let first = m.store.find("encoder.0.conv.weight").unwrap();
        m.store.get_mut(first)[0] = f64::NAN;
        let target = CoverageGrid::filled(4, 4, [1.0, 0.0, 0.0, 0.0]);
        let batch = batch_from(images(1), vec![target]);
        let pass = m.forward(&batch.inputs, false, true, true).unwrap();
        match loss_only(Objective::Coverage, &pass, &batch) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "encoder.0"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_encoder_gets_zero_gradients() {
        let mut m = model(HeadMode::Coverage);
        m.set_trainable(ParamGroup::Encoder, false);
        let target = CoverageGrid::filled(4, 4, [0.25; 4]);
        let batch = batch_from(images(2), vec![target.clone(), target]);
        let pass = m.forward(&batch.inputs, false, false, true).unwrap();
        let out = loss_and_grad(Objective::Coverage, &pass, &batch).unwrap();
        let grads = m.backward(&pass, &out.d_logits);
        for (p, g) in m.store.params.iter().zip(&grads.values) {
            let zero = g.iter().all(|&v| v == 0.0);
            if p.group != ParamGroup::Soiling {
                assert!(zero, "{} has gradient", p.name);
            }
        }
        assert!(grads.max_abs() > 0.0);
    }
}
