//! Test-side oracles shared by the integration suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilecov::coverage::CoverageGrid;
use tilecov::dataset::{synth_corpus, CorpusSample, SynthConfig};
use tilecov::geometry::{AnnotationSet, Polygon, SoilingClass};
use tilecov::trainer::{
    loss_and_grad, surrogate_targets, Batch, HeadMode, Objective, ParamGroup, Tensor4, TensorGrid,
    ToyModel,
};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GroupReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: [GroupReport; 3],
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        for (a, b) in self.groups.iter_mut().zip(other.groups) {
            a.checked += b.checked;
            if b.max_rel > a.max_rel {
                a.max_rel = b.max_rel;
                a.worst = b.worst;
            }
        }
        self.skipped_kinks += other.skipped_kinks;
    }
}

fn objective_for(model: &ToyModel<f64>, surrogate: bool) -> Objective {
    match (surrogate, model.mode()) {
        (true, _) => Objective::Surrogate,
        (false, HeadMode::Coverage) => Objective::Coverage,
        (false, HeadMode::Classification) => Objective::Classification,
    }
}

fn evaluate(model: &ToyModel<f64>, batch: &Batch<f64>, surrogate: bool) -> (f64, Vec<bool>) {
    let pass = model.forward(&batch.inputs, surrogate, true, true).unwrap();
    let loss = loss_and_grad(objective_for(model, surrogate), &pass, batch)
        .unwrap()
        .loss;
    (loss, pass.relu_pattern())
}

/// Compares analytic gradients with central differences on up to
/// `per_param` random entries of every learnable tensor reached by the
/// chosen head. Entries whose perturbation flips any ReLU are resampled.
pub fn gradient_check(
    model: &ToyModel<f64>,
    inputs: &Tensor4<f64>,
    coverage: &[CoverageGrid],
    surrogate: bool,
    per_param: usize,
    seed: u64,
) -> GradCheckReport {
    let mut model = model.clone();
    for g in ParamGroup::ALL {
        model.set_trainable(g, true);
    }
    let batch = Batch {
        inputs: inputs.clone(),
        coverage: coverage.to_vec(),
        surrogate: Some(surrogate_targets(
            inputs,
            model.config.vtiles,
            model.config.htiles,
        )),
    };
    let pass = model.forward(&batch.inputs, surrogate, true, true).unwrap();
    let out = loss_and_grad(objective_for(&model, surrogate), &pass, &batch).unwrap();
    let grads = model.backward(&pass, &out.d_logits);
    let base_pattern = pass.relu_pattern();
    let head = if surrogate {
        ParamGroup::Surrogate
    } else {
        ParamGroup::Soiling
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for id in 0..model.store.len() {
        let (group, kind, len, name) = {
            let p = &model.store.params[id];
            (p.group, p.kind, p.data.len(), p.name.clone())
        };
        if !kind.is_learnable() || (group != ParamGroup::Encoder && group != head) {
            continue;
        }
        let wanted = per_param.min(len);
        let mut done = 0;
        let mut attempts = 0;
        while done < wanted && attempts < wanted * 20 {
            attempts += 1;
            let k = rng.random_range(0..len);
            let orig = model.store.params[id].data[k];
            model.store.params[id].data[k] = orig + FD_EPS;
            let (lp, pp) = evaluate(&model, &batch, surrogate);
            model.store.params[id].data[k] = orig - FD_EPS;
            let (lm, pm) = evaluate(&model, &batch, surrogate);
            model.store.params[id].data[k] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_EPS);
            let analytic = grads.get(id)[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let g = &mut report.groups[group.index()];
            g.checked += 1;
            if rel > g.max_rel {
                g.max_rel = rel;
                g.worst = format!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e}");
            }
            done += 1;
        }
    }
    report
}

/// Synthetic corpus samples without touching the filesystem.
pub fn synth_samples(cfg: &SynthConfig, n: usize) -> Vec<CorpusSample> {
    synth_corpus(cfg, n)
        .unwrap()
        .into_iter()
        .map(|s| CorpusSample {
            image_id: s.annotation.image_id.clone(),
            camera: s.camera,
            coverage: s.counts.to_coverage(),
            image: s.image,
        })
        .collect()
}

/// Image batch in 64-bit for gradient checks.
pub fn micro_batch(samples: &[CorpusSample]) -> (Tensor4<f64>, Vec<CoverageGrid>) {
    let grids: Vec<TensorGrid<f64>> = samples
        .iter()
        .map(|s| TensorGrid::from_rgb(&s.image))
        .collect();
    (
        Tensor4::stack(&grids).unwrap(),
        samples.iter().map(|s| s.coverage.clone()).collect(),
    )
}

/// Random annotation: 2 to 8 polygons of random class, mixing star
/// polygons, self-intersecting scribbles and axis-aligned rectangles on
/// integer and half-integer coordinates. Vertices may fall outside the image.
pub fn random_annotation(
    rng: &mut ChaCha8Rng,
    id: &str,
    width: usize,
    height: usize,
) -> AnnotationSet {
    let (w, h) = (width as f64, height as f64);
    let mut ann = AnnotationSet::new(id, width, height);
    for _ in 0..rng.random_range(2..=8) {
        let class = SoilingClass::ALL[rng.random_range(0..4)];
        let poly = match rng.random_range(0..3) {
            0 => {
                let snap = |v: f64| (v * 2.0).round() / 2.0;
                let x0 = snap(rng.random_range(-4.0..w));
                let y0 = snap(rng.random_range(-4.0..h));
                let x1 = snap(x0 + rng.random_range(1.0..w / 2.0));
                let y1 = snap(y0 + rng.random_range(1.0..h / 2.0));
                Polygon::rect(x0, y0, x1, y1, class)
            }
            1 => {
                let cx = rng.random_range(0.0..w);
                let cy = rng.random_range(0.0..h);
                let r = rng.random_range(3.0..w / 3.0);
                let n = rng.random_range(3..=12);
                let vertices = (0..n)
                    .map(|k| {
                        let a = k as f64 / n as f64 * std::f64::consts::TAU;
                        let rr = r * rng.random_range(0.3..1.0);
                        (cx + rr * a.cos(), cy + rr * a.sin())
                    })
                    .collect();
                Polygon::new(vertices, class)
            }
            _ => {
                let n = rng.random_range(3..=9);
                let vertices = (0..n)
                    .map(|_| {
                        (
                            rng.random_range(-8.0..w + 8.0),
                            rng.random_range(-8.0..h + 8.0),
                        )
                    })
                    .collect();
                Polygon::new(vertices, class)
            }
        };
        ann = ann.with_polygon(poly);
    }
    ann
}
