//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lesion_core::data::{seeded_rng, synth_generate, ClassLabel};
use lesion_core::model::{BackboneConfig, Mode, ModelConfig, ModelInput, ModelParams};
use lesion_core::pipeline::InputSpec;
use lesion_core::{Gradients, Graph, ParamId, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Textbook 3x3 same-padding convolution. Terms are added per output element
/// with the input channel outermost, then kernel column, then kernel row,
/// starting from zero, and the bias is added last.
pub fn naive_conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = kernel.shape()[0];
    let x = |c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            input.data()[(c * h + y as usize) * w + xx as usize]
        }
    };
    let k = |o: usize, c: usize, dy: usize, dx: usize| kernel.data()[((o * ci + c) * 3 + dy) * 3 + dx];
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dx in 0..3 {
                        for dy in 0..3 {
                            let v = x(c, yy as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            acc += k(o, c, dy, dx) * v;
                        }
                    }
                }
                out[(o * h + yy) * w + xx] = bias.data()[o] + acc;
            }
        }
    }
    Tensor::new(vec![co, h, w], out).unwrap()
}

/// AUC by counting positive/negative pairs, ties worth one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut doubled: u64 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                doubled += 2;
            } else if scores[i] == scores[j] {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * pos * neg) as f64
}

pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 6, 8],
            side: 16,
        },
        hidden: 8,
        mode,
    }
}

pub fn random_view<R: Rng>(rng: &mut R, side: usize) -> Tensor {
    Tensor::new(
        vec![3, side, side],
        (0..3 * side * side).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

pub fn random_input<R: Rng>(rng: &mut R, mode: Mode, side: usize) -> ModelInput {
    match mode {
        Mode::MultiScale => ModelInput::Multi {
            coarse: random_view(rng, side),
            fine: random_view(rng, side),
        },
        Mode::SingleScale => ModelInput::Single(random_view(rng, side)),
    }
}

/// Preprocessed synthetic lesions, one per class in turn.
pub fn synthetic_inputs(n: usize, seed: u64, spec: InputSpec) -> Vec<(ModelInput, usize)> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let class = ClassLabel::ALL[i % 3];
            let img = synth_generate(class, &mut rng, 256).unwrap();
            (spec.prepare(&img).unwrap(), class.index())
        })
        .collect()
}

fn loss_and_kinks(model: &ModelParams, batch: &[(ModelInput, usize)]) -> (f64, Vec<u64>) {
    let mut g = Graph::new();
    let refs: Vec<(&ModelInput, usize)> = batch.iter().map(|(i, c)| (i, *c)).collect();
    let loss = model.loss_graph(&mut g, &refs).unwrap();
    (g.value(loss).item(), g.kink_pattern())
}

pub fn analytic_gradients(model: &ModelParams, batch: &[(ModelInput, usize)]) -> Gradients {
    let mut g = Graph::new();
    let refs: Vec<(&ModelInput, usize)> = batch.iter().map(|(i, c)| (i, *c)).collect();
    let loss = model.loss_graph(&mut g, &refs).unwrap();
    g.backward(loss).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences with h = 1e-5 on an O(1) loss carry rounding noise of
/// a few 1e-11 (about eps * |loss| / h); gradients below this floor are
/// compared relative to the floor instead of their own magnitude.
pub const GRAD_SCALE_FLOOR: f64 = 1e-4;

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(GRAD_SCALE_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Central differences on `per_param` random scalars of every parameter
/// tensor. A draw is replaced when either probe changes a ReLU sign or a
/// max-pool winner, since the loss is not differentiable across that window.
/// Returns the accepted samples and the number of rejected draws.
pub fn finite_difference_check(
    model: &ModelParams,
    batch: &[(ModelInput, usize)],
    per_param: usize,
    h: f64,
    seed: u64,
) -> (Vec<GradSample>, usize) {
    let grads = analytic_gradients(model, batch);
    let (_, base_kinks) = loss_and_kinks(model, batch);
    let mut rng = seeded_rng(seed);
    let mut probe = model.clone();
    let mut samples = Vec::new();
    let mut rejected = 0;
    for pid in 0..model.params().len() {
        let id = ParamId(pid);
        let name = model.params().get(id).name.clone();
        let len = model.params().get(id).value.len();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let mut accepted = 0;
        for index in order {
            if accepted == per_param {
                break;
            }
            let original = model.params().get(id).value.data()[index];
            probe.params_mut().get_mut(id).value.data_mut()[index] = original + h;
            let (plus, kp) = loss_and_kinks(&probe, batch);
            probe.params_mut().get_mut(id).value.data_mut()[index] = original - h;
            let (minus, km) = loss_and_kinks(&probe, batch);
            probe.params_mut().get_mut(id).value.data_mut()[index] = original;
            if kp != base_kinks || km != base_kinks {
                rejected += 1;
                continue;
            }
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
            samples.push(GradSample {
                param: name.clone(),
                index,
                analytic,
                numeric: (plus - minus) / (2.0 * h),
            });
            accepted += 1;
        }
    }
    (samples, rejected)
}

/// Multi-scale forward pass built directly from graph primitives with two
/// independent copies of every backbone parameter (`coarse.*` and `fine.*`).
/// Returns the gradient of mean cross-entropy per untied parameter name.
pub fn untied_reference_gradients(
    model: &ModelParams,
    batch: &[(ModelInput, usize)],
) -> std::collections::HashMap<String, Tensor> {
    let nblocks = model.num_blocks();
    let mut params = ParamSet::new();
    for branch in ["coarse", "fine"] {
        for i in 1..=nblocks {
            for n in model.block_param_names(i) {
                let v = model.params().by_name(&n).unwrap().value.clone();
                params.push(format!("{branch}.{n}"), v).unwrap();
            }
        }
    }
    for n in ["hidden.weight", "hidden.bias", "output.weight", "output.bias"] {
        params
            .push(n, model.params().by_name(n).unwrap().value.clone())
            .unwrap();
    }
    let id = |n: &str| params.id_of(n).unwrap();

    let mut g = Graph::new();
    let mut losses = Vec::new();
    for (input, class) in batch {
        let ModelInput::Multi { coarse, fine } = input else {
            panic!("multi-scale input expected")
        };
        let mut feats = Vec::new();
        for (branch, view) in [("coarse", coarse), ("fine", fine)] {
            let mut x = g.input(view.clone());
            for i in 1..=nblocks {
                let [wn, bn] = model.block_param_names(i);
                let w = g.param(&params, id(&format!("{branch}.{wn}")));
                let b = g.param(&params, id(&format!("{branch}.{bn}")));
                x = g.conv2d(x, w, b).unwrap();
                x = g.relu(x);
                x = g.maxpool2(x).unwrap();
            }
            feats.push(g.global_avg_pool(x).unwrap());
        }
        let f = g.concat(&feats).unwrap();
        let hw = g.param(&params, id("hidden.weight"));
        let hb = g.param(&params, id("hidden.bias"));
        let ow = g.param(&params, id("output.weight"));
        let ob = g.param(&params, id("output.bias"));
        let hdn = g.dense(f, hw, hb).unwrap();
        let hdn = g.relu(hdn);
        let logits = g.dense(hdn, ow, ob).unwrap();
        let probs = g.softmax(logits).unwrap();
        losses.push(g.cross_entropy(probs, *class).unwrap());
    }
    let loss = g.mean(&losses).unwrap();
    let grads = g.backward(loss).unwrap();
    params
        .iter()
        .enumerate()
        .filter_map(|(i, p)| grads.get(ParamId(i)).map(|t| (p.name.clone(), t.clone())))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Byte offsets of every f64 payload in an encoded weight file.
pub fn payload_offsets(model: &ModelParams) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut pos = 12;
    for p in model.params().iter() {
        pos += 2 + p.name.len() + 1 + 4 * p.value.ndim();
        offsets.extend(pos..pos + 8 * p.value.len());
        pos += 8 * p.value.len();
    }
    offsets
}
