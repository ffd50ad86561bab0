mod common;

use common::*;
use dad_core::attention::DualResidualAttention;
use dad_core::autograd::Var;
use dad_core::backbones::FeatureLevel;
use dad_core::decoder::{BackgroundFeatures, GuideMapGenerator, MiddleFeatureFusion, ModelConfig};
use dad_core::losses::{total_loss, weighted_bce, weighted_iou, pixel_weights, LossConfig};
use dad_core::nn::{Mode, ParamBuilder, ParamId, ParamStore, Session};
use dad_core::train::{compute_gradients, Network};
use dad_core::{ops, synthetic, Tensor};
use rand::SeedableRng;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-10)
}

/// Central difference of `f` with respect to one element of parameter `id`.
fn numeric(store: &mut ParamStore, id: ParamId, index: usize, h: f64, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + h;
    let up = f(store);
    store.get_mut(id).data_mut()[index] = orig - h;
    let down = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

fn desk_config() -> ModelConfig {
    ModelConfig {
        backbone: "synthetic".into(),
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn decoder_scalars_match_finite_differences() {
    let mut net = Network::new(&desk_config()).unwrap();
    let batch: Vec<_> = synthetic::dataset(3, 2, 64, 64);
    let images = Tensor::cat_batch(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
    let masks = Tensor::cat_batch(&batch.iter().map(|s| s.mask.clone()).collect::<Vec<_>>()).unwrap();
    let loss_cfg = LossConfig::default();
    // move the scalars off their initial values so every term is exercised
    for (k, dae) in net.model.extractors.iter().enumerate() {
        let p = dae.params;
        *net.store.get_mut(p.beta.0) = Tensor::scalar(0.3 + 0.1 * k as f64);
        *net.store.get_mut(p.theta.0) = Tensor::scalar(0.9);
        *net.store.get_mut(p.epsilon.0) = Tensor::scalar(1.2);
    }
    let (_, grads, _) = compute_gradients(&net, &images, &masks, &loss_cfg).unwrap();
    let loss = |store: &ParamStore| {
        let s = Session::train(store);
        let out = net.model.forward(&s, &Var::constant(images.clone())).unwrap();
        total_loss(&out, &masks, &loss_cfg).unwrap().total.value().item()
    };
    let mut ids = Vec::new();
    for dae in &net.model.extractors {
        ids.extend([dae.params.beta.0, dae.params.theta.0, dae.params.epsilon.0]);
    }
    ids.push(net.model.gmg.attention.position.gamma.0);
    ids.push(net.model.gmg.attention.channel.gamma.0);
    let mut store = net.store.clone();
    for id in ids {
        let analytic = grads.iter().find(|(g, _)| *g == id).expect("scalar has a gradient").1.item();
        let fd = numeric(&mut store, id, 0, 1e-5, &loss);
        let err = rel_err(analytic, fd);
        assert!(err < 1e-3, "{}: analytic {analytic} numeric {fd} rel {err}", store.entry(id).name);
    }
}

#[test]
fn loss_matches_finite_differences() {
    let mut r = rng(21);
    let gt = Tensor::new(&[2, 1, 8, 8], random_mask(&mut r, 8, 8).into_iter().chain(random_mask(&mut r, 8, 8)).collect()).unwrap();
    let x0 = Tensor::new(&[2, 1, 8, 8], uniform(&mut r, 128, -3.0, 3.0)).unwrap();
    let cfg = LossConfig {
        weight_kernel: 5,
        ..LossConfig::default()
    };
    let w = pixel_weights(&gt, &cfg).unwrap();
    let f = |x: &Tensor| -> Var {
        let v = Var::constant(x.clone());
        ops::add(&weighted_bce(&v, &gt, &w).unwrap(), &weighted_iou(&v, &gt, &w, 1.0).unwrap()).unwrap()
    };
    let leaf = Var::leaf(x0.clone());
    let l = ops::add(&weighted_bce(&leaf, &gt, &w).unwrap(), &weighted_iou(&leaf, &gt, &w, 1.0).unwrap()).unwrap();
    let grads = l.backward();
    let g = grads.get(&leaf).unwrap();
    for i in [0usize, 17, 63, 64, 100, 127] {
        let mut up = x0.clone();
        up.data_mut()[i] += 1e-6;
        let mut down = x0.clone();
        down.data_mut()[i] -= 1e-6;
        let fd = (f(&up).value().item() - f(&down).value().item()) / 2e-6;
        assert!(rel_err(g.data()[i], fd) < 1e-3, "logit {i}: {} vs {fd}", g.data()[i]);
    }
}

fn dra(channels: usize, activation: bool, seed: u64) -> (DualResidualAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = DualResidualAttention::with_activation(&mut ParamBuilder::new(&mut store, &mut rng), channels, activation);
    (m, store)
}

#[test]
fn attention_scalars_and_projection_match_finite_differences() {
    let (m, mut store) = dra(8, true, 3);
    *store.get_mut(m.position.gamma.0) = Tensor::scalar(0.5);
    *store.get_mut(m.channel.gamma.0) = Tensor::scalar(-0.3);
    let mut r = rng(22);
    let x = Tensor::new(&[1, 8, 6, 6], uniform(&mut r, 288, -1.0, 1.0)).unwrap();
    let probe = Var::constant(Tensor::new(&[1, 8, 6, 6], uniform(&mut r, 288, -1.0, 1.0)).unwrap());
    let objective = |s: &Session<'_>| ops::sum(&ops::mul(&m.forward(s, &Var::constant(x.clone())).unwrap(), &probe).unwrap());
    let s = Session::train(&store);
    let grads = s.param_grads(&objective(&s).backward());
    drop(s);
    let query = store.find("position.query.weight").expect("query weight is registered");
    let value = |st: &ParamStore| objective(&Session::train(st)).value().item();
    for (id, index) in [(m.position.gamma.0, 0), (m.channel.gamma.0, 0), (query, 5)] {
        let analytic = grads.iter().find(|(g, _)| *g == id).unwrap().1.data()[index];
        let fd = numeric(&mut store, id, index, 1e-6, &value);
        assert!(rel_err(analytic, fd) < 1e-3, "{}: {analytic} vs {fd}", store.entry(id).name);
    }
}

#[test]
fn attention_at_init_is_linear() {
    let (m, store) = dra(16, false, 4);
    let s = Session::eval(&store);
    let mut r = rng(23);
    let x = Tensor::new(&[1, 16, 13, 13], uniform(&mut r, 16 * 169, -1.0, 1.0)).unwrap();
    let y = Tensor::new(&[1, 16, 13, 13], uniform(&mut r, 16 * 169, -1.0, 1.0)).unwrap();
    let (a, b) = (0.7, -1.9);
    let f = |t: &Tensor| m.forward(&s, &Var::constant(t.clone())).unwrap().value().clone();
    let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
    let lhs = f(&combo);
    let rhs = f(&x).zip_map(&f(&y), |p, q| a * p + b * q).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    assert_eq!(lhs.shape(), [1, 16, 13, 13]);
}

#[test]
fn guide_map_gradient_reaches_both_levels() {
    let cfg = desk_config();
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let gmg = GuideMapGenerator::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, &[8, 40]);
    let mut r = common::rng(24);
    let low = Var::leaf(Tensor::new(&[1, 8, 16, 16], uniform(&mut r, 8 * 256, -1.0, 1.0)).unwrap());
    let high = Var::leaf(Tensor::new(&[1, 40, 2, 2], uniform(&mut r, 160, -1.0, 1.0)).unwrap());
    let levels = [
        FeatureLevel { features: low.clone(), channels: 8, stride: 2 },
        FeatureLevel { features: high.clone(), channels: 40, stride: 16 },
    ];
    let s = Session::train(&store);
    let m = gmg.forward(&s, &[&levels[0], &levels[1]]).unwrap();
    assert_eq!(m.size(), (16, 16));
    let probe = Var::constant(Tensor::new(&[1, 1, 16, 16], uniform(&mut r, 256, -1.0, 1.0)).unwrap());
    let grads = ops::sum(&ops::mul(&m.logits, &probe).unwrap()).backward();
    for leaf in [&low, &high] {
        let g = grads.get(leaf).expect("gradient reaches the level");
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn fusion_is_finite_on_zero_input_in_inference() {
    let cfg = desk_config();
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let info = dad_core::backbones::BackboneKind::Synthetic.levels();
    let mff = MiddleFeatureFusion::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, &info[1..4]);
    let levels: Vec<FeatureLevel> = info[1..4]
        .iter()
        .map(|l| FeatureLevel {
            features: Var::constant(Tensor::zeros(&[1, l.channels, 64 / l.stride, 64 / l.stride])),
            channels: l.channels,
            stride: l.stride,
        })
        .collect();
    let s = Session::new(&store, Mode::Eval, false);
    let BackgroundFeatures { features } = mff.forward(&s, &levels.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(features.shape(), [1, 96, 8, 8]);
    assert!(features.value().is_finite());
}
