use crop_core::data::{LabeledDataset, Sample};
use crop_core::diagnostics::{domain_gradient, fim_trace, gip, magnitude_heatmap};
use crop_core::nn::{log_softmax, Activation, Layer, ModelParams};
use crop_core::pruning::{prune, PruneStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_domain(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> LabeledDataset {
    let shift: f64 = rng.gen_range(-1.0..1.0);
    let rows = (0..n)
        .map(|_| {
            let x = (0..dim).map(|_| shift + rng.gen_range(-1.5..1.5)).collect();
            Sample::new("u", "c", rng.gen_range(0..classes), x)
        })
        .collect();
    LabeledDataset::with_classes(rows, classes).unwrap()
}

/// Flat view of every parameter, weights then bias per layer.
fn params(model: &ModelParams) -> Vec<f64> {
    model
        .layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

fn with_params(model: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut out = model.clone();
    let mut it = flat.iter().copied();
    for layer in out.layers_mut() {
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = it.next().unwrap();
        }
    }
    out
}

/// Central-difference gradient of a scalar function of the parameters.
fn numeric_gradient(model: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params(model);
    let h = 1e-5;
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += h;
            down[i] -= h;
            (f(&with_params(model, &up)) - f(&with_params(model, &down))) / (2.0 * h)
        })
        .collect()
}

fn mean_ce(model: &ModelParams, data: &LabeledDataset) -> f64 {
    data.rows()
        .iter()
        .map(|r| -log_softmax(&model.forward(&r.features).unwrap())[r.label])
        .sum::<f64>()
        / data.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn gip_matches_pairwise_dot_products_of_numeric_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..5 {
        let model = ModelParams::init(&[3, 5, 3], trial).unwrap();
        let domains: Vec<LabeledDataset> = (0..3).map(|_| random_domain(&mut rng, 12, 3, 3)).collect();
        let grads: Vec<Vec<f64>> = domains.iter().map(|d| numeric_gradient(&model, |m| mean_ce(m, d))).collect();
        let mut expected = 0.0;
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                expected += 2.0 * dot(&grads[i], &grads[j]);
            }
        }
        let refs: Vec<&LabeledDataset> = domains.iter().collect();
        let got = gip(&model, &refs).unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn identical_domains_give_twice_the_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ModelParams::init(&[4, 6, 2], 3).unwrap();
    let d = random_domain(&mut rng, 30, 4, 2);
    let g = domain_gradient(&model, &d).unwrap().norm_sq();
    let got = gip(&model, &[&d, &d]).unwrap();
    assert!((got - 2.0 * g).abs() <= 1e-12 * g.max(1.0));
}

#[test]
fn self_alignment_is_never_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..20 {
        let model = ModelParams::init(&[3, 4, 3], 100 + i).unwrap();
        let d = random_domain(&mut rng, 1 + (i as usize % 7) * 5, 3, 3);
        assert!(gip(&model, &[&d, &d]).unwrap() >= 0.0);
    }
}

#[test]
fn opposed_domains_give_negative_twice_the_squared_norm() {
    // zero output weights and bias: both classes at p = 1/2 for every
    // input, so relabelling every row flips the sign of the gradient
    let hidden = Layer::new(2, 3, vec![0.5, -0.2, 0.1, 0.4, -0.3, 0.6], vec![0.1, 0.2, 0.0], Activation::Relu).unwrap();
    let out = Layer::new(3, 2, vec![0.0; 6], vec![0.0; 2], Activation::Identity).unwrap();
    let model = ModelParams::new(vec![hidden, out]).unwrap();
    let xs = [[1.0, 2.0], [0.5, -1.0], [2.0, 0.3]];
    let make = |label: usize| {
        LabeledDataset::with_classes(
            xs.iter().map(|x| Sample::new("u", "c", label, x.to_vec())).collect(),
            2,
        )
        .unwrap()
    };
    let (a, b) = (make(0), make(1));
    let ga = domain_gradient(&model, &a).unwrap();
    let gb = domain_gradient(&model, &b).unwrap();
    assert!((ga.dot(&gb) + ga.norm_sq()).abs() < 1e-12);
    let got = gip(&model, &[&a, &b]).unwrap();
    assert!((got + 2.0 * ga.norm_sq()).abs() < 1e-12);
    assert!(got < 0.0);
}

#[test]
fn fisher_trace_matches_numeric_per_sample_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = ModelParams::init(&[3, 4, 3], 5).unwrap();
    let data = random_domain(&mut rng, 6, 3, 3);
    let mut expected = 0.0;
    for row in data.rows() {
        let logp = log_softmax(&model.forward(&row.features).unwrap());
        for (c, lp) in logp.iter().enumerate() {
            let g = numeric_gradient(&model, |m| log_softmax(&m.forward(&row.features).unwrap())[c]);
            expected += lp.exp() * dot(&g, &g);
        }
    }
    expected /= data.len() as f64;
    let got = fim_trace(&model, &data).unwrap();
    assert!((got - expected).abs() <= 1e-6 * expected, "{got} vs {expected}");
}

#[test]
fn saturated_model_has_near_zero_fisher_trace() {
    let layer = Layer::new(2, 3, vec![0.1; 6], vec![60.0, 0.0, 0.0], Activation::Identity).unwrap();
    let model = ModelParams::new(vec![layer]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = random_domain(&mut rng, 20, 2, 3);
    assert!(fim_trace(&model, &data).unwrap() < 1e-20);
}

#[test]
fn fisher_trace_ignores_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = ModelParams::init(&[3, 6, 3], 8).unwrap();
    let data = random_domain(&mut rng, 25, 3, 3);
    let reversed: Vec<usize> = (0..data.len()).rev().collect();
    let a = fim_trace(&model, &data).unwrap();
    let b = fim_trace(&model, &data.subset(&reversed)).unwrap();
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn heatmap_zeros_are_exactly_the_pruned_entries() {
    let model = ModelParams::init(&[5, 8, 3], 12).unwrap();
    let (pruned, mask) = prune(&model, 0.4, PruneStrategy::MagnitudeLow, None).unwrap();
    for (i, kept) in mask.layers().iter().enumerate() {
        let map = magnitude_heatmap(&pruned, i).unwrap();
        assert_eq!(map.len(), pruned.layers()[i].outputs);
        let zeros = map.iter().flatten().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, kept.iter().filter(|k| !**k).count());
    }
}
