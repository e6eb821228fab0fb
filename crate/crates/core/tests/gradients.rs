use idf_core::loss::{siren_loss, LossWeights};
use idf_core::model::{IdfModel, ModelConfig};
use idf_core::siren::{collect_grads, register, Head, Module, SinusoidalNetwork};
use idf_core::tape::Tape;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

#[test]
fn input_gradients_match_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let omega = [5.0, 15.0][i % 2];
        let net = SinusoidalNetwork::<f64>::init(3, rng.random_range(8..33), 3, 1, omega, Head::Linear, i as u64).unwrap();
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let g = net.input_gradient(x.view()).unwrap();
        let fd: Vec<f64> = (0..3)
            .map(|k| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[[0, k]] += h;
                m[[0, k]] -= h;
                (net.forward(p.view()).unwrap()[[0, 0]] - net.forward(m.view()).unwrap()[[0, 0]]) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel(g.row(0).as_slice().unwrap(), &fd));
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn sine_net_gradient_at_origin_is_omega() {
    let mut net = SinusoidalNetwork::<f64>::init(3, 1, 1, 1, 7.0, Head::Linear, 0).unwrap();
    net.layers[0].weight = array![[1.0, 0.0, 0.0]];
    net.layers[0].bias.fill(0.0);
    net.layers[1].weight = array![[1.0]];
    net.layers[1].bias.fill(0.0);
    let g = net.input_gradient(array![[0.0, 0.3, -0.2]].view()).unwrap();
    assert_eq!(g.row(0).to_vec(), vec![7.0, 0.0, 0.0]);
}

#[test]
fn zero_net_has_zero_gradient() {
    let mut net = SinusoidalNetwork::<f64>::init(3, 16, 3, 1, 15.0, Head::Linear, 0).unwrap();
    for p in net.params_mut() {
        p.fill(0.0);
    }
    let x = Array2::from_shape_fn((20, 3), |(i, k)| (i * 3 + k) as f64 / 30.0 - 1.0);
    assert!(net.input_gradient(x.view()).unwrap().iter().all(|&v| v == 0.0));
}

fn perturb(net: &mut SinusoidalNetwork<f64>, layer: usize, j: usize, d: f64) {
    *net.params_mut()[layer].iter_mut().nth(j).unwrap() += d;
}

#[test]
fn squared_value_param_grads_match_differences() {
    let net = SinusoidalNetwork::<f64>::init(3, 12, 3, 1, 15.0, Head::Linear, 3).unwrap();
    let x = array![[0.1, -0.4, 0.25]];
    let loss = |n: &SinusoidalNetwork<f64>| n.forward(x.view()).unwrap()[[0, 0]].powi(2);
    let grads = net.dual(x.view(), |t, j| t.square(j.v)).unwrap().param_grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-6;
    for (layer, g) in grads.iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..g.len());
            let mut p = net.clone();
            perturb(&mut p, layer, j, eps);
            let mut m = net.clone();
            perturb(&mut m, layer, j, -eps);
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let a = *g.iter().nth(j).unwrap();
            assert!((a - fd).abs() <= 1e-5 * fd.abs().max(1e-6), "layer {layer}: {a} vs {fd}");
        }
    }
}

#[test]
fn gradient_norm_loss_matches_hand_derivative() {
    // f(x) = sin(ω·w·x₀); ‖∇f‖² = ω²w²cos²(ωwx₀), so
    // d/dw = 2ω²w·cos² − 2ω³w²x₀·cos·sin
    let (omega, w, x0) = (3.0f64, 0.7f64, 0.4f64);
    let mut net = SinusoidalNetwork::<f64>::init(3, 1, 1, 1, omega, Head::Linear, 0).unwrap();
    net.layers[0].weight = array![[w, 0.0, 0.0]];
    net.layers[0].bias.fill(0.0);
    net.layers[1].weight = array![[1.0]];
    net.layers[1].bias.fill(0.0);
    let grads = net
        .dual(array![[x0, 0.0, 0.0]].view(), |t, j| {
            let parts: Vec<_> = j.d1.iter().map(|&d| t.square(d)).collect();
            let s = t.add(parts[0], parts[1]);
            t.add(s, parts[2])
        })
        .unwrap()
        .param_grads
        .unwrap();
    let a = omega * w * x0;
    let expect = 2.0 * omega.powi(2) * w * a.cos().powi(2) - 2.0 * omega.powi(3) * w * w * x0 * a.cos() * a.sin();
    assert!((grads[0][[0, 0]] - expect).abs() < 1e-12 * expect.abs().max(1.0), "{} vs {expect}", grads[0][[0, 0]]);
}

#[test]
fn constant_loss_gives_zero_param_grads() {
    let net = SinusoidalNetwork::<f64>::init(3, 8, 2, 1, 15.0, Head::Linear, 3).unwrap();
    let grads = net.dual(array![[0.1, 0.2, 0.3]].view(), |t, _| t.constant_scalar(2.5)).unwrap().param_grads.unwrap();
    assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
}

/// The composed-field loss as a plain function of the parameters.
fn composed_loss(model: &IdfModel<f64>, x: &Array2<f64>, normals: &Array2<f64>, w: &LossWeights) -> (f64, Vec<Array2<f64>>) {
    let mut t = Tape::new();
    let bv = register(&mut t, &model.base, true);
    let dv = register(&mut t, &model.displacement, true);
    let (_, composed) = model.tape_fields(&mut t, &bv, &dv, x.clone(), true);
    let l = siren_loss(&mut t, composed.unwrap(), normals, w).unwrap();
    let value = t.scalar(l.total);
    let mut g = t.backward(l.total).unwrap();
    let mut grads = collect_grads(&mut g, &bv, &model.base);
    grads.extend(collect_grads(&mut g, &dv, &model.displacement));
    (value, grads)
}

#[test]
fn loss_term_param_grads_match_differences() {
    let cfg = ModelConfig {
        base_hidden: 10,
        base_depth: 2,
        displacement_hidden: 10,
        displacement_depth: 2,
        ..ModelConfig::default()
    };
    let model = IdfModel::<f64>::new(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // points near the base zero set keep attenuation and the exponential live
    let x = Array2::from_shape_fn((10, 3), |_| rng.random_range(-0.6..0.6));
    let mut normals: Array2<f64> = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
    for mut r in normals.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    let only = |k: usize| {
        let mut w = LossWeights {
            eikonal: 0.0,
            surface: 0.0,
            normal: 0.0,
            offsurface: 0.0,
            offsurface_abs: true,
        };
        match k {
            0 => w.eikonal = 5.0,
            1 => w.surface = 400.0,
            2 => w.normal = 40.0,
            _ => w.offsurface = 50.0,
        }
        w
    };
    let eps = 1e-6;
    for term in 0..4 {
        let w = only(term);
        let (_, grads) = composed_loss(&model, &x, &normals, &w);
        for (gi, g) in grads.iter().enumerate() {
            for _ in 0..2 {
                let j = rng.random_range(0..g.len());
                let mut p = model.clone();
                let mut m = model.clone();
                let nb = p.base.params().len();
                let shift = |mm: &mut IdfModel<f64>, d: f64| {
                    let target = if gi < nb { mm.base.params_mut().swap_remove(gi) } else { mm.displacement.params_mut().swap_remove(gi - nb) };
                    *target.iter_mut().nth(j).unwrap() += d;
                };
                shift(&mut p, eps);
                shift(&mut m, -eps);
                let fd = (composed_loss(&p, &x, &normals, &w).0 - composed_loss(&m, &x, &normals, &w).0) / (2.0 * eps);
                let a = *g.iter().nth(j).unwrap();
                assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "term {term}, param {gi}/{j}: {a} vs {fd}");
            }
        }
    }
}
