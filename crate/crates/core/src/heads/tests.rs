use super::train::{ToyHead, TrainSchedule};
use super::*;
use crate::autodiff::grad_check_adaptive;

fn cfg(kind: HeadKind) -> HeadConfig {
    HeadConfig {
        kind,
        context_dim: 3,
        width: 6,
        depth: 2,
        ..HeadConfig::default()
    }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut s = Stream::new(seed, "randomize");
    for p in store.iter_mut() {
        let n = p.tensor.len();
        let v: Vec<f64> = s.normals(n).into_iter().map(|x| scale * x).collect();
        p.tensor = Tensor::from_vec(p.tensor.shape(), v);
    }
}

fn point(store: &ParamStore, extra: &TensorMap) -> TensorMap {
    let mut m: TensorMap = store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    m.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    m
}

#[test]
fn fresh_energy_head_outputs_zero() {
    let toy = ToyHead::new(cfg(HeadKind::Energy)).unwrap();
    let params = toy.init(3);
    for seed in 0..3 {
        let x = toy.sample(&params, 5, 1, &mut Stream::new(seed, "s")).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn energy_sampling_is_deterministic_and_rejects_multi_step() {
    let toy = ToyHead::new(cfg(HeadKind::Energy)).unwrap();
    let mut params = toy.init(3);
    randomize(&mut params, 1, 0.5);
    let a = toy.sample(&params, 7, 1, &mut Stream::new(9, "s")).unwrap();
    let b = toy.sample(&params, 7, 1, &mut Stream::new(9, "s")).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        toy.sample(&params, 7, 4, &mut Stream::new(9, "s")),
        Err(HeadError::Steps { steps: 4, .. })
    ));
}

#[test]
fn wirings_are_distinct_functions() {
    // With context_dim = noise_dim both wirings have identically shaped weights.
    let base = HeadConfig {
        context_dim: 2,
        ..cfg(HeadKind::Energy)
    };
    let b = Head::new(base.clone(), "h").unwrap();
    let a = Head::new(
        HeadConfig {
            wiring: Wiring::NoiseAsCondition,
            ..base
        },
        "h",
    )
    .unwrap();
    let mut store = ParamStore::new(4);
    b.register(&mut store);
    randomize(&mut store, 2, 0.7);
    let mut s = Stream::new(5, "x");
    let ctx = Tensor::from_vec(&[4, 2], s.normals(8));
    let noise = Tensor::from_vec(&[4, 2], s.normals(8));
    let ya = a.run(&store, &ctx, noise.clone(), vec![]).unwrap();
    let yb = b.run(&store, &ctx, noise, vec![]).unwrap();
    assert!(ya.data().iter().zip(yb.data()).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn energy_loss_matches_recomputation_from_samples() {
    let toy = ToyHead::new(cfg(HeadKind::Energy)).unwrap();
    let mut params = toy.init(3);
    randomize(&mut params, 3, 0.5);
    let y = Tensor::from_vec(&[5, 2], Stream::new(1, "y").normals(10));
    let (g, mean, loss) = toy.loss_graph(&params, &y, &mut Stream::new(2, "l")).unwrap();
    let e = evaluate(&g, &Chain(vec![&params, &loss.bindings])).unwrap();
    let (x1, x2) = (e.value(loss.samples[0]), e.value(loss.samples[1]));
    let mut total = 0.0;
    for r in 0..5 {
        let want = energy_loss_pair(x1.row(r), x2.row(r), y.row(r));
        assert!((e.value(loss.per_row).data()[r] - want).abs() < 1e-12);
        total += want;
    }
    assert!((e.value(mean).item() - total / 5.0).abs() < 1e-12);
}

/// Replacing the regression target by the network's own prediction gives zero loss.
fn perfect_prediction_gives_zero(kind: HeadKind, state: &str, target: &str, extra: &[&str]) {
    let toy = ToyHead::new(cfg(kind)).unwrap();
    let mut params = toy.init(3);
    randomize(&mut params, 4, 0.5);
    let y = Tensor::from_vec(&[6, 2], Stream::new(1, "y").normals(12));
    let (g, mean, mut loss) = toy.loss_graph(&params, &y, &mut Stream::new(2, "l")).unwrap();
    let leaf = |s: &str| format!("head:{s}");
    let pred = toy
        .head
        .run(
            &params,
            params.get("head.ctx").unwrap(),
            loss.bindings[&leaf(state)].clone(),
            extra.iter().map(|s| loss.bindings[&leaf(s)].clone()).collect(),
        )
        .unwrap();
    let before = evaluate(&g, &Chain(vec![&params, &loss.bindings])).unwrap().value(mean).item();
    assert!(before > 0.0);
    loss.bindings.insert(leaf(target), pred);
    let after = evaluate(&g, &Chain(vec![&params, &loss.bindings])).unwrap().value(mean).item();
    assert_eq!(after, 0.0);
}

#[test]
fn diffusion_loss_vanishes_for_exact_noise_prediction() {
    perfect_prediction_gives_zero(HeadKind::Diffusion, "z", "eps", &["temb"]);
}

#[test]
fn flow_loss_vanishes_for_exact_velocity() {
    perfect_prediction_gives_zero(HeadKind::Flow, "xt", "target", &["temb"]);
}

#[test]
fn every_head_loss_passes_gradient_check() {
    for kind in HeadKind::ALL {
        let toy = ToyHead::new(HeadConfig {
            width: 4,
            depth: 1,
            shortcut_consistency_fraction: 0.5,
            meanflow_adaptive_p: 1.0,
            ..cfg(kind)
        })
        .unwrap();
        let mut params = toy.init(3);
        randomize(&mut params, 5, 0.4);
        let y = Tensor::from_vec(&[4, 2], Stream::new(1, "y").normals(8));
        let (g, mean, loss) = toy.loss_graph(&params, &y, &mut Stream::new(2, "l")).unwrap();
        let err = grad_check_adaptive(&g, mean, &point(&params, &loss.bindings), &[1e-2, 1e-3, 1e-4]).unwrap();
        assert!(err < 1e-5, "{kind}: relative error {err}");
    }
}

#[test]
fn meanflow_target_uses_total_derivative() {
    // With r = t always the correction term vanishes and the target is v = ε − y.
    let toy = ToyHead::new(HeadConfig {
        meanflow_equal_prob: 1.0,
        ..cfg(HeadKind::Meanflow)
    })
    .unwrap();
    let mut params = toy.init(3);
    randomize(&mut params, 6, 0.5);
    let y = Tensor::from_vec(&[5, 2], Stream::new(1, "y").normals(10));
    let s = Stream::new(2, "l");
    let mf = toy
        .head
        .meanflow_targets(&params, params.get("head.ctx").unwrap(), &y, &mut s.clone())
        .unwrap();
    let eps = normal_matrix(5, 2, &mut s.child("eps"));
    let v = eps.zip_map(&y, |a, b| a - b);
    assert_eq!(mf.target, v);

    // Otherwise the target matches v − (t−r)·d/dt u by finite differences.
    let toy = ToyHead::new(HeadConfig {
        meanflow_equal_prob: 0.0,
        ..cfg(HeadKind::Meanflow)
    })
    .unwrap();
    let s = Stream::new(3, "l");
    let ctx = params.get("head.ctx").unwrap().clone();
    let mf = toy.head.meanflow_targets(&params, &ctx, &y, &mut s.clone()).unwrap();
    let mut ts = s.child("t");
    let eps = normal_matrix(5, 2, &mut s.child("eps"));
    let h = 1e-6;
    for i in 0..5 {
        let t = ts.uniform();
        let _ = ts.bernoulli(0.0);
        let r = t * ts.uniform();
        let at = |tau: f64| {
            let z: Vec<f64> = (0..2)
                .map(|k| (1.0 - tau) * y.row(i)[k] + tau * eps.row(i)[k])
                .collect();
            toy.head
                .run(
                    &params,
                    &ctx,
                    Tensor::from_vec(&[1, 2], z),
                    vec![time_embedding(&[tau]), time_embedding(&[tau - r])],
                )
                .unwrap()
        };
        let (up, um) = (at(t + h), at(t - h));
        for k in 0..2 {
            let du = (up.data()[k] - um.data()[k]) / (2.0 * h);
            let v = eps.row(i)[k] - y.row(i)[k];
            let want = v - (t - r) * du;
            assert!((mf.target.row(i)[k] - want).abs() < 1e-6 * want.abs().max(1.0));
        }
    }
}

#[test]
fn flow_one_step_lands_on_point_mass() {
    let toy = ToyHead::new(HeadConfig {
        kind: HeadKind::Flow,
        width: 32,
        depth: 2,
        ..HeadConfig::default()
    })
    .unwrap();
    let target = [0.4, -0.3];
    let sched = TrainSchedule {
        steps: 3000,
        batch: 64,
        lr: 3e-3,
        ..TrainSchedule::default()
    };
    let (params, _) = toy
        .train(&sched, 1, |_| Tensor::from_rows(&vec![target.to_vec(); 64]))
        .unwrap();
    let x = toy.sample(&params, 256, 1, &mut Stream::new(4, "s")).unwrap();
    let mean: Vec<f64> = (0..2).map(|k| (0..256).map(|i| x.row(i)[k]).sum::<f64>() / 256.0).collect();
    let spread = (0..256)
        .map(|i| ((x.row(i)[0] - target[0]).powi(2) + (x.row(i)[1] - target[1]).powi(2)).sqrt())
        .sum::<f64>()
        / 256.0;
    assert!((mean[0] - target[0]).abs() < 0.05 && (mean[1] - target[1]).abs() < 0.05, "{mean:?}");
    assert!(spread < 0.1, "mean distance {spread}");
}

#[test]
fn samplers_are_deterministic() {
    for kind in HeadKind::ALL {
        let toy = ToyHead::new(cfg(kind)).unwrap();
        let mut params = toy.init(3);
        randomize(&mut params, 7, 0.3);
        let steps = if kind == HeadKind::Energy { 1 } else { 4 };
        let a = toy.sample(&params, 9, steps, &mut Stream::new(1, "s")).unwrap();
        let b = toy.sample(&params, 9, steps, &mut Stream::new(1, "s")).unwrap();
        assert_eq!(a, b, "{kind}");
        assert!(a.is_finite());
    }
}

#[test]
fn shortcut_rejects_off_grid_steps() {
    let toy = ToyHead::new(cfg(HeadKind::Shortcut)).unwrap();
    let params = toy.init(0);
    assert!(toy.sample(&params, 2, 3, &mut Stream::new(1, "s")).is_err());
    assert!(toy.sample(&params, 2, 128, &mut Stream::new(1, "s")).is_err());
    assert!(toy.sample(&params, 2, 64, &mut Stream::new(1, "s")).is_ok());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(serde_json::from_str::<HeadConfig>(r#"{"kind":"energy","bogus":1}"#).is_err());
    let c: HeadConfig = serde_json::from_str(r#"{"kind":"meanflow","width":8}"#).unwrap();
    assert_eq!(c.kind, HeadKind::Meanflow);
    assert!(HeadConfig { m: 1, ..HeadConfig::default() }.validate().is_err());
}
