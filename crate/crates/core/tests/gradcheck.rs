use hs3::ocrfuse::{attach_fuse, build_fuse_plan, ocr_block_backward, ocr_block_trace, FuseMode, OcrBlockParams};
use hs3::segmetrics::{ClusterMap, LabelGrid};
use hs3::toynet::gradcheck::{kink_pattern, relative_error};
use hs3::toynet::*;
use hs3::tradeoff::SupervisionPlan;
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = hs3::rng::named(seed, "test");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_labels(b: usize, h: usize, w: usize, k: u8, seed: u64) -> LabelGrid {
    let mut r = hs3::rng::named(seed, "labels");
    let labels = (0..b * h * w)
        .map(|_| if r.random_bool(0.15) { 255 } else { r.random_range(0..k) })
        .collect();
    LabelGrid::new(b * h, w, labels).unwrap()
}

fn hs3_plan() -> SupervisionPlan {
    SupervisionPlan::from_maps(
        6,
        vec![
            ClusterMap::new(2, vec![0, 0, 0, 1, 1, 1]).unwrap(),
            ClusterMap::new(4, vec![0, 0, 1, 2, 3, 3]).unwrap(),
        ],
        &[0.4, 0.7],
    )
    .unwrap()
}

fn small_net(seed: u64) -> Network {
    Network::new(NetworkConfig::reference(8, 8, &[2, 4], 6), seed).unwrap()
}

#[test]
fn full_network_matches_finite_differences() {
    let net = small_net(11);
    let x = random_tensor(&[2, 3, 8, 8], 1);
    let y = random_labels(2, 8, 8, 6, 2);
    let report = grad_check(&net, &x, &y, &hs3_plan(), 255, &GradCheckConfig::default()).unwrap();
    for p in &report.params {
        assert!(p.checked >= p.skipped, "{} skipped {} of {}", p.name, p.skipped, p.checked + p.skipped);
    }
    assert!(report.max_rel_error() <= 1e-4, "{:#?}", report.params);
}

#[test]
fn sample_counts_cover_every_parameter() {
    let net = Network::new(NetworkConfig::reference(8, 8, &[2, 4], 6), 3).unwrap();
    let x = random_tensor(&[1, 3, 8, 8], 4);
    let y = random_labels(1, 8, 8, 6, 5);
    let report = grad_check(&net, &x, &y, &hs3_plan(), 255, &GradCheckConfig::default()).unwrap();
    for (p, stored) in report.params.iter().zip(net.params().params()) {
        assert_eq!(p.checked + p.skipped, stored.value.len().min(200), "{}", p.name);
    }
}

#[test]
fn linear_network_is_exact() {
    let mut cfg = NetworkConfig::reference(8, 8, &[3, 3], 3);
    cfg.activation = Activation::Identity;
    let net = Network::new(cfg, 5).unwrap();
    let x = random_tensor(&[1, 3, 8, 8], 6);
    let probes: Vec<Tensor> = (0..3).map(|i| random_tensor(&[1, 3, 8, 8], 10 + i)).collect();
    let linear = |out: &StageOutputs| -> f64 {
        out.logits
            .iter()
            .zip(&probes)
            .map(|(l, g)| l.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let (_, trace) = net.forward_traced(&x).unwrap();
    let d: Vec<Option<Tensor>> = probes.iter().cloned().map(Some).collect();
    let grads = net.backward(&trace, &d).unwrap();
    // Multilinear in every single coordinate, so a wide step is still exact
    // and keeps rounding out of the difference quotient.
    let cfg = GradCheckConfig {
        epsilon: 1e-2,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(&net, &grads, &cfg, |probe| {
        let (out, trace) = probe.forward_traced(&x)?;
        Ok((linear(&out), kink_pattern(&trace)))
    })
    .unwrap();
    assert!(report.max_rel_error() <= 1e-9, "{}", report.max_rel_error());
}

#[test]
fn remapped_cross_entropy_gradient() {
    let logits = random_tensor(&[1, 3, 2, 2], 7);
    let labels = LabelGrid::from_rows(&[&[0, 4], &[2, 255]]).unwrap();
    let map = ClusterMap::new(3, vec![0, 1, 1, 2, 2]).unwrap();
    let term = cross_entropy_remapped(&logits, &labels, &map, 255).unwrap();
    let eps = 1e-6;
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += eps;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= eps;
        let lp = cross_entropy_remapped(&plus, &labels, &map, 255).unwrap().loss;
        let lm = cross_entropy_remapped(&minus, &labels, &map, 255).unwrap().loss;
        let numeric = (lp - lm) / (2.0 * eps);
        let err = relative_error(term.grad.data()[i], numeric, 1e-8);
        assert!(err <= 1e-6, "coordinate {i}: {err}");
    }
}

#[test]
fn ocr_block_matches_finite_differences() {
    let f = random_tensor(&[1, 4, 3, 3], 20);
    let l = random_tensor(&[1, 3, 3, 3], 21);
    let params = OcrBlockParams::init(1, 4, 2, 22);
    let g = random_tensor(&[1, 2, 3, 3], 23);
    let objective = |f: &Tensor, l: &Tensor, p: &OcrBlockParams| -> f64 {
        let out = ocr_block_trace(f, l, p).unwrap().output;
        out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let trace = ocr_block_trace(&f, &l, &params).unwrap();
    let grads = ocr_block_backward(&trace, &params, &g);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps), 1e-6));
    };
    for i in 0..f.len() {
        let (mut fp, mut fm) = (f.clone(), f.clone());
        fp.data_mut()[i] += eps;
        fm.data_mut()[i] -= eps;
        check(grads.d_features.data()[i], objective(&fp, &l, &params), objective(&fm, &l, &params));
    }
    for i in 0..l.len() {
        let (mut lp, mut lm) = (l.clone(), l.clone());
        lp.data_mut()[i] += eps;
        lm.data_mut()[i] -= eps;
        check(grads.d_logits.data()[i], objective(&f, &lp, &params), objective(&f, &lm, &params));
    }
    type Field = fn(&mut OcrBlockParams) -> &mut Vec<f64>;
    let fields: [(Field, &Vec<f64>); 5] = [
        (|p| &mut p.wq, &grads.params.wq),
        (|p| &mut p.wk, &grads.params.wk),
        (|p| &mut p.wv, &grads.params.wv),
        (|p| &mut p.wo, &grads.params.wo),
        (|p| &mut p.bo, &grads.params.bo),
    ];
    for (field, analytic) in fields {
        for i in 0..analytic.len() {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            field(&mut pp)[i] += eps;
            field(&mut pm)[i] -= eps;
            check(analytic[i], objective(&f, &l, &pp), objective(&f, &l, &pm));
        }
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn fused_network_matches_finite_differences() {
    for mode in [FuseMode::Concat, FuseMode::Add] {
        let plan = build_fuse_plan(32, 2, 0.5).unwrap().with_mode(mode);
        let mut net = attach_fuse(small_net(31), plan, 31).unwrap();
        // Sharpen the attention so its gradients are not lost in rounding.
        for p in net.params_mut().params_mut() {
            if p.name.ends_with(".wq") || p.name.ends_with(".wk") {
                p.value.iter_mut().for_each(|v| *v *= 4.0);
            }
        }
        let x = random_tensor(&[2, 3, 8, 8], 32);
        let y = random_labels(2, 8, 8, 6, 33);
        let report = grad_check(&net, &x, &y, &hs3_plan(), 255, &GradCheckConfig::default()).unwrap();
        assert!(report.params.iter().any(|p| p.name.starts_with("ocr")));
        assert!(report.max_rel_error() <= 1e-4, "{mode:?}: {:#?}", report.params);
    }
}

#[test]
fn fused_network_with_unsupervised_heads() {
    let plan = hs3_plan().with_gammas(&[0.0, 0.0]).unwrap();
    let net = attach_fuse(small_net(41), build_fuse_plan(32, 2, 1.0).unwrap(), 41).unwrap();
    let x = random_tensor(&[1, 3, 8, 8], 42);
    let y = random_labels(1, 8, 8, 6, 43);
    let report = grad_check(&net, &x, &y, &plan, 255, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error() <= 1e-4, "{:#?}", report.params);
}
