use std::sync::OnceLock;

use lipode_core::certify::{
    bound_bartlett_spec, bound_bartlett_tensor, bound_neural_ode, bound_param_ode, bound_resnet,
    resnet_constants, spectral_complexity, spectral_complexity_majorant, NeuralOdeSpec,
};
use lipode_core::experiments::{parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use lipode_core::lipfun::{
    build_cover, check_membership, cover_log_bound, distance_1_inf, embed_weights, random_member,
};
use lipode_core::numerics::{norm2, norm_11, norm_21, spectral_norm_default};
use lipode_core::odeflow::{integrate, IntegrationConfig, VectorField};
use lipode_core::resnet::{
    check_class, iid_init, penalty, penalty_with_grad, random_class_member, weight_lipschitz, PenaltyKind,
};
use lipode_core::suites::relative_error;
use lipode_core::{Activation, Cover, Matrix, ParamClassSpec, ParamFunction, ResNetModel, WeightClassSpec, WeightTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(depth: usize, d: usize, seed: u64) -> WeightTensor {
    let mut r = rng(seed);
    let data = (0..depth * d * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    WeightTensor::new(depth, d, data).unwrap()
}

fn random_input(d: usize, radius: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = norm2(&x).max(1e-300);
    let scale = radius * r.gen::<f64>();
    x.iter().map(|v| v * scale / n).collect()
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Relu)]
}

fn unit_cover() -> &'static Cover {
    static COVER: OnceLock<Cover> = OnceLock::new();
    COVER.get_or_init(|| build_cover(1.0, 2.0, 0.25).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spectral_norm_is_dominated(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let m = Matrix::random_normal(rows, cols, 1.0, &mut rng(seed));
        let s = spectral_norm_default(&m).unwrap();
        prop_assert!(s <= norm_11(&m).unwrap() * (1.0 + 1e-9));
        prop_assert!(s <= norm_21(&m.transpose()).unwrap() * (1.0 + 1e-9));
        prop_assert!(s >= m.frobenius() / (rows.min(cols) as f64).sqrt() * (1.0 - 1e-6));
    }

    #[test]
    fn norm_1_inf_is_a_norm(m in 1usize..5, seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut r = rng(seed);
        let f = random_member(m, 2.0, 3.0, &mut r).unwrap();
        let g = random_member(m, 2.0, 3.0, &mut r).unwrap();
        let sum = f.add(&g).unwrap().norm_1_inf();
        prop_assert!(sum <= f.norm_1_inf() + g.norm_1_inf() + 1e-12);
        let scaled = f.scaled(c).unwrap().norm_1_inf();
        prop_assert!((scaled - c.abs() * f.norm_1_inf()).abs() <= 1e-12 * (1.0 + scaled));
        prop_assert_eq!(distance_1_inf(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn random_members_belong_to_their_class(m in 1usize..5, radius in 0.1f64..4.0, lip in 0.0f64..4.0, seed in any::<u64>()) {
        let f = random_member(m, radius, lip, &mut rng(seed)).unwrap();
        let spec = ParamClassSpec { m, r_theta: radius, k_theta: lip, ..ParamClassSpec::unit(m) };
        prop_assert!(check_membership(&f, &spec).unwrap().is_member());
    }

    #[test]
    fn text_format_round_trips(m in 1usize..5, seed in any::<u64>()) {
        let f = random_member(m, 1.5, 2.0, &mut rng(seed)).unwrap();
        prop_assert_eq!(ParamFunction::parse_text(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn embedding_is_an_isometry(depth in 1usize..40, d in 1usize..5, seed in any::<u64>()) {
        let w = random_tensor(depth, d, seed);
        let phi = embed_weights(&w);
        prop_assert!((phi.norm_1_inf() - w.norm_11_inf()).abs() <= 1e-12 * (1.0 + w.norm_11_inf()));
    }

    #[test]
    fn embedding_is_linear(depth in 1usize..30, d in 1usize..4, a in -3.0f64..3.0, seed in any::<u64>()) {
        let w = random_tensor(depth, d, seed);
        let v = random_tensor(depth, d, seed.wrapping_add(1));
        let lhs = embed_weights(&w.combine(a, &v, 1.0).unwrap());
        let rhs = embed_weights(&w).combine(a, &embed_weights(&v), 1.0).unwrap();
        for &t in lhs.knots() {
            let (x, y) = (lhs.eval(t).unwrap(), rhs.eval(t).unwrap());
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embedding_transfers_lipschitz_constant(depth in 2usize..50, d in 1usize..4, k_w in 0.0f64..5.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let lf = depth as f64;
        let mut data = vec![0.0; depth * d * d];
        for v in data.iter_mut().take(d * d) {
            *v = r.gen_range(-1.0..1.0);
        }
        for k in 1..depth {
            for j in 0..d * d {
                data[k * d * d + j] = data[(k - 1) * d * d + j] + r.gen_range(-k_w..=k_w) / lf;
            }
        }
        let w = WeightTensor::new(depth, d, data).unwrap();
        prop_assert!(weight_lipschitz(&w) <= k_w / lf + 1e-12);
        let phi = embed_weights(&w);
        for i in 0..d * d {
            prop_assert!(phi.coordinate(i).unwrap().lipschitz_constant() <= k_w + 1e-9);
        }
        prop_assert!((phi.lipschitz_constant() - lf * weight_lipschitz(&w)).abs() <= 1e-9);
    }

    #[test]
    fn tensor_binary_round_trips(depth in 1usize..20, d in 1usize..6, tied in any::<bool>(), seed in any::<u64>()) {
        let w = random_tensor(depth, d, seed);
        let w = if tied { WeightTensor::tied(depth, &w.layer_matrix(0)).unwrap() } else { w };
        let back = WeightTensor::from_bytes(&w.to_bytes()).unwrap();
        prop_assert!(!back.is_tied());
        prop_assert_eq!(back, w.untied());
    }

    #[test]
    fn idx_files_round_trip(count in 0usize..20, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| r.gen()).collect();
        let labels: Vec<u8> = (0..count).map(|_| r.gen_range(0..10)).collect();
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&pixels);
        let mut label_bytes = Vec::new();
        for v in [IDX_LABELS_MAGIC, count as u32] {
            label_bytes.extend_from_slice(&v.to_be_bytes());
        }
        label_bytes.extend_from_slice(&labels);

        let (n, dim, values) = parse_idx_images(&images).unwrap();
        prop_assert_eq!((n, dim), (count, rows * cols));
        for (v, p) in values.iter().zip(&pixels) {
            prop_assert_eq!(*v, *p as f64 / 255.0);
        }
        let parsed = parse_idx_labels(&label_bytes).unwrap();
        prop_assert_eq!(parsed, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        if !pixels.is_empty() {
            prop_assert!(parse_idx_images(&images[..images.len() - 1]).is_err());
        }
        prop_assert!(parse_idx_images(&label_bytes).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cover_contains_a_near_member(seed in any::<u64>()) {
        let cover = unit_cover();
        let f = random_member(1, 1.0, 2.0, &mut rng(seed)).unwrap();
        let (index, dist) = cover.nearest_member(&f).unwrap();
        prop_assert!(dist <= cover.epsilon() + 1e-12);
        prop_assert!((distance_1_inf(&cover.member_function(index), &f).unwrap() - dist).abs() <= 1e-12);
    }

    #[test]
    fn cover_size_respects_log_bound(radius in 0.5f64..2.0, lip in 0.5f64..3.0, eps in 0.3f64..1.0) {
        let cover = build_cover(radius, lip, eps).unwrap();
        prop_assert!(cover.log_len() <= cover_log_bound(1, radius, lip, eps).unwrap() + 1e-9);
    }

    #[test]
    fn euler_flow_equals_residual_forward(depth in 1usize..30, d in 1usize..5, act in activation(), seed in any::<u64>()) {
        let w = random_tensor(depth, d, seed);
        let x = random_input(d, 2.0, &mut rng(seed ^ 1));
        let field = VectorField::sigma_basis(d, act).unwrap();
        let flow = integrate(&field, &embed_weights(&w), &x, &IntegrationConfig::euler(depth)).unwrap();
        let direct = ResNetModel::bare(w, act).predict(&x).unwrap();
        for (a, b) in flow.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn resnet_output_and_lipschitz_bounds(depth in 1usize..40, d in 1usize..6, r_w in 0.25f64..3.0, act in activation(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = WeightClassSpec { r_w, ..WeightClassSpec::unit(d, depth) };
        let consts = resnet_constants(&spec).unwrap();
        let w = random_class_member(depth, d, r_w, 0.3, &mut r).unwrap();
        let v = random_class_member(depth, d, r_w, 0.3, &mut r).unwrap();
        prop_assert!(check_class(&w, &spec).unwrap().within_norm);
        let x = random_input(d, spec.r_x, &mut r);
        let fw = ResNetModel::bare(w.clone(), act).predict(&x).unwrap();
        let fv = ResNetModel::bare(v.clone(), act).predict(&x).unwrap();
        prop_assert!(norm2(&fw) <= consts.output_bound * (1.0 + 1e-12));
        let diff: Vec<f64> = fw.iter().zip(&fv).map(|(a, b)| a - b).collect();
        let dist = w.combine(1.0, &v, -1.0).unwrap().norm_11_inf();
        prop_assert!(norm2(&diff) <= consts.lipschitz * dist * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn unit_class_output_stays_below_e(depth in 1usize..60, d in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = random_class_member(depth, d, 1.0, 0.3, &mut r).unwrap();
        let mut x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n = norm2(&x).max(1e-300);
        x.iter_mut().for_each(|v| *v /= n);
        let y = ResNetModel::bare(w, Activation::Tanh).predict(&x).unwrap();
        prop_assert!(norm2(&y) <= std::f64::consts::E);
    }

    #[test]
    fn spectral_complexity_below_majorant(depth in 1usize..40, d in 1usize..5, u in 0.01f64..1.0, seed in any::<u64>()) {
        let r_w = u * depth as f64 / 2.0;
        let w = random_class_member(depth, d, r_w.min(6.0), 0.3, &mut rng(seed)).unwrap();
        let norm = w.norm_11_inf();
        prop_assume!(norm > 0.0);
        let a = spectral_complexity(&w).unwrap();
        prop_assert!(a <= spectral_complexity_majorant(norm, depth) * (1.0 + 1e-9));
        let spec = WeightClassSpec { r_w: norm, ..WeightClassSpec::unit(d, depth) };
        let tensor = bound_bartlett_tensor(&w, 1.0, 1.0, 10_000, 0.1).unwrap();
        let class = bound_bartlett_spec(&spec, 1.0, 10_000, 0.1).unwrap();
        prop_assert!(tensor.total <= class.total * (1.0 + 1e-9));
    }

    #[test]
    fn penalty_gradients_match_differences(depth in 2usize..12, d in 1usize..4, seed in any::<u64>()) {
        let w = iid_init(depth, d, 1.0, seed).unwrap();
        for kind in [PenaltyKind::FrobL2, PenaltyKind::MaxMax, PenaltyKind::MaxnormL2] {
            let (value, grad) = penalty_with_grad(&w, kind);
            prop_assert!(value >= 0.0);
            let h = 1e-6;
            for (j, &g) in grad.iter().enumerate() {
                let mut plus = w.clone();
                plus.params_mut()[j] += h;
                let mut minus = w.clone();
                minus.params_mut()[j] -= h;
                let fd = (penalty(&plus, kind) - penalty(&minus, kind)) / (2.0 * h);
                prop_assert!(
                    relative_error(fd, g) <= 1e-4,
                    "{} coordinate {j}: fd {fd} vs analytic {g}", kind.as_str()
                );
            }
        }
        let tied = WeightTensor::tied(depth, &w.layer_matrix(0)).unwrap();
        for kind in [PenaltyKind::FrobL2, PenaltyKind::MaxMax, PenaltyKind::MaxnormL2] {
            let (value, grad) = penalty_with_grad(&tied, kind);
            prop_assert_eq!(value, 0.0);
            prop_assert!(grad.iter().all(|g| *g == 0.0));
        }
    }
}

fn bound_spec() -> impl Strategy<Value = WeightClassSpec> {
    (1usize..20, 1usize..100, 0.05f64..4.0, 0.0f64..4.0, 0.25f64..2.0, 0.1f64..3.0, 0.1f64..3.0, 0.1f64..3.0)
        .prop_map(|(d, depth, r_w, k_w, k_sigma, r_x, r_y, k_loss)| WeightClassSpec {
            d,
            depth,
            r_w,
            k_w,
            k_sigma,
            r_x,
            r_y,
            k_loss,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn resnet_bound_is_depth_free_and_positive(spec in bound_spec(), other_depth in 1usize..5000) {
        let n = 1_000_000;
        let a = bound_resnet(&spec, n, 0.05).unwrap();
        let b = bound_resnet(&WeightClassSpec { depth: other_depth, ..spec }, n, 0.05).unwrap();
        prop_assert!(a.b > 0.0 && a.total > 0.0);
        prop_assert_eq!(a.total, b.total);
        prop_assert_eq!(a.b, b.b);
    }

    #[test]
    fn resnet_bound_monotonicity(spec in bound_spec(), factor in 1.0f64..3.0, delta in 0.01f64..0.5) {
        let n = 100_000;
        let base = bound_resnet(&spec, n, delta).unwrap();
        prop_assume!(base.valid);
        let total = |s: WeightClassSpec, n: u64, delta: f64| bound_resnet(&s, n, delta).unwrap().total;
        let tol = 1e-12 * base.total;
        let wider_k_w = WeightClassSpec { k_w: spec.k_w * factor + 0.1, ..spec };
        let larger_k_loss = WeightClassSpec { k_loss: spec.k_loss * factor, ..spec };
        prop_assert!(total(wider_k_w, n, delta) >= base.total - tol);
        prop_assert!(total(larger_k_loss, n, delta) >= base.total - tol);
        prop_assert!(total(spec, n, delta / factor) >= base.total - tol);
        prop_assert!(total(spec, n * 4, delta) <= base.total + tol);
        let k_loss_scaled = bound_resnet(&WeightClassSpec { k_loss: 2.0 * spec.k_loss, ..spec }, n, delta).unwrap();
        prop_assert!((k_loss_scaled.b - 2.0 * base.b).abs() <= 1e-12 * base.b);
        if spec.r_w >= 1.0 / spec.k_sigma {
            let larger_r_w = WeightClassSpec { r_w: spec.r_w * factor, ..spec };
            prop_assert!(total(larger_r_w, n, delta) >= base.total - tol);
        }
    }

    #[test]
    fn param_ode_bound_monotonicity(m in 1usize..10, r in 0.1f64..3.0, k_theta in 0.0f64..4.0, k_f in 1.0f64..2.0, factor in 1.0f64..3.0) {
        let spec = ParamClassSpec { m, r_theta: r, k_theta, k_f, ..ParamClassSpec::unit(m) };
        let n = 1_000_000;
        let base = bound_param_ode(&spec, n, 0.1).unwrap();
        prop_assert!(base.valid && base.total > 0.0);
        let tol = 1e-12 * base.total;
        let total = |s: ParamClassSpec, n: u64| bound_param_ode(&s, n, 0.1).unwrap().total;
        let larger_r = ParamClassSpec { r_theta: r * factor, ..spec };
        let wider_k_theta = ParamClassSpec { k_theta: k_theta * factor + 0.1, ..spec };
        let larger_k_loss = ParamClassSpec { k_loss: factor, ..spec };
        prop_assert!(total(larger_r, n) >= base.total - tol);
        prop_assert!(total(wider_k_theta, n) >= base.total - tol);
        prop_assert!(total(larger_k_loss, n) >= base.total - tol);
        prop_assert!(total(spec, n * 4) <= base.total + tol);
    }

    #[test]
    fn neural_ode_bound_majorizes_param_instance(d in 1usize..12, r_w in 0.1f64..3.0, k_sigma in 0.25f64..2.0, n_exp in 3u32..9) {
        let spec = NeuralOdeSpec { d, r_w, k_sigma, ..NeuralOdeSpec::unit(d) };
        let n = 10u64.pow(n_exp);
        let neural = bound_neural_ode(&spec, n, 0.1).unwrap();
        prop_assume!(neural.valid);
        let param = bound_param_ode(&spec.as_param_class(), n, 0.1).unwrap();
        prop_assert!(neural.total >= param.total * (1.0 - 1e-12));
        prop_assert!(neural.b >= param.b);
    }
}
