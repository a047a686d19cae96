use certigrad::certify::{certify, CertifyOptions, Verdict};
use certigrad::diff::{backprop, BackpropMethod, BackpropOptions};
use certigrad::qcqp::{build_hom_qcqp, ParamSymMatrix, Triplet};
use certigrad::sdp::{build_shor_relaxation, inject_external_solution, solve_sdp, SdpOptions, SdpStatus};
use certigrad::{Layer, Qcqp, Real};
use nalgebra::DVector;

const COEFFS: [f64; 7] = [10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389];

/// `Σ θ_i tⁱ` over `x = (1, t, t², t³)` with one parameter per coefficient.
fn sextic<T: Real>(theta: &[f64; 7]) -> certigrad::qcqp::HomQcqp<T> {
    let pattern: [&[(usize, usize, f64)]; 7] = [
        &[(0, 0, 1.0)],
        &[(0, 1, 0.5)],
        &[(0, 2, 1.0 / 3.0), (1, 1, 1.0 / 3.0)],
        &[(0, 3, 0.25), (1, 2, 0.25)],
        &[(1, 3, 1.0 / 3.0), (2, 2, 1.0 / 3.0)],
        &[(2, 3, 0.5)],
        &[(3, 3, 1.0)],
    ];
    let lit = |t: &[(usize, usize, f64)], s: f64| -> Vec<Triplet<T>> {
        t.iter().map(|&(r, c, w)| (r, c, T::lit(w * s))).collect()
    };
    let entries: Vec<_> = pattern.iter().zip(theta).flat_map(|(p, &th)| lit(p, th)).collect();
    let cost = ParamSymMatrix::new(4, &entries)
        .unwrap()
        .with_sensitivity(pattern.iter().map(|p| lit(p, 1.0)).collect())
        .unwrap();
    let constraints = [[(0, 2, 0.5), (1, 1, -1.0)], [(0, 3, 1.0), (1, 2, -1.0)], [(1, 3, 0.5), (2, 2, -1.0)]]
        .iter()
        .map(|t| ParamSymMatrix::new(4, &lit(t, 1.0)).unwrap())
        .collect();
    build_hom_qcqp(cost, constraints, 0).unwrap()
}

#[test]
fn layer_certifies_the_global_minimum() {
    let q: Qcqp = sextic(&COEFFS);
    let fwd = Layer::default().forward(&q).unwrap();
    assert_eq!(fwd.sdp.status, SdpStatus::Optimal);
    assert_eq!(fwd.cert.verdict, Verdict::TightCertified);
    assert!(fwd.cert.tightness_ratio > 1e5);
    assert!((fwd.cert.x[1] + 1.48705).abs() < 1e-4);
    assert!((fwd.cert.objective - fwd.cert.relaxation_value).abs() < 1e-7);
}

#[test]
fn injected_solution_certifies_like_the_builtin_solver() {
    let q: Qcqp = sextic(&COEFFS);
    let shor = build_shor_relaxation(&q);
    let own = solve_sdp(&shor, &SdpOptions::default());
    let injected = inject_external_solution(&shor, &own.x, &own.lambda).unwrap();
    assert_eq!(injected.status, SdpStatus::Optimal);
    let a = certify(&q, &own, &CertifyOptions::default()).unwrap();
    let b = certify(&q, &injected, &CertifyOptions::default()).unwrap();
    assert_eq!(b.verdict, Verdict::TightCertified);
    assert!((&a.x - &b.x).amax() < 1e-12);

    let mut bad_lambda = own.lambda.clone();
    bad_lambda[0] += 1.0;
    let rejected = inject_external_solution(&shor, &own.x, &bad_lambda).unwrap();
    assert_ne!(certify(&q, &rejected, &CertifyOptions::default()).unwrap().verdict, Verdict::TightCertified);
}

#[test]
fn is_and_cift_gradients_agree_and_match_finite_differences() {
    let layer = Layer::default();
    let q: Qcqp = sextic(&COEFFS);
    let cert = layer.forward(&q).unwrap().cert;
    let mut g = DVector::zeros(4);
    g[1] = 1.0;
    let opts = BackpropOptions::default();
    let is = backprop(&q, &cert, &g, BackpropMethod::Is, &opts).unwrap().chain(&q, 7).unwrap();
    let cift = backprop(&q, &cert, &g, BackpropMethod::Cift, &opts).unwrap().chain(&q, 7).unwrap();
    assert!((&is - &cift).amax() < 1e-8, "{is} vs {cift}");

    let h = 1e-5;
    for k in 0..7 {
        let mut plus = COEFFS;
        let mut minus = COEFFS;
        let step = h * (1.0 + COEFFS[k].abs());
        plus[k] += step;
        minus[k] -= step;
        let t = |th: &[f64; 7]| layer.forward(&sextic::<f64>(th)).unwrap().cert.x[1];
        let fd = (t(&plus) - t(&minus)) / (2.0 * step);
        assert!((fd - is[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "θ_{k}: fd {fd} vs IS {}", is[k]);
    }
}

#[test]
fn single_precision_pipeline_runs_end_to_end() {
    let q: certigrad::Qcqp32 = sextic(&COEFFS);
    let mut layer = certigrad::pipeline::Layer::<f32>::default();
    layer.sdp = SdpOptions::with_tol(1e-4);
    layer.certify.ratio_threshold = 1e3;
    layer.certify.psd_tol = 1e-4;
    layer.certify.stat_tol = 1e-3;
    layer.backprop.stat_tol = 1e-3;
    layer.backprop.atol = 1e-6;
    layer.backprop.btol = 1e-6;
    let fwd = layer.solve(&q).unwrap();
    assert_eq!(fwd.cert.verdict, Verdict::TightCertified, "ratio {}", fwd.cert.tightness_ratio);
    assert!((fwd.cert.x[1] + 1.48705).abs() < 1e-2, "x = {}", fwd.cert.x);
    let mut g = DVector::zeros(4);
    g[1] = 1.0f32;
    let grad = layer.backward(&q, &fwd.cert, &g).unwrap().chain(&q, 7).unwrap();

    let q64: Qcqp = sextic(&COEFFS);
    let layer64 = Layer::default();
    let cert64 = layer64.forward(&q64).unwrap().cert;
    let mut g64 = DVector::zeros(4);
    g64[1] = 1.0;
    let grad64 = layer64.backward(&q64, &cert64, &g64).unwrap().chain(&q64, 7).unwrap();
    for (a, b) in grad.iter().zip(grad64.iter()) {
        assert!((*a as f64 - b).abs() <= 2e-2 * (1.0 + b.abs()), "f32 {grad} vs f64 {grad64}");
    }
}
