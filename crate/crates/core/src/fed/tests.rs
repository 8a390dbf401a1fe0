use super::*;
use proptest::prelude::*;
use rand::RngCore;

fn quad_params(theta: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(quadratic::QUAD_PARAM, Tensor::from_vec(theta.to_vec()));
    p
}

fn quad_client(id: u32, target: &[f64], samples: usize, theta: &ParamSet) -> ClientState<Obj> {
    let q = QuadraticObjective {
        target: target.to_vec(),
        samples,
    };
    ClientState::new(id, Obj::Quad(q), theta).unwrap()
}

#[derive(Debug, Clone)]
enum Obj {
    Quad(QuadraticObjective),
    Broken(usize),
    /// Quadratic that records the model each step sees.
    Logged(QuadraticObjective, Vec<Vec<f64>>),
}

impl LocalObjective for Obj {
    fn num_samples(&self) -> usize {
        match self {
            Obj::Quad(q) | Obj::Logged(q, _) => q.samples,
            Obj::Broken(n) => *n,
        }
    }

    fn minibatch(
        &mut self,
        params: &mut ParamSet,
        batch: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Named)> {
        match self {
            Obj::Quad(q) => q.minibatch(params, batch, rng),
            Obj::Logged(q, log) => {
                log.push(params.require(quadratic::QUAD_PARAM)?.data().to_vec());
                q.minibatch(params, batch, rng)
            }
            Obj::Broken(_) => {
                let t = params.require(quadratic::QUAD_PARAM)?;
                let mut out = Named::new();
                out.insert(
                    quadratic::QUAD_PARAM.into(),
                    Tensor::full(t.shape(), f64::NAN),
                );
                Ok((1.0, out))
            }
        }
    }
}

fn sgd(epochs: usize, batch: usize, lr: f64, mu: f64) -> HyperParams {
    HyperParams {
        local_epochs: epochs,
        batch_size: batch,
        lr,
        mu,
        optimizer: LocalOptimizer::Sgd,
        ..HyperParams::default()
    }
}

fn zeros(n: usize) -> Named {
    let mut m = Named::new();
    m.insert(quadratic::QUAD_PARAM.into(), Tensor::zeros(&[n]));
    m
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(3)
}

#[test]
fn sgd_mode_without_corrections_is_plain_sgd() {
    let theta = quad_params(&[0.3, -1.2, 2.0]);
    let a = [1.0, 0.5, -0.25];
    let mut obj = Obj::Quad(QuadraticObjective {
        target: a.to_vec(),
        samples: 1,
    });
    let hp = HyperParams {
        control_variates: false,
        ..sgd(1, 1, 0.05, 0.0)
    };
    let up = local_update(0, &theta, &zeros(3), &zeros(3), &mut obj, &hp, &mut rng()).unwrap();
    assert_eq!(up.steps, 1);
    let got = up
        .theta
        .require(quadratic::QUAD_PARAM)
        .unwrap()
        .data()
        .to_vec();
    let want: Vec<f64> = [0.3f64, -1.2, 2.0]
        .iter()
        .zip(&a)
        .map(|(t, a)| t - 0.05 * (t - a))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn quadratic_single_step_from_origin() {
    let theta = quad_params(&[0.0]);
    for a in [1.0, -3.5, 0.125] {
        let mut obj = Obj::Quad(QuadraticObjective {
            target: vec![a],
            samples: 1,
        });
        let up = local_update(
            0,
            &theta,
            &zeros(1),
            &zeros(1),
            &mut obj,
            &sgd(1, 1, 0.1, 0.01),
            &mut rng(),
        )
        .unwrap();
        let d = up.delta[quadratic::QUAD_PARAM].data()[0];
        assert!((d - 0.1 * a).abs() <= 1e-12, "{d} vs {}", 0.1 * a);
    }
}

#[test]
fn identical_clients_give_identical_deltas() {
    let theta = quad_params(&[0.5, 0.1]);
    let mk = || {
        Obj::Quad(QuadraticObjective {
            target: vec![2.0, -1.0],
            samples: 40,
        })
    };
    let hp = HyperParams::default();
    let (mut o1, mut o2) = (mk(), mk());
    let a = local_update(1, &theta, &zeros(2), &zeros(2), &mut o1, &hp, &mut rng()).unwrap();
    let b = local_update(2, &theta, &zeros(2), &zeros(2), &mut o2, &hp, &mut rng()).unwrap();
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.c_local_new, b.c_local_new);
}

#[test]
fn empty_and_nonfinite_clients_fail() {
    let theta = quad_params(&[0.0]);
    let hp = sgd(1, 4, 0.1, 0.0);
    let mut empty = Obj::Quad(QuadraticObjective {
        target: vec![1.0],
        samples: 0,
    });
    let e = local_update(4, &theta, &zeros(1), &zeros(1), &mut empty, &hp, &mut rng()).unwrap_err();
    assert!(matches!(e, FedError::EmptyDataset(4)));
    let mut broken = Obj::Broken(3);
    let e = local_update(
        5,
        &theta,
        &zeros(1),
        &zeros(1),
        &mut broken,
        &hp,
        &mut rng(),
    )
    .unwrap_err();
    assert!(matches!(e, FedError::NonFinite { client: 5, .. }));
}

#[test]
fn sgd_variate_refresh_equals_negative_mean_corrected_gradient() {
    let theta0 = [0.2, -0.4];
    let theta = quad_params(&theta0);
    let a = [1.5, 0.7];
    let mut c_srv = zeros(2);
    c_srv.insert(
        quadratic::QUAD_PARAM.into(),
        Tensor::from_vec(vec![0.3, -0.1]),
    );
    let mut c_loc = zeros(2);
    c_loc.insert(
        quadratic::QUAD_PARAM.into(),
        Tensor::from_vec(vec![-0.2, 0.25]),
    );
    let mut obj = Obj::Logged(
        QuadraticObjective {
            target: a.to_vec(),
            samples: 20,
        },
        Vec::new(),
    );
    let hp = sgd(2, 8, 0.05, 0.1);
    let up = local_update(0, &theta, &c_srv, &c_loc, &mut obj, &hp, &mut rng()).unwrap();
    let Obj::Logged(_, seen) = obj else {
        unreachable!()
    };
    assert_eq!(seen.len(), up.steps);
    assert_eq!(up.steps, 6);
    for i in 0..2 {
        let mean: f64 = seen
            .iter()
            .map(|th| (th[i] - a[i]) + 0.1 * (th[i] - theta0[i]))
            .sum::<f64>()
            / seen.len() as f64;
        let got = up.c_local_new[quadratic::QUAD_PARAM].data()[i];
        assert!((got + mean).abs() < 1e-12, "{got} vs {}", -mean);
    }
}

#[test]
fn adamw_mode_moves_toward_target_and_keeps_variates_aligned() {
    let theta = quad_params(&[0.0, 0.0]);
    let mut obj = Obj::Quad(QuadraticObjective {
        target: vec![1.0, -1.0],
        samples: 32,
    });
    let hp = HyperParams {
        lr: 0.05,
        ..HyperParams::default()
    };
    let up = local_update(0, &theta, &zeros(2), &zeros(2), &mut obj, &hp, &mut rng()).unwrap();
    let d = up.delta[quadratic::QUAD_PARAM].data();
    assert!(d[0] > 0.0 && d[1] < 0.0);
    assert_eq!(
        up.c_local_new.keys().collect::<Vec<_>>(),
        vec![quadratic::QUAD_PARAM]
    );
    // the variate estimates minus the mean gradient, which points away from the target
    assert!(up.c_local_new[quadratic::QUAD_PARAM].data()[0] > 0.0);
}

#[test]
fn backbone_takes_reduced_sgd_steps_and_stays_out_of_the_delta() {
    struct Two;
    impl LocalObjective for Two {
        fn num_samples(&self) -> usize {
            1
        }
        fn minibatch(
            &mut self,
            _p: &mut ParamSet,
            _b: &[usize],
            _r: &mut dyn RngCore,
        ) -> Result<(f64, Named)> {
            let mut g = Named::new();
            g.insert("head.w".into(), Tensor::from_vec(vec![1.0]));
            g.insert("encoder.w".into(), Tensor::from_vec(vec![1.0]));
            Ok((0.0, g))
        }
    }
    let mut p = ParamSet::new();
    p.insert("head.w", Tensor::from_vec(vec![0.0]));
    p.insert("encoder.w", Tensor::from_vec(vec![0.0]));
    let mut c = Named::new();
    c.insert("head.w".into(), Tensor::zeros(&[1]));
    let up = local_update(0, &p, &c, &c, &mut Two, &sgd(1, 1, 0.5, 0.0), &mut rng()).unwrap();
    assert_eq!(up.theta.require("encoder.w").unwrap().data(), &[-0.05]);
    assert_eq!(up.theta.require("head.w").unwrap().data(), &[-0.5]);
    assert_eq!(up.delta.keys().collect::<Vec<_>>(), vec!["head.w"]);
}

fn named(parts: &[(&str, Vec<f64>)]) -> Named {
    parts
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::from_vec(v.clone())))
        .collect()
}

#[test]
fn clip_examples() {
    let d = named(&[("head.a", vec![0.3, 0.4])]);
    assert_eq!(clip_delta(&d, 1.0), d);
    let d = named(&[("head.a", vec![1.2, 1.6])]);
    let c = clip_delta(&d, 1.0);
    assert_eq!(c["head.a"].data(), &[0.6, 0.8]);
    assert!((global_norm(&c) - 1.0).abs() < 1e-12);
}

#[test]
fn clip_leaves_running_statistics_alone() {
    let d = named(&[
        ("head.a", vec![3.0, 4.0]),
        ("tokenizer.bn.running_mean", vec![100.0]),
    ]);
    let c = clip_delta(&d, 1.0);
    assert_eq!(c["tokenizer.bn.running_mean"].data(), &[100.0]);
    assert!((global_norm(&c) - 1.0).abs() < 1e-12);
}

#[test]
fn quantize_zero_tensor() {
    let d = named(&[("head.a", vec![0.0; 5])]);
    let q = quantize_8bit(&d);
    assert_eq!(q.tensors[0].scale, 0.0);
    assert!(q.tensors[0].codes.iter().all(|&c| c == 0));
    assert_eq!(dequantize(&q), d);
}

#[test]
fn quantize_ramp_error_bound() {
    let ramp: Vec<f64> = (0..255).map(|i| -1.0 + 2.0 * i as f64 / 254.0).collect();
    let d = named(&[("head.a", ramp.clone())]);
    let q = quantize_8bit(&d);
    assert_eq!(q.tensors[0].zero_point, 0);
    let back = dequantize(&q);
    let bound = 1.0 / 254.0 + f32::EPSILON as f64;
    for (x, y) in ramp.iter().zip(back["head.a"].data()) {
        assert!((x - y).abs() <= bound, "{x} -> {y}");
    }
}

#[test]
fn one_code_byte_per_parameter() {
    let d = named(&[("head.a", vec![0.5; 1000]), ("head.b", vec![-0.1; 37])]);
    let q = quantize_8bit(&d);
    assert_eq!(q.code_bytes(), 1037);
}

proptest! {
    #[test]
    fn clip_bound_holds(v in prop::collection::vec(-50.0f64..50.0, 1..40), split in 0usize..40, c in 0.01f64..5.0) {
        let split = split.min(v.len());
        let mut d = Named::new();
        d.insert("head.a".into(), Tensor::from_vec(v[..split].to_vec()));
        d.insert("head.b".into(), Tensor::from_vec(v[split..].to_vec()));
        let before = global_norm(&d);
        let after = global_norm(&clip_delta(&d, c));
        prop_assert!(after <= c + 1e-12);
        prop_assert!((after - before.min(c)).abs() <= 1e-12 * before.max(1.0));
    }

    #[test]
    fn quantization_error_at_most_half_a_step(v in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let d = named(&[("head.a", v.clone())]);
        let q = quantize_8bit(&d);
        let s = q.tensors[0].scale as f64;
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in v.iter().zip(dequantize(&q)["head.a"].data()) {
            prop_assert!((x - y).abs() <= s / 2.0 + 1e-12);
            prop_assert!(y.abs() <= max + 1e-12);
        }
    }

    #[test]
    fn wire_round_trip(v in prop::collection::vec(-1.0f64..1.0, 1..50), round in 0u32..1000, client in 0u32..50) {
        let d = named(&[("head.a", v.clone()), ("head.b", vec![0.25, -0.5])]);
        let mut q = quantize_8bit(&d);
        q.round = round;
        q.client_id = client;
        let schema = schema_of(&d);
        let bytes = encode_delta(&q, &schema).unwrap();
        prop_assert_eq!(bytes.len(), 14 + 2 * 14 + v.len() + 2);
        prop_assert_eq!(decode_delta(&bytes, &schema).unwrap(), q);
    }
}

#[test]
fn wire_rejects_corruption() {
    let d = named(&[("head.a", vec![0.5, -0.5])]);
    let q = quantize_8bit(&d);
    let schema = schema_of(&d);
    let bytes = encode_delta(&q, &schema).unwrap();
    assert_eq!(&bytes[..4], &[0x17, 0xDC, 0xFE, 0x00]);
    assert!(decode_delta(&bytes[..bytes.len() - 1], &schema).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_delta(&extra, &schema).is_err());
    assert!(decode_masked(&bytes, &schema).is_err());
}

fn upload(id: u32, samples: u64, age: u32, d: &Named) -> Upload {
    let mut q = quantize_8bit(d);
    q.client_id = id;
    Upload {
        client_id: id,
        samples,
        age,
        delta: q,
        c_delta: None,
    }
}

#[test]
fn aggregate_single_client_adds_dequantized_delta() {
    let theta = quad_params(&[0.1, 0.2, 0.3]);
    let mut state = GlobalState::new(theta.clone(), 10).unwrap();
    let d = named(&[(quadratic::QUAD_PARAM, vec![0.013, -0.5, 0.2])]);
    let u = upload(0, 10, 0, &d);
    let dq = dequantize(&u.delta);
    aggregate(&mut state, &[u], &HyperParams::default()).unwrap();
    let want: Vec<f64> = theta
        .require(quadratic::QUAD_PARAM)
        .unwrap()
        .data()
        .iter()
        .zip(dq[quadratic::QUAD_PARAM].data())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(
        state.theta.require(quadratic::QUAD_PARAM).unwrap().data(),
        &want[..]
    );
}

#[test]
fn opposite_deltas_cancel_within_quantization_error() {
    let theta = quad_params(&[0.0; 4]);
    let mut state = GlobalState::new(theta, 20).unwrap();
    let v = vec![0.3, -0.71, 0.05, 0.999];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let ups = [
        upload(0, 10, 0, &named(&[(quadratic::QUAD_PARAM, v)])),
        upload(1, 10, 0, &named(&[(quadratic::QUAD_PARAM, neg)])),
    ];
    let s = ups[0].delta.tensors[0].scale as f64;
    aggregate(&mut state, &ups, &HyperParams::default()).unwrap();
    for x in state.theta.require(quadratic::QUAD_PARAM).unwrap().data() {
        assert!(x.abs() <= s / 2.0);
    }
}

#[test]
fn stale_update_weight_is_halved() {
    let hp = HyperParams::default();
    assert_eq!(hp.staleness_factor(hp.staleness_threshold + 1), 0.5);
    assert_eq!(hp.staleness_factor(0), 1.0);
    let theta = quad_params(&[0.0]);
    let mut state = GlobalState::new(theta, 20).unwrap();
    let ups = [
        upload(0, 10, 0, &named(&[(quadratic::QUAD_PARAM, vec![0.9])])),
        upload(
            1,
            10,
            hp.staleness_threshold + 1,
            &named(&[(quadratic::QUAD_PARAM, vec![-0.6])]),
        ),
    ];
    let (a, b) = (dequantize(&ups[0].delta), dequantize(&ups[1].delta));
    let want =
        (1.0 * a[quadratic::QUAD_PARAM].data()[0] + 0.5 * b[quadratic::QUAD_PARAM].data()[0]) / 1.5;
    aggregate(&mut state, &ups, &hp).unwrap();
    let got = state.theta.require(quadratic::QUAD_PARAM).unwrap().data()[0];
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(multiplicities(&[10, 10], &[0, 2], &hp), vec![20, 10]);
}

#[test]
fn server_variate_update_is_sample_weighted() {
    let theta = quad_params(&[0.0, 0.0]);
    let mut state = GlobalState::new(theta, 40).unwrap();
    let mut ups = Vec::new();
    let cds = [vec![0.4, -0.2], vec![-0.1, 0.3]];
    let ns = [10u64, 30];
    for (i, (cd, &n)) in cds.iter().zip(&ns).enumerate() {
        let mut u = upload(
            i as u32,
            n,
            0,
            &named(&[(quadratic::QUAD_PARAM, vec![0.0, 0.0])]),
        );
        u.c_delta = Some(quantize_8bit(&named(&[(
            quadratic::QUAD_PARAM,
            cd.clone(),
        )])));
        ups.push(u);
    }
    let dq: Vec<Named> = ups
        .iter()
        .map(|u| dequantize(u.c_delta.as_ref().unwrap()))
        .collect();
    aggregate(&mut state, &ups, &HyperParams::default()).unwrap();
    for j in 0..2 {
        let want = 0.25 * dq[0][quadratic::QUAD_PARAM].data()[j]
            + 0.75 * dq[1][quadratic::QUAD_PARAM].data()[j];
        let got = state.c_server[quadratic::QUAD_PARAM].data()[j];
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn aggregate_errors() {
    let mut state = GlobalState::new(quad_params(&[0.0]), 1).unwrap();
    let hp = HyperParams::default();
    assert!(matches!(
        aggregate(&mut state, &[], &hp),
        Err(FedError::EmptyCohort)
    ));
    let u = upload(0, 1, 0, &named(&[("head.other", vec![0.1])]));
    assert!(matches!(
        aggregate(&mut state, &[u], &hp),
        Err(FedError::NameMismatch(_))
    ));
}

#[test]
fn payload_examples() {
    let r = account_payload(&[(ParamGroup::DaeAdapters, 420_000)], 0);
    assert_eq!(r.total_mb, 0.42);
    let r = account_payload(
        &[
            (ParamGroup::DaeAdapters, 420_000),
            (ParamGroup::Head, 180_000),
            (ParamGroup::TokenEmbeddings, 1_260_000),
        ],
        1_440_000,
    );
    assert!((r.total_mb - 3.30).abs() < 1e-12);
    assert_eq!(
        r.total_bytes,
        r.components.iter().map(|c| c.bytes).sum::<usize>() + r.overhead_bytes
    );
    let r = account_payload(&[(ParamGroup::Head, 0)], 777);
    assert_eq!(r.total_bytes, 777);
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["overhead_bytes"], 777);
}

fn cohort(targets: &[(Vec<f64>, usize)], theta: &ParamSet) -> Vec<ClientState<Obj>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, (t, n))| quad_client(i as u32, t, *n, theta))
        .collect()
}

fn three_sites() -> Vec<(Vec<f64>, usize)> {
    vec![
        (vec![1.0, -2.0, 0.5], 16),
        (vec![-0.5, 0.3, 2.0], 48),
        (vec![0.2, 0.9, -1.1], 112),
    ]
}

#[test]
fn secure_and_plain_rounds_are_bit_identical() {
    let theta = quad_params(&[0.0; 3]);
    let hp = QuadraticSetup::default().hyper_params(true);
    let mut plain = GlobalState::new(theta.clone(), 176).unwrap();
    let mut masked = GlobalState::new(theta.clone(), 176).unwrap();
    let mut c1 = cohort(&three_sites(), &theta);
    let mut c2 = cohort(&three_sites(), &theta);
    for _ in 0..4 {
        let r1 = run_round(&mut plain, &mut c1, &hp, false).unwrap();
        let r2 = run_round(&mut masked, &mut c2, &hp, true).unwrap();
        assert!(r2.secure && !r1.secure);
        assert_eq!(plain.theta, masked.theta);
        assert_eq!(plain.c_server, masked.c_server);
    }
}

#[test]
fn single_client_round_adds_its_delta() {
    let theta = quad_params(&[0.2, 0.0, -0.3]);
    let hp = QuadraticSetup::default().hyper_params(true);
    let mut state = GlobalState::new(theta.clone(), 48).unwrap();
    let mut c = cohort(&[(vec![-0.5, 0.3, 2.0], 48)], &theta);
    let mut probe = c[0].data.clone();
    let mut r = ChaCha8Rng::seed_from_u64(client_seed(hp.seed, 0, 0));
    let up = local_update(
        0,
        &theta,
        &state.c_server,
        &c[0].c_local,
        &mut probe,
        &hp,
        &mut r,
    )
    .unwrap();
    let dq = dequantize(&quantize_8bit(&clip_delta(&up.delta, hp.clip)));
    run_round(&mut state, &mut c, &hp, false).unwrap();
    let want: Vec<f64> = theta
        .require(quadratic::QUAD_PARAM)
        .unwrap()
        .data()
        .iter()
        .zip(dq[quadratic::QUAD_PARAM].data())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(
        state.theta.require(quadratic::QUAD_PARAM).unwrap().data(),
        &want[..]
    );
    assert_eq!(state.round, 1);
    assert_eq!(c[0].last_participation, Some(0));
}

#[test]
fn rounds_are_deterministic() {
    let theta = quad_params(&[0.0; 3]);
    let hp = QuadraticSetup::default().hyper_params(true);
    let run = || {
        let mut s = GlobalState::new(theta.clone(), 176).unwrap();
        let mut c = cohort(&three_sites(), &theta);
        let mut traj = Vec::new();
        for _ in 0..3 {
            run_round(&mut s, &mut c, &hp, true).unwrap();
            traj.push(s.theta.clone());
        }
        traj
    };
    assert_eq!(run(), run());
}

#[test]
fn failed_client_is_dropped_and_weights_renormalized() {
    let theta = quad_params(&[0.0; 3]);
    let hp = QuadraticSetup::default().hyper_params(false);
    let sites = three_sites();
    let mut with_broken = cohort(&sites[..2], &theta);
    with_broken.push(ClientState::new(7, Obj::Broken(50), &theta).unwrap());
    let mut clean = cohort(&sites[..2], &theta);
    let mut s1 = GlobalState::new(theta.clone(), 64).unwrap();
    let mut s2 = GlobalState::new(theta.clone(), 64).unwrap();
    let r = run_round(&mut s1, &mut with_broken, &hp, true).unwrap();
    run_round(&mut s2, &mut clean, &hp, true).unwrap();
    assert_eq!(r.dropped.len(), 1);
    assert_eq!(r.dropped[0].0, 7);
    assert_eq!(s1.theta, s2.theta);
    let w: f64 = r.clients.iter().map(|c| c.weight).sum();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn payload_report_matches_serialized_bytes() {
    let theta = quad_params(&[0.0; 3]);
    for (secure, variates) in [(false, false), (false, true), (true, false), (true, true)] {
        let hp = QuadraticSetup::default().hyper_params(variates);
        let mut s = GlobalState::new(theta.clone(), 176).unwrap();
        let mut c = cohort(&three_sites(), &theta);
        let r = run_round(&mut s, &mut c, &hp, secure).unwrap();
        for cl in &r.clients {
            assert_eq!(cl.upload_bytes, r.payload.total_bytes);
        }
        assert_eq!(r.upload_bytes, 3 * r.payload.total_bytes);
        let width = if secure { 4 } else { 1 };
        let msgs = if variates { 2 } else { 1 };
        assert_eq!(r.payload.total_bytes, msgs * (14 + 14 + 3 * width));
        assert_eq!(expected_payload(&theta, &hp, secure).unwrap(), r.payload);
    }
}

#[test]
fn lagging_client_trains_on_an_older_model() {
    let theta = quad_params(&[0.0; 3]);
    let hp = QuadraticSetup::default().hyper_params(false);
    let mut s = GlobalState::new(theta.clone(), 176)
        .unwrap()
        .with_history(3);
    let mut c = cohort(&three_sites(), &theta);
    c[2].lag = 2;
    let ages: Vec<Vec<u32>> = (0..4)
        .map(|_| {
            run_round(&mut s, &mut c, &hp, false)
                .unwrap()
                .clients
                .iter()
                .map(|r| r.age)
                .collect()
        })
        .collect();
    assert_eq!(ages[0], vec![0, 0, 0]);
    assert_eq!(ages[1], vec![0, 0, 1]);
    assert_eq!(ages[3], vec![0, 0, 2]);
}

#[test]
fn control_variates_reduce_client_drift() {
    let setup = QuadraticSetup::default();
    let on = quadratic_benchmark(&setup, &setup.hyper_params(true), 60, 1e-3).unwrap();
    let off = quadratic_benchmark(&setup, &setup.hyper_params(false), 60, 1e-3).unwrap();
    let r_on = on.rounds_to_tol.expect("variates converge");
    assert!(
        off.rounds_to_tol.is_none_or(|r| r > r_on),
        "{:?} vs {r_on}",
        off.rounds_to_tol
    );
}
