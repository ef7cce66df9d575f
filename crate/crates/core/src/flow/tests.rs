use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::frame::Frame;
use crate::gradcheck::{gradcheck, random_tensor};
use crate::numerics::{init_conv, ParamStore};

fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (0.37 * x + 0.11 * y).sin() + 0.15 * (0.23 * y - 0.05 * x).cos() + 0.1 * (0.61 * x * 0.7 + 0.53 * y).sin()
}

fn textured(w: usize, h: usize, shift: (f64, f64), t: i64) -> Frame {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(texture(x as f64 - shift.0, y as f64 - shift.1) as f32);
        }
    }
    Frame::new(w, h, 1, data, t).unwrap()
}

fn assert_const(f: &FlowField, dx: f32, dy: f32) {
    for y in 0..f.height() {
        for x in 0..f.width() {
            assert_eq!(f.at(x, y), (dx, dy), "at ({x},{y})");
        }
    }
}

#[test]
fn substitution_examples() {
    let pair = approximate_bipred_flows(
        &FlowField::constant(4, 4, 4.0, 0.0),
        &FlowField::constant(4, 4, -4.0, 0.0),
        RefDistances::new(3, 3).unwrap(),
    )
    .unwrap();
    assert_const(&pair.to_past, -2.0, 0.0);
    assert_const(&pair.to_future, 2.0, 0.0);

    let pair = approximate_bipred_flows(
        &FlowField::constant(4, 4, 9.0, 0.0),
        &FlowField::constant(4, 4, -9.0, 0.0),
        RefDistances::new(1, 2).unwrap(),
    )
    .unwrap();
    assert_const(&pair.to_past, -3.0, 0.0);
    assert_const(&pair.to_future, 6.0, 0.0);

    let pair = approximate_bipred_flows(
        &FlowField::constant(4, 4, 6.0, 2.0),
        &FlowField::constant(4, 4, -5.0, -1.0),
        RefDistances::new(6, 6).unwrap(),
    )
    .unwrap();
    assert_const(&pair.to_past, -2.75, -0.75);
    assert_const(&pair.to_future, 2.75, 0.75);
}

#[test]
fn unsupported_models_are_rejected() {
    assert!(ModelId::new(2, 2).is_err());
    assert!(ModelId::new(1, 3).is_err());
    assert!(RefDistances::new(0, 1).is_err());
    assert_eq!(ModelId::new(2, 1).unwrap(), ModelId::M12);
    assert!(RefDistances::new(2, 1).unwrap().is_mirror());
}

#[test]
fn opposite_anchor_flows_give_fractional_motion() {
    let f = FlowField::from_fn(5, 3, |x, y| (x as f32 * 0.75 - 1.5, y as f32 * 3.0 - 2.25));
    let neg = f.combine(-1.0, &f, 0.0).unwrap();
    let m33 = approximate_bipred_flows(&f, &neg, ModelId::M33.into()).unwrap();
    assert_eq!(m33.to_past, f.combine(-0.5, &f, 0.0).unwrap());
    let m12 = approximate_bipred_flows(&f, &neg, ModelId::M12.into()).unwrap();
    for i in 0..f.data().len() {
        assert!((m12.to_past.data()[i] + f.data()[i] / 3.0).abs() < 1e-6);
        assert!((m12.to_future.data()[i] - 2.0 * f.data()[i] / 3.0).abs() < 1e-6);
    }
}

#[test]
fn approximations_are_exact_for_constant_velocity() {
    let v = (0.7f32, -0.4f32);
    for (past, future) in [(1, 2), (2, 1), (3, 3), (6, 6)] {
        let gap = (past + future) as f32;
        let fwd = FlowField::constant(3, 3, v.0 * gap, v.1 * gap);
        let bwd = FlowField::constant(3, 3, -v.0 * gap, -v.1 * gap);
        let pair = approximate_bipred_flows(&fwd, &bwd, RefDistances::new(past, future).unwrap()).unwrap();
        let (px, py) = pair.to_past.at(1, 1);
        let (fx, fy) = pair.to_future.at(1, 1);
        assert!((px + v.0 * past as f32).abs() < 1e-5 && (py + v.1 * past as f32).abs() < 1e-5, "({past},{future})");
        assert!((fx - v.0 * future as f32).abs() < 1e-5 && (fy - v.1 * future as f32).abs() < 1e-5, "({past},{future})");
    }
}

fn small_flow() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-64i32..64).prop_map(|v| v as f32 * 0.25), 8)
}

proptest! {
    #[test]
    fn approximation_is_linear(a in small_flow(), b in small_flow(), c in small_flow(), d in small_flow(), m in 0usize..4) {
        let dist = [RefDistances { past: 1, future: 2 }, RefDistances { past: 2, future: 1 },
                    RefDistances { past: 3, future: 3 }, RefDistances { past: 6, future: 6 }][m];
        let f = |v: Vec<f32>| FlowField::new(2, 2, v).unwrap();
        let sum = |x: &FlowField, y: &FlowField| x.combine(1.0, y, 1.0).unwrap();
        let (fa, fb, fc, fd) = (f(a), f(b), f(c), f(d));
        let joint = approximate_bipred_flows(&sum(&fa, &fc), &sum(&fb, &fd), dist).unwrap();
        let p1 = approximate_bipred_flows(&fa, &fb, dist).unwrap();
        let p2 = approximate_bipred_flows(&fc, &fd, dist).unwrap();
        let (sp, sf) = (sum(&p1.to_past, &p2.to_past), sum(&p1.to_future, &p2.to_future));
        if m >= 2 {
            // Quarter-pixel inputs keep every quarter-weighted sum exact in f32.
            prop_assert_eq!(joint.to_past, sp);
            prop_assert_eq!(joint.to_future, sf);
        } else {
            // Ninths are not representable; allow rounding of the coefficients.
            for (x, y) in joint.to_past.data().iter().chain(joint.to_future.data()).zip(sp.data().iter().chain(sf.data())) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn flow_loss_is_nonnegative_and_homogeneous(a in small_flow(), b in small_flow(), c in 0.0f64..4.0) {
        let pair = |v: &[f32]| FlowPair::new(FlowField::new(1, 2, v[..4].to_vec()).unwrap(),
                                            FlowField::new(1, 2, v[4..].to_vec()).unwrap()).unwrap();
        let (p, t) = (pair(&a), pair(&b));
        let base = flow_loss(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert_eq!(base == 0.0, a == b);
        let scaled: Vec<f32> = a.iter().zip(&b).map(|(x, y)| y + (c as f32) * (x - y)).collect();
        let s = flow_loss(&[pair(&scaled)], &[t]).unwrap();
        prop_assert!((s - c * base).abs() <= 1e-4 * (1.0 + c * base));
    }
}

#[test]
fn flow_loss_examples() {
    let zero = FlowPair::new(FlowField::zeros(2, 2), FlowField::zeros(2, 2)).unwrap();
    let ones = FlowPair::new(FlowField::constant(2, 2, 1.0, 1.0), FlowField::constant(2, 2, -1.0, 1.0)).unwrap();
    assert_eq!(flow_loss(std::slice::from_ref(&zero), std::slice::from_ref(&zero)).unwrap(), 0.0);
    assert_eq!(flow_loss(&[ones], std::slice::from_ref(&zero)).unwrap(), 8.0);
    assert!(flow_loss(&[], &[]).is_err());
}

#[test]
fn flow_loss_var_matches_plain_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&[3, 4, 4, 4], -2.0, 2.0, &mut rng).cast::<f32>();
    let b = random_tensor(&[3, 4, 4, 4], -2.0, 2.0, &mut rng).cast::<f32>();
    let pairs = |t: &Tensor<f32>| (0..3).map(|n| FlowPair::from_tensor(&t.batch_item(n).unwrap()).unwrap()).collect::<Vec<_>>();
    let plain = flow_loss(&pairs(&a), &pairs(&b)).unwrap();
    let tape = crate::numerics::Tape::<f32>::new();
    let v = flow_loss_var(tape.constant(a), tape.constant(b)).unwrap().value().item();
    assert!((plain - v as f64).abs() < 1e-4);
}

#[test]
fn endpoint_error_examples() {
    let f = FlowField::from_fn(4, 3, |x, y| (x as f32, y as f32));
    assert_eq!(endpoint_error(&f, &f).unwrap(), 0.0);
    let off = f.combine(1.0, &FlowField::constant(4, 3, 3.0, 4.0), 1.0).unwrap();
    assert!((endpoint_error(&off, &f).unwrap() - 5.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = FlowField::from_tensor(&random_tensor(&[1, 2, 5, 7], -3.0, 3.0, &mut rng).cast()).unwrap();
    let b = FlowField::from_tensor(&random_tensor(&[1, 2, 5, 7], -3.0, 3.0, &mut rng).cast()).unwrap();
    let mut naive = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            let (ax, ay) = a.at(x, y);
            let (bx, by) = b.at(x, y);
            naive += (((ax - bx) as f64).powi(2) + ((ay - by) as f64).powi(2)).sqrt();
        }
    }
    assert!((endpoint_error(&a, &b).unwrap() - naive / 35.0).abs() < 1e-6);
}

#[test]
fn estimator_recovers_global_shift() {
    let a = textured(64, 64, (0.0, 0.0), 0);
    let b = textured(64, 64, (3.0, 0.0), 1);
    let f = estimate_anchor_flow(&a, &b, 3, 6).unwrap();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 8..56 {
        for x in 8..56 {
            let (dx, dy) = f.at(x, y);
            sx += dx as f64;
            sy += dy as f64;
            n += 1.0;
        }
    }
    let (mx, my) = (sx / n, sy / n);
    assert!((mx - 3.0).abs() < 0.5 && my.abs() < 0.5, "mean flow ({mx}, {my})");
    assert_eq!((f.source, f.target), (0, 1));
}

#[test]
fn estimator_is_zero_on_identical_and_flat_frames() {
    let a = textured(32, 32, (0.0, 0.0), 0);
    let f = estimate_anchor_flow(&a, &a, 3, 5).unwrap();
    assert!(f.data().iter().all(|v| v.abs() < 1e-3));
    let flat_a = Frame::filled(32, 32, 3, 0.4, 0);
    let flat_b = Frame::filled(32, 32, 3, 0.6, 1);
    let f = estimate_anchor_flow(&flat_a, &flat_b, 3, 5).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn estimator_rejects_small_frames_and_is_deterministic() {
    let a = textured(16, 16, (0.0, 0.0), 0);
    let b = textured(16, 16, (1.0, 0.5), 1);
    assert!(estimate_anchor_flow(&a, &b, 5, 3).is_err());
    assert!(estimate_anchor_flow(&a, &b, 0, 3).is_err());
    let f1 = estimate_anchor_flow(&a, &b, 2, 4).unwrap();
    let f2 = estimate_anchor_flow(&a.clone(), &b.clone(), 2, 4).unwrap();
    let bytes = |f: &FlowField| f.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
    assert_eq!(bytes(&f1), bytes(&f2));
}

#[test]
fn file_provider_reads_named_flows() {
    let dir = tempfile::tempdir().unwrap();
    let a = textured(8, 8, (0.0, 0.0), 4);
    let b = textured(8, 8, (0.0, 0.0), 7);
    let f = FlowField::from_fn(8, 8, |x, y| (x as f32 * 0.5, -(y as f32)));
    f.write_to(std::fs::File::create(dir.path().join("4_7.bpfl")).unwrap()).unwrap();
    let provider = FileFlowProvider { dir: dir.path().to_path_buf() };
    let got = provider.anchor_flow(&a, &b).unwrap();
    assert_eq!(got.data(), f.data());
    assert!(provider.anchor_flow(&b, &a).is_err());
}

fn refine_store(zero_head: bool, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_refine(&mut store, "r.", RefineConfig { c0: 4, c1: 6 }, 1, &mut rng);
    if !zero_head {
        init_conv(&mut store, "r.head", 4, 4, 3, &mut rng);
    }
    store
}

#[test]
fn zero_head_refinement_is_identity() {
    let store = refine_store(true, 1);
    let approx = FlowPair::new(
        FlowField::from_fn(8, 8, |x, y| (x as f32 * 0.3, y as f32 - 2.0)),
        FlowField::from_fn(8, 8, |x, _| (-(x as f32), 1.5)),
    )
    .unwrap();
    let past = textured(8, 8, (0.0, 0.0), 0);
    let future = textured(8, 8, (1.0, 0.0), 2);
    let out = refine_flows(&store, "r.", &approx, &past, &future).unwrap();
    assert_eq!(out, approx);
    assert!(refine_flows(&store, "r.", &approx, &past, &textured(4, 8, (0.0, 0.0), 2)).is_err());
}

#[test]
fn flow_loss_gradient_through_refinement() {
    let store = refine_store(false, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let approx = random_tensor(&[2, 4, 8, 8], -2.0, 2.0, &mut rng);
    let target = random_tensor(&[2, 4, 8, 8], -2.0, 2.0, &mut rng);
    let past = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let future = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let inputs: Vec<_> = store.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
    let report = gradcheck(&inputs, 12, 2, |p| {
        let t = p.tape();
        let out = refine_flows_var(p, "r.", t.constant(approx.clone()), t.constant(past.clone()), t.constant(future.clone()))?;
        flow_loss_var(out, t.constant(target.clone()))
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{report:?}");
}
