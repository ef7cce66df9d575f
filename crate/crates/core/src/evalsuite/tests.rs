use std::io::Cursor;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::flow::{approximate_bipred_flows, endpoint_error, RefDistances};

fn random_frame(w: usize, h: usize, c: usize, rng: &mut impl Rng) -> Frame {
    Frame::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect(), 0).unwrap()
}

fn smooth_frame(w: usize, h: usize, seed: u64) -> Frame {
    let spec = ClipSpec { width: w, height: h, channels: 3, frames: 1, motion: Motion::Translation { vx: 0.0, vy: 0.0 }, texture: Texture::Noise };
    gen_synthetic_clip(spec, seed).unwrap().frames.remove(0)
}

#[test]
fn psnr_closed_forms() {
    let a = Frame::filled(8, 8, 3, 0.5, 0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    let b = Frame::filled(8, 8, 3, 0.5 + 1.0 / 255.0, 0);
    let v = psnr(&a, &b).unwrap();
    assert!((v - 20.0 * 255f64.log10()).abs() < 0.01, "{v}");
    assert!((v - 48.13).abs() < 0.01);
}

#[test]
fn psnr_matches_two_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_frame(9, 7, 3, &mut rng);
    let b = random_frame(9, 7, 3, &mut rng);
    let m: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
}

#[test]
fn ms_ssim_identity_and_inversion() {
    let a = smooth_frame(64, 64, 3);
    assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
    let inv = Frame::new(64, 64, 3, a.data().iter().map(|v| 1.0 - v).collect(), 0).unwrap();
    assert!(ms_ssim(&a, &inv).unwrap() < 0.9);
    let big = smooth_frame(180, 180, 4);
    assert_eq!(ms_ssim_scales(180, 180), 5);
    assert_eq!(ms_ssim(&big, &big).unwrap(), 1.0);
    assert_eq!(ms_ssim_scales(64, 64), 3);
    assert!(ms_ssim(&Frame::filled(8, 8, 1, 0.1, 0), &Frame::filled(8, 8, 1, 0.1, 0)).is_err());
}

/// Direct windowed statistics with a 2-D Gaussian, no separability.
fn brute_ssim(a: &Frame, b: &Frame) -> f64 {
    let (w, h) = (a.width(), a.height());
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / gs;
                        let va = a.sample(c, y + i, x + j) as f64;
                        let vb = b.sample(c, y + i, x + j) as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / a.channels() as f64
}

#[test]
fn single_scale_ssim_matches_brute_force() {
    let a = Frame::new(16, 16, 1, (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.8 } else { 0.2 }).collect(), 0).unwrap();
    let b = Frame::new(16, 16, 1, (0..256).map(|i| ((i % 16) as f32 / 15.0) * 0.6 + 0.2).collect(), 0).unwrap();
    assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_frame(16, 16, 3, &mut rng);
    let d = random_frame(16, 16, 3, &mut rng);
    assert!((ssim(&c, &d).unwrap() - brute_ssim(&c, &d)).abs() < 1e-6);
}

#[test]
fn bpp_accounting() {
    assert!((bpp_of(1000, 1, 352, 288).unwrap() - 8000.0 / 101376.0).abs() < 1e-15);
    assert_eq!(bpp_of(2000, 1, 352, 288).unwrap(), 2.0 * bpp_of(1000, 1, 352, 288).unwrap());
    assert_eq!(bpp_of(1000, 4, 10, 10).unwrap(), 20.0);
    assert!(bpp_of(1, 0, 1, 1).is_err());
}

#[test]
fn constant_velocity_approximation_is_exact() {
    let spec = ClipSpec { width: 48, height: 48, channels: 3, frames: 13, motion: Motion::Translation { vx: 0.31, vy: -0.22 }, texture: Texture::Noise };
    let clip = gen_synthetic_clip(spec, 5).unwrap();
    for (past, n, future) in [(0, 6, 12), (0, 3, 6), (3, 4, 6), (3, 5, 6)] {
        let dist = RefDistances::new((n - past) as u32, (future - n) as u32).unwrap();
        let pair = approximate_bipred_flows(&clip.flow(past, future), &clip.flow(future, past), dist).unwrap();
        assert!(endpoint_error(&pair.to_past, &clip.flow(n, past)).unwrap() < 1e-3);
        assert!(endpoint_error(&pair.to_future, &clip.flow(n, future)).unwrap() < 1e-3);
    }
}

#[test]
fn accelerating_motion_breaks_the_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ClipSpec::random(MotionKind::Accelerating, 64, 64, &mut rng);
    let clip = gen_synthetic_clip(spec, 8).unwrap();
    let pair = approximate_bipred_flows(&clip.flow(0, 12), &clip.flow(12, 0), RefDistances::new(6, 6).unwrap()).unwrap();
    let truth = clip.flow(6, 0);
    let worst = (0..64 * 64)
        .map(|i| {
            let (a, b) = (pair.to_past.at(i % 64, i / 64), truth.at(i % 64, i / 64));
            (a.0 - b.0).hypot(a.1 - b.1)
        })
        .fold(0.0f32, f32::max);
    assert!(worst > 0.5, "{worst}");
}

#[test]
fn random_specs_respect_displacement_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in [MotionKind::Translation, MotionKind::Accelerating, MotionKind::Affine] {
        for _ in 0..20 {
            let clip = gen_synthetic_clip(ClipSpec { frames: 1, ..ClipSpec::random(kind, 64, 64, &mut rng) }, 0).unwrap();
            let f = clip.flow(0, 12);
            let worst = (0..64 * 64).map(|i| { let (x, y) = f.at(i % 64, i / 64); x.hypot(y) }).fold(0.0f32, f32::max);
            assert!(worst <= 8.0 + 1e-4, "{kind:?}: {worst}");
        }
    }
}

#[test]
fn analytic_flows_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [MotionKind::Accelerating, MotionKind::Affine] {
        let clip = gen_synthetic_clip(ClipSpec { frames: 1, ..ClipSpec::random(kind, 32, 32, &mut rng) }, 0).unwrap();
        let (ab, bc, ac) = (clip.flow(1, 5), clip.flow(5, 9), clip.flow(1, 9));
        if let Motion::Accelerating { .. } = clip.spec.motion {
            // Pure translation: flows are spatially constant and add.
            let s = (ab.at(3, 3).0 + bc.at(3, 3).0, ab.at(3, 3).1 + bc.at(3, 3).1);
            assert!((s.0 - ac.at(3, 3).0).abs() < 1e-5 && (s.1 - ac.at(3, 3).1).abs() < 1e-5);
        }
        // Round trip a->b->a returns to the start.
        let (fx, fy) = ab.at(10, 12);
        let q = (10.0 + fx, 12.0 + fy);
        let back = clip.flow_at(5, 1, q.0 as f64, q.1 as f64);
        assert!((q.0 as f64 + back.0 - 10.0).abs() < 1e-4 && (q.1 as f64 + back.1 - 12.0).abs() < 1e-4);
    }
}

#[test]
fn clips_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ClipSpec::random(MotionKind::Affine, 32, 32, &mut rng);
    let a = gen_synthetic_clip(spec, 77).unwrap();
    let b = gen_synthetic_clip(spec, 77).unwrap();
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.data(), y.data());
    }
    let c = gen_synthetic_clip(spec, 78).unwrap();
    assert_ne!(a.frames[0].data(), c.frames[0].data());
}

#[test]
fn y4m_444_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames: Vec<Frame> = (0..3)
        .map(|t| Frame::new(6, 4, 3, (0..72).map(|_| rng.gen_range(0u8..=255) as f32 / 255.0).collect(), t).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_y4m(&mut buf, &frames, (30, 1)).unwrap();
    let v = read_y4m(Cursor::new(buf)).unwrap();
    assert!(!v.lossy_ingest);
    assert_eq!(v.fps, (30, 1));
    assert_eq!(v.frames.len(), 3);
    for (a, b) in frames.iter().zip(&v.frames) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.time_index, b.time_index);
    }
}

#[test]
fn y4m_420_is_flagged_lossy() {
    let mut data = b"YUV4MPEG2 W4 H2 F25:1 Ip C420jpeg\nFRAME\n".to_vec();
    data.extend([10u8, 20, 30, 40, 50, 60, 70, 80, 128, 128, 64, 64]);
    let v = read_y4m(Cursor::new(data)).unwrap();
    assert!(v.lossy_ingest);
    assert_eq!(v.frames[0].channels(), 3);
    assert_eq!(v.frames[0].sample(1, 1, 3), 128.0 / 255.0);
}

#[test]
fn malformed_y4m_is_rejected() {
    assert!(read_y4m(Cursor::new(b"YUV4MPEG W2 H2\n".to_vec())).is_err());
    assert!(read_y4m(Cursor::new(b"YUV4MPEG2 W2 C444\nFRAME\n".to_vec())).is_err());
    assert!(read_y4m(Cursor::new(b"YUV4MPEG2 W2 H2 C444\nFRAME\n\x01\x02".to_vec())).is_err());
    assert!(read_y4m(Cursor::new(b"YUV4MPEG2 W2 H2 C422\n".to_vec())).is_err());
}

#[test]
fn ppm_sequence_reads_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames: Vec<Frame> = (0..13)
        .map(|t| Frame::new(5, 3, 3, (0..45).map(|_| rng.gen_range(0u8..=255) as f32 / 255.0).collect(), t).unwrap())
        .collect();
    write_image_sequence(dir.path(), &frames).unwrap();
    let v = read_video(dir.path()).unwrap();
    assert_eq!(v.frames.len(), 13);
    for (i, (a, b)) in frames.iter().zip(&v.frames).enumerate() {
        assert_eq!(b.time_index, i as i64);
        assert_eq!(a.data(), b.data());
    }
    let odd = Frame::filled(4, 3, 3, 0.0, 0);
    write_pnm(&mut std::fs::File::create(dir.path().join("frame_0099.ppm")).unwrap(), &odd).unwrap();
    assert!(read_video(dir.path()).is_err());
}

#[test]
fn pgm_with_comments_and_16_bit() {
    let mut data = b"P5\n# comment\n2 1\n65535\n".to_vec();
    data.extend([0xFF, 0xFF, 0x00, 0x00]);
    let f = read_pnm(&data, 0).unwrap();
    assert_eq!(f.data(), &[1.0, 0.0]);
    assert!(read_pnm(b"P3\n1 1\n255\n0 0 0", 0).is_err());
    assert!(read_pnm(b"P6\n2 2\n255\n\x00", 0).is_err());
}

#[test]
fn rd_files_are_sorted_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rd.csv");
    let one = vec![RdPoint { bpp: 0.5, psnr_db: 30.0, ms_ssim: 0.9, label: "k=4".into() }];
    emit_rd(&one, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap(), "bpp,psnr_db,ms_ssim,label");
    let pts = vec![
        RdPoint { bpp: 1.0, psnr_db: 35.0, ms_ssim: 0.97, label: "k=8, raw".into() },
        RdPoint { bpp: 0.125, psnr_db: 25.0, ms_ssim: 0.8, label: "k=1".into() },
        RdPoint { bpp: 0.5, psnr_db: 31.0, ms_ssim: 0.93, label: "k=4".into() },
    ];
    let json = emit_rd(&pts, &path).unwrap();
    let back = read_rd_csv(&path).unwrap();
    let bpps: Vec<f64> = back.iter().map(|p| p.bpp).collect();
    assert_eq!(bpps, vec![0.125, 0.5, 1.0]);
    assert_eq!(back[2].label, "k=8, raw");
    let from_json: Vec<RdPoint> = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert_eq!(from_json, back);
    assert!(emit_rd(&[], &path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn metrics_are_symmetric_and_flip_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_frame(24, 22, 3, &mut rng);
        let b = random_frame(24, 22, 3, &mut rng);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (fa, fb) = (a.flipped_horizontal(), b.flipped_horizontal());
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&fa, &fb).unwrap()).abs() < 1e-9);
        let m = ms_ssim(&a, &b).unwrap();
        prop_assert!(m <= 1.0);
        prop_assert!((m - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((m - ms_ssim(&fa, &fb).unwrap()).abs() < 1e-9);
        prop_assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
    }
}
