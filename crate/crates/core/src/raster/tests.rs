use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradient_check, Tape, Tensor};
use crate::scene::{Camera, Splat, SplatSet};

fn axis_camera(fx: f64, c: f64, size: usize) -> Camera {
    Camera::new(Matrix3::identity(), Vector3::zeros(), fx, fx, c, c, size, size).unwrap()
}

fn orbit_camera(size: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.4, -0.3, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        size as f64 * 1.6,
        size as f64 * 1.6,
        size,
        size,
    )
    .unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, k: usize) -> SplatSet {
    let splats = (0..k)
        .map(|_| Splat {
            position: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            log_scale: [
                rng.random_range(-2.3..-1.2),
                rng.random_range(-2.3..-1.2),
                rng.random_range(-2.3..-1.2),
            ],
            rotation: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            opacity_logit: rng.random_range(-1.5..2.0),
            color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        })
        .collect();
    SplatSet::new(splats).unwrap()
}

#[test]
fn project_point_examples() {
    let cam = axis_camera(100.0, 32.0, 64);
    let (p, z) = project_point(&Vector3::new(0.0, 0.0, 2.0), &cam, 0.01).unwrap();
    assert_eq!((p, z), ([32.0, 32.0], 2.0));
    let (p, _) = project_point(&Vector3::new(1.0, 0.0, 2.0), &cam, 0.01).unwrap();
    assert_eq!(p, [82.0, 32.0]);
    assert!(project_point(&Vector3::new(0.0, 0.0, -1.0), &cam, 0.01).is_none());
}

#[test]
fn jacobian_examples() {
    let j = projection_jacobian(&Vector3::new(0.0, 0.0, 1.0), 1.0, 1.0);
    assert_eq!(j, nalgebra::Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
    let j = projection_jacobian(&Vector3::new(0.0, 0.0, 2.0), 1.0, 1.0);
    assert_eq!(j, nalgebra::Matrix2x3::new(0.5, 0.0, 0.0, 0.0, 0.5, 0.0));
    let j = projection_jacobian(&Vector3::new(1.0, 0.0, 1.0), 1.0, 1.0);
    assert_eq!(j, nalgebra::Matrix2x3::new(1.0, 0.0, -1.0, 0.0, 1.0, 0.0));
}

#[test]
fn project_covariance_examples() {
    let j0 = projection_jacobian(&Vector3::new(0.0, 0.0, 1.0), 1.0, 1.0);
    let r = Matrix3::identity();
    assert_eq!(project_covariance(&Matrix3::identity(), &r, &j0, 0.0).unwrap(), Matrix2::identity());
    let diag = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
    assert_eq!(project_covariance(&diag, &r, &j0, 0.0).unwrap(), Matrix2::new(4.0, 0.0, 0.0, 1.0));
    // Oracle: J Jᵀ for J = [[1,0,-1],[0,1,0]] is [[2,0],[0,1]].
    let j1 = projection_jacobian(&Vector3::new(1.0, 0.0, 1.0), 1.0, 1.0);
    let jjt = j1 * j1.transpose();
    assert_eq!(jjt, Matrix2::new(2.0, 0.0, 0.0, 1.0));
    let got = project_covariance(&Matrix3::identity(), &r, &j1, 0.3).unwrap();
    assert!((got - Matrix2::new(2.3, 0.0, 0.0, 1.3)).abs().max() < 1e-15);
    let bad = Matrix3::identity() * f64::NAN;
    assert!(project_covariance(&bad, &r, &j1, 0.3).is_err());
}

#[test]
fn gaussian_2d_examples() {
    let id = Matrix2::identity();
    assert_eq!(eval_gaussian_2d([3.0, 4.0], [3.0, 4.0], &id).unwrap(), 1.0);
    let half = (-0.5f64).exp();
    assert!((eval_gaussian_2d([1.0, 0.0], [0.0, 0.0], &id).unwrap() - half).abs() < 1e-15);
    let d = Matrix2::new(4.0, 0.0, 0.0, 1.0);
    assert!((eval_gaussian_2d([2.0, 0.0], [0.0, 0.0], &d).unwrap() - half).abs() < 1e-15);
    assert!((half - 0.60653).abs() < 1e-5);
    assert!(matches!(
        eval_gaussian_2d([0.0, 0.0], [0.0, 0.0], &Matrix2::zeros()),
        Err(RasterError::SingularCovariance(_))
    ));
}

#[test]
fn gaussian_2d_gradient_matches_finite_differences() {
    // Analytic gradient w.r.t. the center and covariance entries (a, b, c).
    let x = [1.3, -0.4];
    let p0 = [0.2, 0.5, 2.0, 0.3, 1.5];
    let f = |v: &[f64]| eval_gaussian_2d(x, [v[0], v[1]], &Matrix2::new(v[2], v[3], v[3], v[4])).unwrap();
    let (cx, cy, a, b, c) = (p0[0], p0[1], p0[2], p0[3], p0[4]);
    let det = a * c - b * b;
    let (qa, qb, qc) = (c / det, -b / det, a / det);
    let (dx, dy) = (x[0] - cx, x[1] - cy);
    let g = f(&p0);
    let quad = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy;
    // d quad / d(a,b,c) via d(Q) = -Q dΣ Q.
    let qd = [qa * dx + qb * dy, qb * dx + qc * dy];
    let analytic = [
        g * qd[0],
        g * qd[1],
        g * 0.5 * qd[0] * qd[0],
        g * qd[0] * qd[1],
        g * 0.5 * qd[1] * qd[1],
    ];
    assert!((g - (-0.5 * quad).exp()).abs() < 1e-15);
    let err = gradient_check(f, &p0, &analytic, 1e-4);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn depth_sort_examples() {
    assert_eq!(depth_sort(&[3.0, 1.0, 2.0]), vec![1, 2, 0]);
    assert_eq!(depth_sort(&[1.0, 1.0]), vec![0, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let depths: Vec<f64> = (0..1000).map(|_| (rng.random_range(0..200) as f64) * 0.5).collect();
    // Reference: insertion sort on (depth, index) pairs.
    let mut reference: Vec<(f64, usize)> = Vec::new();
    for (i, &d) in depths.iter().enumerate() {
        let pos = reference.iter().position(|&(rd, _)| rd > d).unwrap_or(reference.len());
        reference.insert(pos, (d, i));
    }
    let want: Vec<usize> = reference.into_iter().map(|(_, i)| i).collect();
    assert_eq!(depth_sort(&depths), want);
}

fn point_splat(position: [f64; 3], logit: f64, color: [f64; 3]) -> Splat {
    Splat { position, log_scale: [-6.0; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity_logit: logit, color }
}

#[test]
fn single_opaque_splat_hits_alpha_cap() {
    let cam = axis_camera(100.0, 8.0, 16);
    let set = SplatSet::new(vec![point_splat([0.0, 0.0, 2.0], 50.0, [1.0, 0.0, 0.0])]).unwrap();
    let out = render_set(&set, &cam, &RasterConfig::default()).unwrap();
    let pix = 8 * 16 + 8;
    assert!((out.color[pix * 3] - 0.999).abs() < 1e-12);
    assert_eq!(out.color[pix * 3 + 1], 0.0);
    assert!((out.accumulated_opacity[pix] - 0.999).abs() < 1e-12);
    assert!(out.contributors(pix)[0].clamped);
}

#[test]
fn two_coincident_splats_composite_front_to_back() {
    let cam = axis_camera(100.0, 8.0, 16);
    let bg = [0.2, 0.4, 0.6];
    // The back splat is listed first; depth order must still put the front one first.
    let back = point_splat([0.0, 0.0, 2.0], 50.0, [0.0; 3]);
    let front = point_splat([0.0, 0.0, 1.0], 0.0, [1.0; 3]);
    let set = SplatSet::new(vec![back, front]).unwrap();
    let cfg = RasterConfig::default().with_background(bg);
    let out = render_set(&set, &cam, &cfg).unwrap();
    let pix = 8 * 16 + 8;
    for ch in 0..3 {
        let want = 0.5 + 0.0005 * bg[ch];
        assert!((out.color[pix * 3 + ch] - want).abs() < 1e-12, "{}", out.color[pix * 3 + ch]);
    }
    let order: Vec<u32> = out.contributors(pix).iter().map(|c| c.splat).collect();
    assert_eq!(order, vec![1, 0]);
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

#[test]
fn input_order_does_not_change_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = orbit_camera(24);
    let set = random_set(&mut rng, 4);
    let base = render_set(&set, &cam, &RasterConfig::default()).unwrap();
    let perms = permutations(&[0, 1, 2, 3]);
    assert_eq!(perms.len(), 24);
    for perm in perms {
        let splats = perm.iter().map(|&i| set.splats()[i]).collect();
        let out = render_set(&SplatSet::new(splats).unwrap(), &cam, &RasterConfig::default()).unwrap();
        assert_eq!(out.color, base.color);
        assert_eq!(out.accumulated_opacity, base.accumulated_opacity);
    }
}

#[test]
fn compositing_weights_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let set = random_set(&mut rng, 12);
        let out = render_set(&set, &orbit_camera(16), &RasterConfig::default()).unwrap();
        for pix in 0..out.width * out.height {
            let weights: Vec<f64> = out.contributors(pix).iter().map(|c| c.alpha * c.transmittance).collect();
            assert!(weights.iter().all(|&w| w >= 0.0));
            let sum: f64 = weights.iter().sum();
            assert!(sum <= 1.0 + 1e-12);
            assert!((sum - out.accumulated_opacity[pix]).abs() < 1e-12);
        }
    }
}

#[test]
fn world_translation_of_scene_and_camera_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = random_set(&mut rng, 8);
    let cam = orbit_camera(16);
    let offset = Vector3::new(3.0, -1.5, 0.75);
    let moved: Vec<Splat> = set
        .splats()
        .iter()
        .map(|s| {
            let mut s = *s;
            for d in 0..3 {
                s.position[d] += offset[d];
            }
            s
        })
        .collect();
    let a = render_set(&set, &cam, &RasterConfig::default()).unwrap();
    let b = render_set(&SplatSet::new(moved).unwrap(), &cam.translated_world(offset), &RasterConfig::default()).unwrap();
    for (x, y) in a.color.iter().zip(&b.color) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn invisible_splats_can_be_removed() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let set = random_set(&mut rng, 6);
    let mut with_ghosts = set.splats().to_vec();
    for i in 0..3 {
        let mut ghost = set.splats()[i];
        ghost.opacity_logit = -12.0; // α < 1/255 everywhere
        ghost.position[0] += 0.05;
        with_ghosts.insert(2 * i, ghost);
    }
    let cam = orbit_camera(16);
    let a = render_set(&set, &cam, &RasterConfig::default()).unwrap();
    let b = render_set(&SplatSet::new(with_ghosts).unwrap(), &cam, &RasterConfig::default()).unwrap();
    assert_eq!(a.color, b.color);
    assert_eq!(a.accumulated_opacity, b.accumulated_opacity);
}

#[test]
fn empty_view_returns_background() {
    let cam = axis_camera(10.0, 2.0, 4);
    let set = SplatSet::new(vec![point_splat([0.0, 0.0, -3.0], 2.0, [1.0; 3])]).unwrap();
    let cfg = RasterConfig::default().with_background([1.0, 1.0, 1.0]);
    let out = render_set(&set, &cam, &cfg).unwrap();
    assert!(out.color.iter().all(|&v| v == 1.0));
    assert!(out.accumulated_opacity.iter().all(|&v| v == 0.0));
}

#[test]
fn render_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let set = random_set(&mut rng, 5);
    let cam = orbit_camera(16);
    let cfg = RasterConfig::smooth().with_background([0.1, 0.2, 0.3]);
    let attrs = OwnedAttributes::from_set(&set).unwrap();
    let npix = 16 * 16;
    let w_color: Vec<f64> = (0..npix * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_acc: Vec<f64> = (0..npix).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |a: &OwnedAttributes| {
        let out = render(&a.view(), &cam, &cfg).unwrap();
        out.color.iter().zip(&w_color).map(|(x, w)| x * w).sum::<f64>()
            + out.accumulated_opacity.iter().zip(&w_acc).map(|(x, w)| x * w).sum::<f64>()
    };
    let out = render(&attrs.view(), &cam, &cfg).unwrap();
    let g = render_backward(&attrs.view(), &cam, cfg.background, &out, &w_color, &w_acc);

    let check = |field: usize, analytic: &[f64]| {
        let base = attrs.clone();
        let x0 = match field {
            0 => base.positions.clone(),
            1 => base.covariances.clone(),
            2 => base.colors.clone(),
            _ => base.opacities.clone(),
        };
        gradient_check(
            |x| {
                let mut a = base.clone();
                match field {
                    0 => a.positions = x.to_vec(),
                    1 => a.covariances = x.to_vec(),
                    2 => a.colors = x.to_vec(),
                    _ => a.opacities = x.to_vec(),
                }
                loss(&a)
            },
            &x0,
            analytic,
            1e-6,
        )
    };
    let errs = [check(0, &g.positions), check(1, &g.covariances), check(2, &g.colors), check(3, &g.opacities)];
    for e in errs {
        assert!(e < 1e-5, "{errs:?}");
    }
}

#[test]
fn covariance_op_gradient_matches_finite_differences() {
    let scales = vec![0.3, 0.7, 1.2, 0.5, 0.2, 0.9];
    let raw_q = vec![0.8, -0.3, 0.4, 0.2, -0.1, 0.6, 0.5, -0.7];
    let weights: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 1.7).collect();
    let run = |s: &[f64], q: &[f64]| {
        let mut tape = Tape::new();
        let vs = tape.constant(Tensor::new([2, 3], s.to_vec()));
        let vq = tape.constant(Tensor::new([2, 4], q.to_vec()));
        let unit = tape.normalize_rows(vq);
        let cov = covariance_op(&mut tape, vs, unit);
        let w = tape.constant(Tensor::new([2, 6], weights.clone()));
        let prod = tape.mul(cov, w);
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), g.get(vs).unwrap().to_vec(), g.get(vq).unwrap().to_vec())
    };
    let (_, gs, gq) = run(&scales, &raw_q);
    let err_s = gradient_check(|x| run(x, &raw_q).0, &scales, &gs, 1e-4);
    let err_q = gradient_check(|x| run(&scales, x).0, &raw_q, &gq, 1e-4);
    assert!(err_s < 1e-5 && err_q < 1e-5, "{err_s} {err_q}");
}

#[test]
fn taped_render_equals_eager_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let set = random_set(&mut rng, 2);
    let cam = orbit_camera(16);
    let cfg = RasterConfig::default();
    let eager = render_set(&set, &cam, &cfg).unwrap();

    let k = set.len();
    let mut tape = Tape::new();
    let flat = |f: &dyn Fn(&Splat) -> Vec<f64>| set.splats().iter().flat_map(f).collect::<Vec<f64>>();
    let pos = tape.constant(Tensor::new([k, 3], flat(&|s| s.position.to_vec())));
    let ls = tape.constant(Tensor::new([k, 3], flat(&|s| s.log_scale.to_vec())));
    let q = tape.constant(Tensor::new([k, 4], flat(&|s| s.rotation.to_vec())));
    let logit = tape.constant(Tensor::new([k, 1], flat(&|s| vec![s.opacity_logit])));
    let col = tape.constant(Tensor::new([k, 3], flat(&|s| s.color.to_vec())));
    let scales = tape.exp(ls);
    let unit = tape.normalize_rows(q);
    let cov = covariance_op(&mut tape, scales, unit);
    let opac = tape.sigmoid(logit);
    let img = render_op(&mut tape, RenderVars { positions: pos, covariances: cov, colors: col, opacities: opac }, &cam, &cfg)
        .unwrap();
    let packed = tape.value(img);
    for p in 0..16 * 16 {
        for ch in 0..3 {
            assert_eq!(packed.at(p, ch), eager.color[3 * p + ch]);
        }
        assert_eq!(packed.at(p, 3), eager.accumulated_opacity[p]);
    }
}
