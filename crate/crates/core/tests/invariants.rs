//! Randomized checks of the module invariants.

use std::sync::OnceLock;

use densesim::mesh::{HalfEdgeIndex, PartMesh, Uv, Vec3};
use densesim::metrics::{add_normals, gps, iou, oks, uv_l2, DenseLabels, GeodesicTable};
use densesim::mixer::{BatchStream, Domain, MixSpec, TrainingSample};
use densesim::net::gradcheck::random_sample;
use densesim::net::layers::BatchNorm;
use densesim::net::{BatchMixtureNorm, Tensor4};
use densesim::raster::{Keypoint2, Visibility, BACKGROUND_PART};
use densesim::rig::{make_humanoid, parameterize, reference_atlas, HumanoidParams, KEYPOINT_COUNT};
use densesim::uv::{assemble_interior_system, conjugate_gradient, harmonic_unwrap, laplacian_weights, LaplacianWeights, SolverOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn atlas() -> &'static PartMesh {
    static ATLAS: OnceLock<PartMesh> = OnceLock::new();
    ATLAS.get_or_init(|| reference_atlas().unwrap())
}

fn atlas_geodesics() -> &'static GeodesicTable {
    static TABLE: OnceLock<GeodesicTable> = OnceLock::new();
    TABLE.get_or_init(|| GeodesicTable::new(atlas().clone()).unwrap())
}

fn grid(n: usize, seed: u64) -> PartMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1.0 / (n - 1) as f64;
    let mut v = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let inner = i > 0 && j > 0 && i < n - 1 && j < n - 1;
            let d = if inner { [rng.gen_range(-0.3..0.3) * h, rng.gen_range(-0.3..0.3) * h] } else { [0.0; 2] };
            v.push(Vec3::new(i as f64 * h + d[0], j as f64 * h + d[1], rng.gen_range(-0.1..0.1)));
        }
    }
    let mut t = Vec::new();
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            t.push([a, a + 1, a + n + 1]);
            t.push([a, a + n + 1, a + n]);
        }
    }
    let nt = t.len();
    PartMesh::new(v, t, vec![0; nt], 1).unwrap()
}

fn random_boundary(mesh: &PartMesh, seed: u64) -> Vec<Option<Uv>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = HalfEdgeIndex::new(mesh);
    (0..mesh.vertices.len()).map(|v| idx.is_boundary(v).then(|| Uv::new(rng.gen(), rng.gen()))).collect()
}

fn pools(seed: u64) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = (0..3).map(|_| random_sample(8, Domain::Sim, 4, &mut rng)).collect();
    let real = (0..3).map(|_| random_sample(8, Domain::Real, 4, &mut rng)).collect();
    (sim, real)
}

fn keypoints(rng: &mut impl Rng) -> [Keypoint2; KEYPOINT_COUNT] {
    std::array::from_fn(|_| Keypoint2 {
        x: rng.gen_range(0.0..64.0),
        y: rng.gen_range(0.0..64.0),
        visibility: [Visibility::OffImage, Visibility::Occluded, Visibility::Visible][rng.gen_range(0..3)],
    })
}

fn tensor(n: usize, c: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 9 * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor4::from_vec(n, 3, 3, c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn transfer_keeps_landmarks_and_is_idempotent(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fig = make_humanoid(&HumanoidParams::sample(&mut rng, 1), seed).unwrap();
        let once = parameterize(&fig, atlas()).unwrap();
        let twice = parameterize(&once, atlas()).unwrap();
        prop_assert_eq!(&once.mesh.uv, &twice.mesh.uv);
        let uv = once.mesh.uv.as_ref().unwrap();
        prop_assert!(uv.iter().all(|t| (0.0..=1.0).contains(&t.x) && (0.0..=1.0).contains(&t.y)));
        let ref_uv = atlas().uv.as_ref().unwrap();
        for (name, &v) in &once.mesh.landmarks {
            let r = atlas().landmarks[name];
            prop_assert_eq!(uv[v], ref_uv[r], "landmark {}", name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solver_residual_is_small(n in 3usize..14, seed in any::<u64>()) {
        let m = grid(n, seed);
        let fixed = random_boundary(&m, seed ^ 1);
        let w = laplacian_weights(&m, LaplacianWeights::Cotangent, 1e-9).unwrap();
        let sys = assemble_interior_system(&m, &fixed, &w).unwrap();
        let opts = SolverOptions::default();
        for rhs in [&sys.rhs_u, &sys.rhs_v] {
            let cg = conjugate_gradient(&sys.matrix, rhs, opts.tolerance, 10 * sys.interior.len().max(1)).unwrap();
            let mut ax = vec![0.0; rhs.len()];
            sys.matrix.mul_vec(&cg.x, &mut ax);
            let res = ax.iter().zip(rhs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(res <= 1e-8, "residual {res}");
        }
    }

    #[test]
    fn uniform_unwrap_obeys_maximum_principle(n in 3usize..14, seed in any::<u64>()) {
        let m = grid(n, seed);
        let fixed = random_boundary(&m, seed ^ 2);
        let opts = SolverOptions { weights: LaplacianWeights::Uniform, ..SolverOptions::default() };
        let out = harmonic_unwrap(&m, &fixed, &opts).unwrap();
        for c in 0..2 {
            let b: Vec<f64> = fixed.iter().flatten().map(|uv| uv[c]).collect();
            let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|uv| uv[c] >= lo - 1e-12 && uv[c] <= hi + 1e-12));
        }
    }

    #[test]
    fn batch_composition_and_label_hygiene(m in 1usize..24, p in 0.0..=1.0f64, seed in any::<u64>()) {
        let (sim, real) = pools(seed);
        let spec = MixSpec { batch_size: m, sim_fraction: p, crop_size: 8, seed, ..MixSpec::default() };
        let mut a = BatchStream::new(&sim, &real, spec.clone()).unwrap();
        let mut b = BatchStream::new(&sim, &real, spec).unwrap();
        for _ in 0..3 {
            let x = a.next_batch().unwrap();
            prop_assert_eq!(&x, &b.next_batch().unwrap());
            prop_assert_eq!(x.len(), m);
            prop_assert_eq!(x.sim_count(), (p * m as f64).round() as usize);
            for s in &x.samples {
                let real = s.domain == Domain::Real;
                prop_assert_eq!(real, s.part.is_none() && s.uv.is_none() && s.normal.is_none());
                prop_assert_eq!(real, !s.available.uv && !s.available.normal && !s.available.parts);
                if let Some(uv) = &s.uv {
                    prop_assert!(uv.iter().flatten().all(|v| (-0.5..=0.5).contains(v)));
                }
            }
        }
    }

    #[test]
    fn metric_ranges_and_identities(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let v = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let region: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen()).collect();
        let uv_a: Vec<[f32; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        let uv_b: Vec<[f32; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        prop_assert!((0.0..=2f64.sqrt()).contains(&uv_l2(&uv_a, &uv_b, &region).unwrap()));
        prop_assert_eq!(uv_l2(&uv_a, &uv_a, &region).unwrap(), 0.0);

        let unit = |rng: &mut ChaCha8Rng| {
            let v = [rng.gen_range(-1.0..1.0f32), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
            v.map(|x| x / l)
        };
        let n_a: Vec<[f32; 3]> = (0..n).map(|_| unit(&mut rng)).collect();
        let n_b: Vec<[f32; 3]> = (0..n).map(|_| unit(&mut rng)).collect();
        prop_assert!((0.0..=180.0).contains(&add_normals(&n_a, &n_b, &region).unwrap()));
        prop_assert_eq!(add_normals(&n_a, &n_a, &region).unwrap(), 0.0);

        let mut gt = keypoints(&mut rng);
        gt[0].visibility = Visibility::Visible;
        let pred: [[f64; 2]; KEYPOINT_COUNT] = std::array::from_fn(|_| [rng.gen_range(-10.0..74.0), rng.gen_range(-10.0..74.0)]);
        let exact: [[f64; 2]; KEYPOINT_COUNT] = std::array::from_fn(|k| [gt[k].x, gt[k].y]);
        let area = rng.gen_range(1.0..4000.0);
        let falloff = densesim::metrics::default_falloff();
        prop_assert!((0.0..=1.0).contains(&oks(&pred, &gt, area, &falloff).unwrap()));
        prop_assert_eq!(oks(&exact, &gt, area, &falloff).unwrap(), 1.0);
    }

    #[test]
    fn batchnorm_eval_ignores_batch_composition(c in 1usize..5, others in 1usize..4, seed in any::<u64>()) {
        let mut bn = BatchNorm::<f64>::new(c);
        for k in 0..3 {
            bn.forward(&tensor(4, c, seed.wrapping_add(k)), true).unwrap();
        }
        let x = tensor(1, c, seed ^ 7);
        let rest = tensor(others, c, seed ^ 9);
        let alone = bn.forward(&x, false).unwrap();
        let both = bn.forward(&Tensor4::concat_batch(&[&x, &rest]).unwrap(), false).unwrap();
        prop_assert_eq!(&alone.data[..], &both.data[..alone.data.len()]);
    }

    #[test]
    fn hard_bmn_masks_the_other_branch(c in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
        let s = tensor(n, c, seed);
        let r = tensor(n, c, seed ^ 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n).map(|_| if rng.gen() { 1.0 } else { 0.0 }).collect();
        let m = BatchMixtureNorm::masked(&s, &r, &z).unwrap();
        let per = 9 * 2 * c;
        for i in 0..n {
            for p in 0..9 {
                let base = i * per + p * 2 * c;
                let (sv, rv) = (&m.data[base..base + c], &m.data[base + c..base + 2 * c]);
                let zero = if z[i] == 1.0 { rv } else { sv };
                prop_assert!(zero.iter().all(|&v| v == 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gps_lies_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64;
        let parts = atlas().part_count as u8;
        let label = |rng: &mut ChaCha8Rng| -> (Vec<u8>, Vec<[f32; 2]>) {
            let part = (0..n).map(|_| if rng.gen_bool(0.1) { BACKGROUND_PART } else { rng.gen_range(0..parts) }).collect();
            (part, (0..n).map(|_| [rng.gen(), rng.gen()]).collect())
        };
        let (pp, pu) = label(&mut rng);
        let (mut gp, gu) = label(&mut rng);
        gp[0] = 0;
        let region = vec![true; n];
        let t = atlas_geodesics();
        let pred = DenseLabels { part: &pp, uv: &pu };
        let truth = DenseLabels { part: &gp, uv: &gu };
        let v = gps(pred, truth, &region, 8, t, 0.255, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(gps(truth, truth, &region, 8, t, 0.255, 1).unwrap(), 1.0);
    }
}
