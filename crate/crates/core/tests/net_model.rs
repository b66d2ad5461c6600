use bevtrack::geom::RotatedBox;
use bevtrack::net::{coder, decode, AnchorSpec, Fusion, HeadOutput, Model, ModelConfig, CLS_BIAS_INIT, CODE_LEN};
use bevtrack::tensor::Tensor;
use bevtrack::voxel::{GridSpec, InputTensor};
use bevtrack::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(fusion: Fusion, n_in: usize) -> ModelConfig {
    ModelConfig {
        n_in,
        n_out: 2,
        fusion,
        widths: [2, 3, 3, 4],
        head_width: 3,
        grid: GridSpec {
            x_range: (0.0, 12.8),
            y_range: (0.0, 6.4),
            z_range: (0.0, 0.8),
            cell: 0.4,
        },
        anchors: AnchorSpec::default(),
    }
}

fn random_input(c: &ModelConfig, seed: u64) -> InputTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &c.grid;
    InputTensor {
        occupancy: Tensor::from_fn(&[c.n_in, g.nz(), g.nx(), g.ny()], |_| f64::from(rng.gen_bool(0.2))),
    }
}

fn closed_form_params(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, taps: usize| cout * cin * taps + cout;
    let mut kernels = match c.fusion {
        Fusion::Late => c.temporal_kernels(),
        Fusion::Early => vec![],
    }
    .into_iter();
    let mut total = if c.fusion == Fusion::Early { c.n_in } else { 0 };
    let mut cin = c.grid.nz();
    for (g, n) in [2, 2, 3, 3].into_iter().enumerate() {
        for _ in 0..n {
            total += conv(cin, c.widths[g], 9 * kernels.next().unwrap_or(1));
            cin = c.widths[g];
        }
    }
    let hw = c.head_width;
    total + 2 * conv(cin, hw, 9) + conv(hw, 6, 1) + conv(hw, 6 * c.n_out * CODE_LEN, 1)
}

#[test]
fn parameter_count_matches_closed_form() {
    for fusion in [Fusion::Early, Fusion::Late] {
        for n_in in 1..=5 {
            let c = ModelConfig {
                fusion,
                n_in,
                ..ModelConfig::default()
            };
            let m = Model::new(c.clone(), 0).unwrap();
            assert_eq!(m.num_params(), closed_form_params(&c), "{fusion:?} n_in={n_in}");
        }
    }
}

#[test]
fn full_scale_feature_map_is_eighth_resolution() {
    let c = ModelConfig {
        grid: GridSpec::full_scale(),
        ..ModelConfig::default()
    };
    assert_eq!(c.feature_dims(), (90, 50));
    assert_eq!(c.build_anchors().unwrap().len(), 6 * 90 * 50);
}

#[test]
fn late_fusion_rejects_long_histories() {
    let c = ModelConfig {
        n_in: 6,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::new(c, 0), Err(Error::Config(_))));
}

#[test]
fn empty_input_gives_the_bias_prior() {
    for fusion in [Fusion::Early, Fusion::Late] {
        let c = micro(fusion, 3);
        let m = Model::new(c.clone(), 1).unwrap();
        let g = &c.grid;
        let out = m
            .predict(&InputTensor {
                occupancy: Tensor::zeros(&[3, g.nz(), g.nx(), g.ny()]),
            })
            .unwrap();
        let prior = 1.0 / (1.0 + (-CLS_BIAS_INIT).exp());
        assert_eq!(out.cls.shape(), &[6, 4, 2]);
        assert!(out.cls.data().iter().all(|&p| (p - prior).abs() < 1e-15));
        assert!(out.reg.data().iter().all(|&r| r == 0.0));
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let c = micro(Fusion::Late, 3);
    let m = Model::new(c, 0).unwrap();
    let bad = InputTensor {
        occupancy: Tensor::zeros(&[2, 2, 32, 16]),
    };
    assert!(matches!(m.predict(&bad), Err(Error::Shape { .. })));
}

#[test]
fn forward_is_deterministic() {
    let c = micro(Fusion::Late, 3);
    let x = random_input(&c, 5);
    let a = Model::new(c.clone(), 9).unwrap().predict(&x).unwrap();
    let b = Model::new(c, 9).unwrap().predict(&x).unwrap();
    assert_eq!(a.cls.data(), b.cls.data());
    assert_eq!(a.reg.data(), b.reg.data());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = std::env::temp_dir().join(format!("bevtrack-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    let c = micro(Fusion::Late, 3);
    let m = Model::new(c.clone(), 4).unwrap();
    m.save(&path).unwrap();
    let back = Model::load(&path, Some(&c)).unwrap();
    let x = random_input(&c, 2);
    assert_eq!(m.predict(&x).unwrap().reg.data(), back.predict(&x).unwrap().reg.data());
    let other = micro(Fusion::Early, 3);
    assert!(Model::load(&path, Some(&other)).is_err());
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(Model::load(&path, None), Err(Error::Checkpoint(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn decode_recovers_encoded_boxes() {
    let c = micro(Fusion::Late, 3);
    let anchors = c.build_anchors().unwrap();
    let (fi, fj) = c.feature_dims();
    let mut cls = Tensor::zeros(&[6, fi, fj]);
    let mut reg = Tensor::zeros(&[6, c.n_out, CODE_LEN, fi, fj]);
    let target = [
        RotatedBox::new(3.0, 2.5, 1.8, 4.6, 0.7).unwrap(),
        RotatedBox::new(3.4, 2.9, 1.8, 4.6, 0.75).unwrap(),
    ];
    let (k, i, j) = (1, 0, 1);
    let flat = anchors.flat(k, i, j);
    cls.data_mut()[flat] = 0.97;
    for (t, b) in target.iter().enumerate() {
        let code = coder::encode(anchors.get(flat), b);
        for (ci, v) in code.iter().enumerate() {
            reg.set(&[k, t, ci, i, j], *v);
        }
    }
    let dets = decode(&HeadOutput { cls, reg }, &anchors, 0.5, 0.1);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].anchor, flat);
    for (got, want) in dets[0].boxes.iter().zip(&target) {
        for (a, b) in [
            (got.cx, want.cx),
            (got.cy, want.cy),
            (got.w, want.w),
            (got.h, want.h),
            (got.theta, want.theta),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_applies_nms_and_threshold() {
    let c = micro(Fusion::Late, 3);
    let anchors = c.build_anchors().unwrap();
    let (fi, fj) = c.feature_dims();
    let mut cls = Tensor::zeros(&[6, fi, fj]);
    // the 1:1 and 8x8 anchors at one location overlap heavily
    cls.data_mut()[anchors.flat(0, 0, 0)] = 0.9;
    cls.data_mut()[anchors.flat(5, 0, 0)] = 0.8;
    cls.data_mut()[anchors.flat(0, 3, 1)] = 0.3;
    let reg = Tensor::zeros(&[6, c.n_out, CODE_LEN, fi, fj]);
    let out = HeadOutput { cls, reg };
    let dets = decode(&out, &anchors, 0.5, 0.3);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].score, 0.9);
    assert_eq!(decode(&out, &anchors, 0.5, 0.9).len(), 2);
}
