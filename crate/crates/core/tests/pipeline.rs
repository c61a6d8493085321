use voxreg_core::features::mind_ssc;
use voxreg_core::field::upsample_field;
use voxreg_core::synth::make_pair_with_field;
use voxreg_core::{
    register, AdamConfig, ConvexConfig, DisplacementField, FeatureSource, FeatureVolume,
    GridGeometry, MindConfig, PcaConfig, RegistrationConfig, Resolution, StridePolicy, SynthConfig,
    Volume3,
};

fn textured(n: usize, seed: u64) -> Volume3 {
    let g = GridGeometry::isotropic([n, n, n]).unwrap();
    let cfg = SynthConfig {
        seed,
        ..Default::default()
    };
    make_pair_with_field(&g, &cfg, DisplacementField::zeros(g, Resolution::Full))
        .unwrap()
        .fixed
}

fn small_config() -> RegistrationConfig {
    RegistrationConfig {
        convex: ConvexConfig {
            grid_stride: 4,
            search_radius: 5,
            ..Default::default()
        },
        adam: AdamConfig {
            iterations: 20,
            learning_rate: 0.2,
            lambda_reg: 0.05,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn shift_recovered_with_pullback_sign() {
    let fixed = textured(40, 2);
    let g = *fixed.geometry();
    // moving(y) = fixed(y - 4 e_x): fixed content appears 4 voxels further along x
    let moving = Volume3::from_fn(g, |i, j, k| fixed.get(i.saturating_sub(4), j, k)).unwrap();
    let res = register(&fixed, &moving, &small_config(), None).unwrap();
    let m = 12;
    let mut err = 0.0;
    let mut n = 0;
    for k in m..40 - m {
        for j in m..40 - m {
            for i in m..40 - m {
                let u = res.displacement.vector(g.index(i, j, k));
                err +=
                    ((u[0] as f64 - 4.0).powi(2) + (u[1] as f64).powi(2) + (u[2] as f64).powi(2))
                        .sqrt();
                n += 1;
            }
        }
    }
    let err = err / n as f64;
    assert!(err < 0.5, "interior error {err}");
}

#[test]
fn identity_pair_warps_to_itself() {
    let v = textured(24, 4);
    let res = register(&v, &v, &small_config(), None).unwrap();
    assert!(res.displacement.mean_norm() < 0.05);
    assert!(res
        .warped_moving
        .data()
        .iter()
        .zip(v.data())
        .all(|(a, b)| (a - b).abs() <= 1e-4));
    assert_eq!(res.displacement.geometry(), v.geometry());
}

#[test]
fn zero_iterations_return_convex_field() {
    let fixed = textured(24, 5);
    let g = *fixed.geometry();
    let moving = Volume3::from_fn(g, |i, j, k| fixed.get(i, j.saturating_sub(2), k)).unwrap();
    let mut cfg = small_config();
    cfg.adam.iterations = 0;
    let res = register(&fixed, &moving, &cfg, None).unwrap();
    let expected = upsample_field(&res.convex_field, &g).unwrap();
    assert_eq!(res.displacement, expected);
    assert_eq!(res.loss_trace.len(), 1);
}

#[test]
fn deterministic() {
    let a = textured(24, 6);
    let b = Volume3::from_fn(*a.geometry(), |i, j, k| a.get(i.saturating_sub(1), j, k)).unwrap();
    let cfg = small_config();
    let r1 = register(&a, &b, &cfg, None).unwrap();
    let r2 = register(&a, &b, &cfg, None).unwrap();
    assert_eq!(r1.displacement, r2.displacement);
    assert_eq!(r1.loss_trace, r2.loss_trace);
}

#[test]
fn geometry_mismatch_rejected() {
    let a = textured(16, 1);
    let b = textured(18, 1);
    assert!(register(&a, &b, &small_config(), None).is_err());
}

/// Averages stride-1 features over `s`-cubes, like a patch tokenizer.
fn tokenize(fv: &FeatureVolume, s: usize) -> FeatureVolume {
    let d = fv.geometry().dims();
    let td = d.map(|n| n / s);
    let tg = GridGeometry::new(td, [s as f32; 3]).unwrap();
    let planes = (0..fv.channels())
        .map(|c| {
            let plane = fv.plane(c);
            (0..tg.len())
                .map(|t| {
                    let p = tg.coords(t);
                    let mut acc = 0.0;
                    for z in 0..s {
                        for y in 0..s {
                            for x in 0..s {
                                acc += plane[fv.geometry().index(
                                    p[0] * s + x,
                                    p[1] * s + y,
                                    p[2] * s + z,
                                )];
                            }
                        }
                    }
                    acc / (s * s * s) as f32
                })
                .collect()
        })
        .collect();
    FeatureVolume::from_planes(tg, s, planes).unwrap()
}

#[test]
fn external_strided_features_both_policies() {
    let fixed = textured(32, 8);
    let g = *fixed.geometry();
    let moving = Volume3::from_fn(g, |i, j, k| fixed.get(i.saturating_sub(2), j, k)).unwrap();
    let mind = MindConfig::default();
    let ff = tokenize(&mind_ssc(&fixed, &mind).unwrap(), 2);
    let mf = tokenize(&mind_ssc(&moving, &mind).unwrap(), 2);
    for policy in [StridePolicy::UpsampleToVoxel, StridePolicy::Native] {
        let mut cfg = small_config();
        cfg.feature_source = FeatureSource::External;
        cfg.feature_stride_policy = policy;
        if policy == StridePolicy::Native {
            // token grid is half the size: shrink search and grid accordingly
            cfg.convex.grid_stride = 2;
            cfg.convex.search_radius = 3;
        }
        let res = register(&fixed, &moving, &cfg, Some((&ff, &mf))).unwrap();
        assert_eq!(res.displacement.geometry(), &g);
        let c = g.index(16, 16, 16);
        let u = res.displacement.vector(c);
        assert!(
            (u[0] - 2.0).abs() < 0.75,
            "{policy:?}: centre displacement {u:?}"
        );
    }
}

#[test]
fn pca_runs_only_when_channels_exceed_k() {
    let v = textured(20, 9);
    let mut cfg = small_config();
    let res = register(&v, &v, &cfg, None).unwrap();
    assert!(!res.pca_applied, "12 MIND channels with k=24 must skip PCA");
    cfg.pca = PcaConfig {
        components: 4,
        oversampling: 4,
        ..Default::default()
    };
    let res = register(&v, &v, &cfg, None).unwrap();
    assert!(res.pca_applied);
    assert!(res.displacement.mean_norm() < 0.05);
}

#[test]
fn external_channel_mismatch() {
    let v = textured(16, 3);
    let g = *v.geometry();
    let a = FeatureVolume::new(g, 2, 1, vec![0.5; 2 * g.len()]).unwrap();
    let b = FeatureVolume::new(g, 3, 1, vec![0.5; 3 * g.len()]).unwrap();
    let cfg = RegistrationConfig {
        feature_source: FeatureSource::External,
        ..small_config()
    };
    assert!(matches!(
        register(&v, &v, &cfg, Some((&a, &b))),
        Err(voxreg_core::Error::ChannelMismatch { .. })
    ));
}
