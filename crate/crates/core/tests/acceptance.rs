//! The acceptance gate. Every test checks one end-to-end contract and prints
//! a single [PASS]/[FAIL] line with the measured figure, so a full run reads
//! as a checklist. Heavy fixtures (trained models) are built once per binary
//! and shared.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use seqsplat::autodiff::{grad_check, Var};
use seqsplat::decoder::{
    gumbel_noise, DecoderVars, GaussianVars, RotMode, ROT_CLASSES,
};
use seqsplat::geometry::{mat_vec, CameraView, Vec3, DEFAULT_FOV_Y_DEG, ORBIT_RADIUS};
use seqsplat::loss::{
    composite_loss, mask_mse, opacity_reg, perceptual, rgb_mse, LossWeights, Perceptual,
    ViewTarget,
};
use seqsplat::mesh::TsdfVolume;
use seqsplat::model::{forward, load_checkpoint, ModelConfig, ParamStore};
use seqsplat::rng::Stream;
use seqsplat::splat::{
    render_images, render_reference, render_tiled, GaussianSet, WHITE,
};
use seqsplat::ssm::{mamba_block, materialized_scan, selective_scan, BlockVars};
use seqsplat::tensor::Tensor;
use seqsplat::tokenizer::patch_embed;
use seqsplat::train::{generate_scene, psnr, sample_scene_views, train, TrainConfig};

const TILE: usize = 16;

fn verdict(name: &str, ok: bool, detail: &str) {
    if ok {
        eprintln!("[PASS] {name}: {detail}");
    } else {
        eprintln!("[FAIL] {name}: {detail}");
        panic!("{name}: {detail}");
    }
}

fn rand_tensor(seed: u64, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let s = Stream::new(seed, "acceptance");
    let len: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|i| s.normal_at(i as u64) * scale).collect(),
    )
}

/// Dots a tracked value against fixed random weights, so every output
/// coordinate influences the scalar differently.
fn pin<'t>(v: &Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = rand_tensor(seed, v.shape().to_vec(), 1.0);
    v.mul(&Var::constant(w)).sum()
}

// ---------------------------------------------------------------- flops ---

#[test]
fn analytic_flops_table_is_exact_and_fast() {
    let started = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_seqsplat"))
        .arg("bench-flops")
        .output()
        .expect("binary runs");
    let elapsed = started.elapsed();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let want: [(usize, f64, f64); 6] = [
        (1024, 2.15, 0.07),
        (2048, 6.44, 0.13),
        (4096, 21.47, 0.27),
        (8192, 77.31, 0.54),
        (16384, 292.06, 1.07),
        (32768, 1133.87, 2.15),
    ];
    let mut max_err: f64 = 0.0;
    for (length, attn, ssm) in want {
        let row = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(&length.to_string()))
            .unwrap_or_else(|| panic!("row for {length} missing:\n{text}"));
        let cols: Vec<f64> = row
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        max_err = max_err.max((cols[0] - attn).abs()).max((cols[1] - ssm).abs());
    }
    verdict(
        "flops table",
        max_err <= 0.01 && elapsed.as_secs_f64() < 1.0,
        &format!(
            "all 12 entries within {max_err:.4} GFLOPs of the published table in {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------------- gradients ---

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, report: seqsplat::autodiff::GradCheckReport| {
        assert!(report.passed(), "{name}: {report}");
        worst = worst.max(report.max_rel_err);
    };

    // patch-embedding convolution: 4x4 fused image, 2x2 patches
    let inputs = vec![
        rand_tensor(10, vec![16, 9], 0.5),
        rand_tensor(11, vec![36, 3], 0.3),
        rand_tensor(12, vec![3], 0.2),
    ];
    check(
        "patch embed",
        grad_check(
            &inputs,
            &|_t, vs| pin(&patch_embed(&vs[0], 4, 4, 2, &vs[1], &vs[2]).unwrap(), 100),
            1e-4,
            1e-4,
        ),
    );

    // one full state-space block: T=4 tokens, 3 channels, E=4, N=2, rank 2
    let inputs = vec![
        rand_tensor(20, vec![4, 3], 0.5),
        rand_tensor(21, vec![3], 0.1).map(|v| v + 1.0),
        rand_tensor(22, vec![3, 8], 0.4),
        rand_tensor(23, vec![4, 4], 0.3),
        rand_tensor(24, vec![4], 0.2),
        rand_tensor(25, vec![4, 6], 0.4),
        rand_tensor(26, vec![2, 4], 0.4),
        rand_tensor(27, vec![4], 0.3),
        rand_tensor(28, vec![4, 2], 0.3),
        rand_tensor(29, vec![4], 0.5),
        rand_tensor(30, vec![4, 3], 0.4),
    ];
    check(
        "state-space block",
        grad_check(
            &inputs,
            &|_t, vs| {
                let p = BlockVars {
                    norm_w: vs[1].clone(),
                    in_proj: vs[2].clone(),
                    conv_w: vs[3].clone(),
                    conv_b: vs[4].clone(),
                    x_proj: vs[5].clone(),
                    dt_w: vs[6].clone(),
                    dt_b: vs[7].clone(),
                    a_log: vs[8].clone(),
                    d_skip: vs[9].clone(),
                    out_proj: vs[10].clone(),
                    n_state: 2,
                    dt_rank: 2,
                };
                pin(&mamba_block(&vs[0], &p).unwrap(), 101)
            },
            1e-4,
            1e-4,
        ),
    );

    // every decoder head at once, through the full constrained decode with
    // frozen gumbel noise on the soft rotation path
    let noise: Tensor<f64> = gumbel_noise(&Stream::new(5, "acceptance-gumbel"), 3);
    let inputs = vec![
        rand_tensor(40, vec![3, 4], 0.6),
        rand_tensor(41, vec![4, 16], 0.4),
        rand_tensor(42, vec![16], 0.2),
        rand_tensor(43, vec![16, 4], 0.4),
        rand_tensor(44, vec![4], 0.2),
        rand_tensor(45, vec![4, 12], 0.5),
        rand_tensor(46, vec![12], 0.3),
        rand_tensor(47, vec![4, 2], 0.5),
        rand_tensor(48, vec![2], 0.3),
        rand_tensor(49, vec![4, 1], 0.5),
        rand_tensor(50, vec![1], 0.3),
        rand_tensor(51, vec![4, 3], 0.5),
        rand_tensor(52, vec![3], 0.3),
        rand_tensor(53, vec![4, ROT_CLASSES], 0.4),
        rand_tensor(54, vec![ROT_CLASSES], 0.2),
    ];
    check(
        "decoder heads",
        grad_check(
            &inputs,
            &|_t, vs| {
                let p = DecoderVars {
                    mlp_w1: vs[1].clone(),
                    mlp_b1: vs[2].clone(),
                    mlp_w2: vs[3].clone(),
                    mlp_b2: vs[4].clone(),
                    pos_w: vs[5].clone(),
                    pos_b: vs[6].clone(),
                    scale_w: vs[7].clone(),
                    scale_b: vs[8].clone(),
                    opacity_w: vs[9].clone(),
                    opacity_b: vs[10].clone(),
                    color_w: vs[11].clone(),
                    color_b: vs[12].clone(),
                    rot_w: vs[13].clone(),
                    rot_b: vs[14].clone(),
                    n_bins: 4,
                    s_base: 0.01,
                    s_max: 0.4,
                    disk: true,
                    straight_through: false,
                };
                let g = seqsplat::decoder::decode_gaussians(
                    &vs[0],
                    &p,
                    RotMode::Train { tau: 0.8, noise: &noise },
                )
                .unwrap();
                pin(&g.mu, 102)
                    .add(&pin(&g.scale, 103))
                    .add(&pin(&g.color, 104))
                    .add(&pin(&g.opacity, 105))
                    .add(&pin(&g.rot, 106))
            },
            1e-4,
            1e-4,
        ),
    );

    // rasterizer, volumetric and disk, on an 8x8 view
    let splats = |disk: bool| {
        vec![
            Tensor::from_vec(
                vec![3, 3],
                vec![0.1, 0.05, 0.3, -0.1, 0.0, 0.0, 0.05, -0.1, -0.3],
            ),
            Tensor::from_vec(
                vec![3, if disk { 2 } else { 3 }],
                if disk {
                    vec![0.12, 0.1, 0.1, 0.14, 0.09, 0.12]
                } else {
                    vec![0.12, 0.1, 0.08, 0.1, 0.14, 0.1, 0.09, 0.1, 0.12]
                },
            ),
            Tensor::from_vec(vec![3, 3], vec![0.9, 0.2, 0.1, 0.2, 0.8, 0.3, 0.1, 0.2, 0.9]),
            Tensor::from_vec(vec![3, 1], vec![0.8, 0.6, 0.7]),
            Tensor::from_vec(
                vec![3, 4],
                vec![
                    1.0, 0.0, 0.0, 0.0, 0.9486832980505138, 0.31622776601683794, 0.0, 0.0,
                    0.8944271909999159, 0.0, 0.4472135954999579, 0.0,
                ],
            ),
            Tensor::from_vec(vec![3], vec![0.2, 0.5, 0.8]),
        ]
    };
    for disk in [false, true] {
        let view = CameraView::orbit(12.0, 45.0, ORBIT_RADIUS, DEFAULT_FOV_Y_DEG, 8);
        check(
            if disk { "rasterizer (disks)" } else { "rasterizer (volumetric)" },
            grad_check(
                &splats(disk),
                &move |_t, vs| {
                    let g = GaussianVars {
                        mu: vs[0].clone(),
                        scale: vs[1].clone(),
                        color: vs[2].clone(),
                        opacity: vs[3].clone(),
                        rot: vs[4].normalize_rows(1e-12),
                        disk,
                    };
                    let img = render_images(&g, &view, &vs[5]).unwrap();
                    img.mul(&img).sum()
                },
                1e-4,
                1e-3,
            ),
        );
    }

    // loss terms over a 4x4 view
    let gt_rgb = rand_tensor(60, vec![16, 3], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let gt_alpha = rand_tensor(61, vec![16, 1], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let inputs = vec![
        rand_tensor(62, vec![16, 3], 0.2).map(|v| v + 0.5),
        rand_tensor(63, vec![16, 1], 0.2).map(|v| v + 0.5),
        rand_tensor(64, vec![5, 1], 0.1).map(|v| v + 0.5),
    ];
    {
        let (g0, g1) = (gt_rgb.clone(), gt_alpha.clone());
        check(
            "pixel, mask, and opacity losses",
            grad_check(
                &inputs,
                &move |_t, vs| {
                    rgb_mse(&vs[0], &g0)
                        .unwrap()
                        .add(&mask_mse(&vs[1], &g1).unwrap())
                        .add(&opacity_reg(&vs[2]))
                },
                1e-4,
                1e-4,
            ),
        );
    }
    {
        let g0 = gt_rgb.clone();
        check(
            "perceptual loss",
            grad_check(
                &inputs[..1],
                &move |_t, vs| {
                    perceptual(&vs[0], &g0, 4, 4, Perceptual::RandomFeatures { resolution: 8 })
                        .unwrap()
                },
                1e-4,
                1e-4,
            ),
        );
    }
    {
        let target = ViewTarget {
            height: 4,
            width: 4,
            rgb: gt_rgb.clone(),
            alpha: gt_alpha.clone(),
        };
        let render = rand_tensor(65, vec![16, 4], 0.2).map(|v| v + 0.5);
        let opacity = rand_tensor(66, vec![5, 1], 0.1).map(|v| v + 0.5);
        check(
            "composite objective",
            grad_check(
                &[render, opacity],
                &move |_t, vs| {
                    composite_loss(
                        &[vs[0].clone()],
                        std::slice::from_ref(&target),
                        &vs[1],
                        &LossWeights::default(),
                        Perceptual::Off,
                    )
                    .unwrap()
                    .0
                },
                1e-4,
                1e-4,
            ),
        );
    }

    let elapsed = started.elapsed();
    verdict(
        "gradient suite",
        elapsed.as_secs_f64() < 300.0,
        &format!(
            "tokenizer conv, state-space block, decoder heads, rasterizer, and losses \
             all match finite differences (worst rel err {worst:.2e}) in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------------ scan oracle ---

#[test]
fn selective_scan_matches_the_materialized_oracle_and_is_causal() {
    let s = Stream::new(9, "acceptance-scan");
    let mut max_err: f64 = 0.0;
    for case in 0..100u64 {
        let g = s.substream(case);
        let t_len = 1 + (g.u64_at(0) % 16) as usize;
        let e_dim = 1 + (g.u64_at(1) % 6) as usize;
        let n_state = 1 + (g.u64_at(2) % 4) as usize;
        let fill = |tag: u64, shape: Vec<usize>, scale: f64| -> Tensor<f64> {
            let h = g.substream(10 + tag);
            let len: usize = shape.iter().product();
            Tensor::from_vec(
                shape,
                (0..len).map(|i| h.normal_at(i as u64) * scale).collect(),
            )
        };
        let u = fill(0, vec![t_len, e_dim], 1.0);
        let delta = fill(1, vec![t_len, e_dim], 0.2).map(|v| v.abs() + 0.01);
        let a = fill(2, vec![e_dim, n_state], 0.5);
        let b = fill(3, vec![t_len, n_state], 1.0);
        let c = fill(4, vec![t_len, n_state], 1.0);
        let d = fill(5, vec![e_dim], 0.5);
        let got = selective_scan(
            &Var::constant(u.clone()),
            &Var::constant(delta.clone()),
            &Var::constant(a.clone()),
            &Var::constant(b.clone()),
            &Var::constant(c.clone()),
            &Var::constant(d.clone()),
        )
        .unwrap();
        let want = materialized_scan(&u, &delta, &a, &b, &c, &d).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            max_err = max_err.max((x - y).abs());
        }
    }
    assert!(max_err <= 1e-6, "scan oracle max err {max_err:.3e}");

    let (t_len, e_dim, n_state) = (64usize, 4usize, 2usize);
    let g = Stream::new(10, "acceptance-causal");
    let fill = |tag: u64, shape: Vec<usize>, scale: f64| -> Tensor<f64> {
        let h = g.substream(tag);
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|i| h.normal_at(i as u64) * scale).collect(),
        )
    };
    let u = fill(0, vec![t_len, e_dim], 1.0);
    let delta = fill(1, vec![t_len, e_dim], 0.2).map(|v| v.abs() + 0.01);
    let a = fill(2, vec![e_dim, n_state], 0.5);
    let b = fill(3, vec![t_len, n_state], 1.0);
    let c = fill(4, vec![t_len, n_state], 1.0);
    let d = fill(5, vec![e_dim], 0.5);
    let run = |u: &Tensor<f64>| {
        selective_scan(
            &Var::constant(u.clone()),
            &Var::constant(delta.clone()),
            &Var::constant(a.clone()),
            &Var::constant(b.clone()),
            &Var::constant(c.clone()),
            &Var::constant(d.clone()),
        )
        .unwrap()
        .value()
        .clone()
    };
    let base = run(&u);
    for trial in 0..100u64 {
        let h = g.substream(100 + trial);
        let t_hit = 1 + (h.u64_at(0) % (t_len as u64 - 1)) as usize;
        let e_hit = (h.u64_at(1) % e_dim as u64) as usize;
        let mut bumped = u.data().to_vec();
        bumped[t_hit * e_dim + e_hit] += 0.731;
        let out = run(&Tensor::from_vec(vec![t_len, e_dim], bumped));
        assert_eq!(
            &out.data()[..t_hit * e_dim],
            &base.data()[..t_hit * e_dim],
            "outputs before t={t_hit} must be untouched"
        );
        assert_ne!(
            &out.data()[t_hit * e_dim..(t_hit + 1) * e_dim],
            &base.data()[t_hit * e_dim..(t_hit + 1) * e_dim],
            "output at t={t_hit} must respond"
        );
    }
    verdict(
        "scan oracle",
        true,
        &format!(
            "100 random scans within {max_err:.2e} of the materialized form; \
             causality exact on 100 perturbations"
        ),
    );
}

// ---------------------------------------------------------- raster oracle ---

#[test]
fn tiled_rendering_matches_the_reference_on_random_scenes() {
    let s = Stream::new(11, "acceptance-raster");
    let mut max_err: f64 = 0.0;
    for case in 0..10u64 {
        let k = 1 + (s.substream(case).u64_at(0) % 512) as usize;
        let gs: GaussianSet<f64> = generate_scene(s.substream(case).u64_at(1), k).unwrap();
        let view = CameraView::orbit(
            5.0 + 3.0 * case as f64,
            36.0 * case as f64,
            ORBIT_RADIUS,
            DEFAULT_FOV_Y_DEG,
            64,
        );
        let a = render_reference(&gs, &view, WHITE).unwrap();
        let b = render_tiled(&gs, &view, WHITE, TILE).unwrap();
        for (x, y) in a.rgb.data().iter().zip(b.rgb.data()) {
            max_err = max_err.max((x - y).abs());
        }
        for (x, y) in a.alpha.data().iter().zip(b.alpha.data()) {
            max_err = max_err.max((x - y).abs());
        }
        for (x, y) in a.depth.data().iter().zip(b.depth.data()) {
            max_err = max_err.max((x - y).abs());
        }
    }
    verdict(
        "raster oracle",
        max_err <= 1e-5,
        &format!("10 scenes, K <= 512, 64x64: tiled vs reference max err {max_err:.2e}"),
    );
}

// ----------------------------------------------------------- shape suite ---

#[test]
fn paper_scale_shapes_and_decoder_ranges_hold() {
    let started = Instant::now();
    let cfg = ModelConfig::paper();
    assert_eq!(cfg.seq_len(), 16384, "token count at 448^2, patch 14, 4 views");
    let store = ParamStore::<f32>::init(cfg.clone(), 7).unwrap();
    let model = store.bind_constant();

    let poses = seqsplat::geometry::sample_orbit_cameras(
        3,
        cfg.n_views,
        0,
        cfg.image_size,
        DEFAULT_FOV_Y_DEG,
    );
    let n = cfg.image_size * cfg.image_size;
    let images: Vec<Tensor<f32>> = (0..cfg.n_views)
        .map(|v| {
            Tensor::from_vec(
                vec![cfg.image_size, cfg.image_size, 3],
                (0..n * 3)
                    .map(|i| 0.05 + 0.9 * (((i * 31 + v * 7) % 101) as f32 / 100.0))
                    .collect(),
            )
        })
        .collect();
    let g = forward(&model, &cfg, &images, &poses.input, RotMode::Infer).unwrap();
    let set = g.snapshot();
    assert_eq!(set.count(), 16384, "one primitive per token");
    set.validate().unwrap();

    // adversarial features three orders of magnitude beyond training range
    let rows = 64usize;
    let c = cfg.c_model;
    let mut adv = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for j in 0..c {
            let v = match (r + j) % 4 {
                0 => 1e3,
                1 => -1e3,
                2 => 999.25,
                _ => -0.5,
            };
            adv.push(v as f32);
        }
    }
    let seq = Var::constant(Tensor::from_vec(vec![rows, c], adv));
    let noise = gumbel_noise(&Stream::new(8, "acceptance-adv"), rows);
    for mode in [RotMode::Infer, RotMode::Train { tau: 0.5, noise: &noise }] {
        let g = seqsplat::decoder::decode_gaussians(&seq, &model.decoder, mode).unwrap();
        let set = g.snapshot();
        set.validate().unwrap();
        for &m in set.mu.data() {
            assert!((-1.0..=1.0).contains(&m), "center {m} outside the unit box");
        }
        for &sc in set.scale.data() {
            assert!(sc > 0.0 && sc.is_finite(), "scale {sc} not positive finite");
        }
        for &o in set.opacity.data() {
            assert!(o > 0.0 && o < 1.0, "opacity {o} outside (0,1)");
        }
        for r in 0..set.count() {
            let q = &set.rot.data()[r * 4..(r + 1) * 4];
            let norm: f32 = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "quaternion norm {norm}");
        }
    }
    let elapsed = started.elapsed();
    verdict(
        "shape suite",
        elapsed.as_secs_f64() < 60.0,
        &format!(
            "16384 tokens -> 16384 constrained primitives at paper scale, \
             ranges hold under magnitude-1e3 features, in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// --------------------------------------------------------- shared fixtures ---

struct OverfitRun {
    _dir: tempfile::TempDir,
    cfg: TrainConfig,
    checkpoint: PathBuf,
    metrics: PathBuf,
    seconds: f64,
}

fn overfit_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.steps = 2000;
    cfg.batch_size = 2;
    cfg.n_novel = 2;
    cfg.k_gaussians = 6;
    cfg.n_scenes = 1;
    cfg.lr_peak = 1e-3;
    cfg.lr_floor = 1e-5;
    cfg.warmup_steps = 100;
    cfg.weights.reg = 0.0;
    cfg.augment_prob = 0.0;
    cfg.checkpoint_every = 1000;
    cfg.eval_every = 500;
    cfg.seed = 1;
    cfg
}

fn overfit_run() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = overfit_config();
        let started = Instant::now();
        let outcome = train(&cfg, dir.path(), None, None).unwrap();
        OverfitRun {
            cfg,
            checkpoint: outcome.checkpoint,
            metrics: outcome.metrics,
            seconds: started.elapsed().as_secs_f64(),
            _dir: dir,
        }
    })
}

struct SeqlenRuns {
    _dir: tempfile::TempDir,
    checkpoint_p8: PathBuf,
    psnr_p8: f64,
    psnr_p16: f64,
}

fn seqlen_config(patch: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.patch = patch;
    cfg.steps = 800;
    cfg.batch_size = 2;
    cfg.n_novel = 2;
    cfg.k_gaussians = 6;
    cfg.n_scenes = 4;
    cfg.lr_peak = 1e-3;
    cfg.lr_floor = 1e-5;
    cfg.warmup_steps = 100;
    cfg.weights.reg = 0.0;
    cfg.augment_prob = 0.0;
    cfg.checkpoint_every = 800;
    cfg.eval_every = 400;
    cfg.seed = 1;
    cfg
}

/// Mean novel-view PSNR of a checkpoint over fresh scenes never seen in
/// training.
fn heldout_psnr(checkpoint: &Path, scene_seeds: &[u64], k: usize, n_novel: usize) -> f64 {
    let ck = load_checkpoint::<f32>(checkpoint).unwrap();
    let cfg = ck.params.config;
    let model = ck.params.bind_constant();
    let mut acc = 0.0;
    let mut count = 0usize;
    for &seed in scene_seeds {
        let gt: GaussianSet<f32> = generate_scene(seed, k).unwrap();
        let sample = sample_scene_views(
            &gt,
            Stream::new(seed, "acceptance-eval").u64_at(0),
            cfg.image_size,
            cfg.n_views,
            n_novel,
        )
        .unwrap();
        let g = forward(&model, &cfg, &sample.input_images, &sample.input_cameras, RotMode::Infer)
            .unwrap();
        let set = g.snapshot();
        for (cam, target) in sample.cameras.iter().zip(&sample.targets).skip(cfg.n_views) {
            let o = render_tiled(&set, cam, WHITE, TILE).unwrap();
            acc += psnr(&o.rgb, &target.rgb).unwrap();
            count += 1;
        }
    }
    acc / count as f64
}

const HELDOUT_SCENES: [u64; 3] = [1001, 1002, 1003];

fn seqlen_runs() -> &'static SeqlenRuns {
    static RUNS: OnceLock<SeqlenRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out16 = train(&seqlen_config(16), &dir.path().join("p16"), None, None).unwrap();
        let out8 = train(&seqlen_config(8), &dir.path().join("p8"), None, None).unwrap();
        let psnr_p16 = heldout_psnr(&out16.checkpoint, &HELDOUT_SCENES, 6, 4);
        let psnr_p8 = heldout_psnr(&out8.checkpoint, &HELDOUT_SCENES, 6, 4);
        SeqlenRuns {
            _dir: dir,
            checkpoint_p8: out8.checkpoint,
            psnr_p8,
            psnr_p16,
        }
    })
}

// -------------------------------------------------------------- training ---

#[test]
fn a_single_scene_overfits_to_high_fidelity() {
    let run = overfit_run();
    let cfg = &run.cfg;

    let scene_seed = Stream::new(cfg.seed, "scenes").u64_at(0);
    let gt: GaussianSet<f32> = generate_scene(scene_seed, cfg.k_gaussians).unwrap();
    let cam_seed = Stream::new(cfg.seed, "step").substream(0).substream(0).u64_at(0);
    let sample = sample_scene_views(&gt, cam_seed, cfg.model.image_size, cfg.model.n_views, 0)
        .unwrap();

    let ck = load_checkpoint::<f32>(&run.checkpoint).unwrap();
    let model = ck.params.bind_constant();
    let g = forward(
        &model,
        &ck.params.config,
        &sample.input_images,
        &sample.input_cameras,
        RotMode::Infer,
    )
    .unwrap();
    let set = g.snapshot();
    let mut acc = 0.0;
    for (cam, target) in sample.cameras.iter().zip(&sample.targets) {
        let o = render_tiled(&set, cam, WHITE, TILE).unwrap();
        acc += psnr(&o.rgb, &target.rgb).unwrap();
    }
    let train_psnr = acc / sample.cameras.len() as f64;

    let metrics = std::fs::read_to_string(&run.metrics).unwrap();
    let losses: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), cfg.steps);
    let median = |w: &[f64]| {
        let mut v = w.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let early = median(&losses[..100]);
    let late = median(&losses[cfg.steps - 100..]);

    verdict(
        "closed-loop overfit",
        train_psnr >= 28.0 && late < early && run.seconds < 1800.0,
        &format!(
            "training-view psnr {train_psnr:.2} dB after {} steps in {:.0}s; \
             median loss {early:.4} (first 100) -> {late:.4} (last 100)",
            cfg.steps, run.seconds
        ),
    );
}

#[test]
fn longer_token_sequences_reconstruct_better() {
    let runs = seqlen_runs();
    verdict(
        "sequence-length trend",
        runs.psnr_p8 >= runs.psnr_p16 + 0.5,
        &format!(
            "held-out psnr {:.2} dB at 1024 tokens vs {:.2} dB at 256 tokens (gap {:.2})",
            runs.psnr_p8,
            runs.psnr_p16,
            runs.psnr_p8 - runs.psnr_p16
        ),
    );
}

#[test]
fn noisy_inputs_degrade_output_gracefully() {
    let runs = seqlen_runs();
    let ck = load_checkpoint::<f32>(&runs.checkpoint_p8).unwrap();
    let cfg = ck.params.config;
    let model = ck.params.bind_constant();

    let scene_seed = 777u64;
    let gt: GaussianSet<f32> = generate_scene(scene_seed, 6).unwrap();
    let sample = sample_scene_views(
        &gt,
        Stream::new(scene_seed, "acceptance-noise-views").u64_at(0),
        cfg.image_size,
        cfg.n_views,
        4,
    )
    .unwrap();

    let score = |inputs: &[Tensor<f32>]| -> (f64, bool) {
        let g = forward(&model, &cfg, inputs, &sample.input_cameras, RotMode::Infer).unwrap();
        let set = g.snapshot();
        let mut finite = set.validate().is_ok();
        let mut acc = 0.0;
        let mut count = 0usize;
        for (cam, target) in sample.cameras.iter().zip(&sample.targets).skip(cfg.n_views) {
            let o = render_tiled(&set, cam, WHITE, TILE).unwrap();
            finite &= o.rgb.data().iter().all(|v| v.is_finite());
            acc += psnr(&o.rgb, &target.rgb).unwrap();
            count += 1;
        }
        (acc / count as f64, finite)
    };

    let (clean, clean_finite) = score(&sample.input_images);
    let noise = Stream::new(scene_seed, "acceptance-noise");
    let sigma = 0.3;
    let mut perturbed = sample.input_images.clone();
    let bumped: Vec<f32> = perturbed[0]
        .data()
        .iter()
        .enumerate()
        .map(|(j, &v)| (v + (sigma * noise.normal_at(j as u64)) as f32).clamp(0.0, 1.0))
        .collect();
    perturbed[0] = Tensor::from_vec(perturbed[0].shape().to_vec(), bumped);
    let (noisy, noisy_finite) = score(&perturbed);

    let drop = (clean - noisy) / clean;
    verdict(
        "input-noise robustness",
        clean_finite && noisy_finite && noisy.is_finite() && drop < 0.5,
        &format!(
            "sigma 0.3 on view 0: psnr {clean:.2} -> {noisy:.2} dB \
             ({:.0}% drop), outputs finite",
            drop * 100.0
        ),
    );
}

// ---------------------------------------------------------------- meshing ---

fn sphere_depth(view: &CameraView, radius: f64) -> Tensor<f64> {
    let f = view.focal_px();
    let (w, h) = (view.width, view.height);
    let (cx, cy) = (w as f64 * 0.5, h as f64 * 0.5);
    let fwd = Vec3::new(
        -view.rotation[0][2],
        -view.rotation[1][2],
        -view.rotation[2][2],
    );
    let o = view.origin;
    let mut data = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let dir_cam = Vec3::new(
                (px as f64 + 0.5 - cx) / f,
                (cy - (py as f64 + 0.5)) / f,
                -1.0,
            );
            let d = mat_vec(&view.rotation, dir_cam);
            let aq = d.dot(d);
            let bq = 2.0 * o.dot(d);
            let cq = o.dot(o) - radius * radius;
            let disc = bq * bq - 4.0 * aq * cq;
            let depth = if disc <= 0.0 {
                view.far
            } else {
                let t = (-bq - disc.sqrt()) / (2.0 * aq);
                if t > 0.0 {
                    t * d.dot(fwd)
                } else {
                    view.far
                }
            };
            data.push(depth);
        }
    }
    Tensor::from_vec(vec![w * h, 1], data)
}

#[test]
fn fused_sphere_mesh_is_accurate_and_view_order_invariant() {
    let radius = 0.5;
    let views = seqsplat::geometry::orbit_ring(16, 15.0, 128, DEFAULT_FOV_Y_DEG);
    let depths: Vec<Tensor<f64>> = views.iter().map(|v| sphere_depth(v, radius)).collect();

    let fuse = |order: &[usize]| {
        let mut vol = TsdfVolume::new(64).unwrap();
        for &i in order {
            vol.integrate(&depths[i], &views[i]).unwrap();
        }
        vol.marching_cubes()
    };
    let forward_order: Vec<usize> = (0..views.len()).collect();
    let reversed: Vec<usize> = (0..views.len()).rev().collect();
    let mesh = fuse(&forward_order);
    let mesh_rev = fuse(&reversed);

    assert!(mesh.vertices.len() > 500, "sphere surface has {} vertices", mesh.vertices.len());
    let voxel = 2.0 / 63.0;
    let mut worst: f64 = 0.0;
    for v in &mesh.vertices {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        worst = worst.max((r - radius).abs());
    }

    assert_eq!(mesh.triangles, mesh_rev.triangles, "triangulation must not depend on view order");
    let mut drift: f64 = 0.0;
    for (a, b) in mesh.vertices.iter().zip(&mesh_rev.vertices) {
        for k in 0..3 {
            drift = drift.max((a[k] - b[k]).abs());
        }
    }

    verdict(
        "meshing",
        worst <= 2.0 * voxel && drift <= 1e-6,
        &format!(
            "analytic sphere at grid 64: worst radius error {:.4} ({:.2} voxels); \
             view-order drift {drift:.2e}",
            worst,
            worst / voxel
        ),
    );
}

// ----------------------------------------------------------- determinism ---

#[test]
fn training_and_reconstruction_are_bitwise_reproducible() {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        patch: 8,
        n_views: 2,
        c_model: 8,
        e_inner: 16,
        n_blocks: 1,
        n_state: 2,
        dt_rank: 2,
        n_bins: 4,
        ..ModelConfig::desk()
    };
    cfg.steps = 6;
    cfg.batch_size = 1;
    cfg.n_novel = 1;
    cfg.k_gaussians = 3;
    cfg.warmup_steps = 1;
    cfg.checkpoint_every = 3;
    cfg.eval_every = 3;
    cfg.seed = 3;

    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &dir.path().join("a"), None, None).unwrap();
    let b = train(&cfg, &dir.path().join("b"), None, None).unwrap();
    let metrics_a = std::fs::read(&a.metrics).unwrap();
    let metrics_b = std::fs::read(&b.metrics).unwrap();
    assert_eq!(metrics_a, metrics_b, "metrics must be bitwise identical");
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap(),
        "checkpoints must be bitwise identical"
    );

    let gt: GaussianSet<f32> = generate_scene(42, 3).unwrap();
    let sample = sample_scene_views(&gt, 7, 16, 2, 0).unwrap();
    let ck = load_checkpoint::<f32>(&a.checkpoint).unwrap();
    let model = ck.params.bind_constant();
    let mut plys = Vec::new();
    for name in ["one.ply", "two.ply"] {
        let g = forward(
            &model,
            &ck.params.config,
            &sample.input_images,
            &sample.input_cameras,
            RotMode::Infer,
        )
        .unwrap();
        let path = dir.path().join(name);
        seqsplat::splat::write_ply(&g.snapshot(), &path).unwrap();
        plys.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(plys[0], plys[1], "exported splats must be byte-identical");

    verdict(
        "determinism",
        true,
        "repeated training runs match bitwise; repeated reconstruction exports \
         byte-identical splat files",
    );
}
