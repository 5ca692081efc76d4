//! Acceptance criteria 1-12 of the spec. Runs as a plain binary
//! (`harness = false`): one line per criterion, non-zero exit on failure.
//!
//! `ANIMER_ACCEPTANCE_SKIP_TOY=1` skips the multi-minute criterion-10 run
//! (it is then reported as SKIP, which does not count as a pass).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use animer::bodymodel::{build_toy_template, model_forward, model_forward_graph, rest_shape, rodrigues, toy_template, BodyParams, ModelTemplate, Taxon};
use animer::camera::{keypoint_visibility, project, project_graph, rasterize, CameraSpec, VISIBILITY_TOLERANCE};
use animer::datagen::{build_dataset, cycle_consistency_filter, perturb_mask, run_attempt, Dataset, GenConfig};
use animer::losses::{
    aves_prior_graph, loss_2d_graph, loss_3d_graph, loss_con, loss_con_graph, smal_prior_graph, AvesPriorWeights, LossWeights, PredictedBody, PriorDistribution,
    SmalPriorWeights, Targets2d, Targets3d,
};
use animer::metrics::{pa_point_error, procrustes_align};
use animer::network::{moe_ffn_graph, network_forward_graph, patchify, predict, NetworkConfig, NetworkState, WeightInit};
use animer::numkernel::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use animer::trainer::{
    evaluate_model, evaluate_predictions, oracle_prediction, weighted_sample_stream, Checkpoint, DatasetInfo, Stage, TrainConfig, Trainer, TrainingData,
    WeightedSampler, TABLE_III,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = normal(rng, rows, cols);
    for r in t.data_mut().chunks_exact_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn random_axis_angle(rng: &mut ChaCha8Rng, max_angle: f64) -> [f64; 3] {
    let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let angle = rng.random_range(0.0..max_angle);
    v.map(|x| x / n * angle)
}

fn random_params(t: &ModelTemplate, rng: &mut ChaCha8Rng) -> BodyParams {
    BodyParams {
        beta: (0..t.n_betas()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        theta: (0..t.n_joints()).map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]).collect(),
        alpha: t.taxon.has_bone_scale().then(|| (0..t.n_bones()).map(|_| rng.random_range(-0.3..0.3)).collect()),
        gamma: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
    }
}

fn toy_templates() -> Vec<ModelTemplate> {
    Taxon::ALL.iter().map(|&t| toy_template(t)).collect()
}

fn gen(dir: &Path, name: &str, per_taxon: usize, seed: u64) -> Result<Dataset, String> {
    let cfg = GenConfig { name: name.into(), quadruped_count: per_taxon, avian_count: per_taxon, write_rasters: false, ..GenConfig::default() };
    build_dataset(&cfg, &toy_templates(), &dir.join(name), seed).map_err(|e| e.to_string())?;
    Dataset::load(&dir.join(name)).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

/// Sum of `v ⊙ W` with a fixed non-uniform weight, so every output
/// coordinate is probed.
fn weighted_sum(g: &mut Graph, v: Var, salt: usize) -> Var {
    let shape = g.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(shape, (0..n).map(|i| (((i + salt) * 7919) % 13) as f64 / 13.0 - 0.45).collect()).unwrap());
    let m = g.mul(v, w);
    g.sum(m)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let conf = GradCheckConfig::default();
    ensure(conf.step == 1e-6, || format!("default step is {}", conf.step))?;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, g: &Graph, out: Var, conf: &GradCheckConfig| -> Result<(), String> {
        let rep = grad_check(g, out, &BTreeMap::new(), conf).map_err(|e| e.to_string())?;
        ensure(!rep.any_non_finite(), || format!("{name}: non-finite gradient"))?;
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(rep.max_rel_error());
        Ok(())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let w = LossWeights::default();
    for i in 0..10 {
        // Eq. 1
        let mut g = Graph::new();
        let raw = g.param("z", normal(&mut rng, 6, 5));
        let z = g.l2_normalize_rows(raw);
        let l = loss_con_graph(&mut g, z, &[0, 1, 0, 2, 1, 0], w.tau).map_err(|e| e.to_string())?;
        record("loss_con", &g, l, &conf)?;
        // Eq. 4
        let taxon = Taxon::ALL[i % 2];
        let t = toy_template(taxon);
        let gt = Targets3d { params: random_params(&t, &mut rng), keypoints3d: normal(&mut rng, t.n_keypoints(), 3) };
        let p = random_params(&t, &mut rng);
        let mut g = Graph::new();
        let pred = PredictedBody {
            beta: g.param("beta", Tensor::row(p.beta.clone())),
            theta: g.param("theta", p.theta_tensor()),
            alpha: p.alpha.as_ref().map(|a| g.param("alpha", Tensor::row(a.clone()))),
            keypoints3d: g.param("kp", normal(&mut rng, t.n_keypoints(), 3)),
        };
        let l = loss_3d_graph(&mut g, &pred, &gt, &w.loss3d, taxon).map_err(|e| e.to_string())?;
        record("loss_3d", &g, l, &conf)?;
        // Eq. 5
        let gt2 = Targets2d {
            keypoints2d: Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(0.0..32.0)).collect()),
            visible: vec![true, false, true, true, false],
            mask: Tensor::matrix(8, 6, (0..48).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()),
        };
        let mut g = Graph::new();
        let k = g.param("k", Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(0.0..32.0)).collect()));
        let m = g.param("m", Tensor::matrix(8, 6, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()));
        let l = loss_2d_graph(&mut g, k, m, &gt2, &w.loss2d).map_err(|e| e.to_string())?;
        record("loss_2d", &g, l, &conf)?;
        // Eq. 6
        let spd = |rng: &mut ChaCha8Rng, n: usize| {
            let a = normal(rng, n, n);
            let mut s = a.matmul(&a.transpose());
            for d in 0..n {
                s.set(d, d, s.at(d, d) + 0.5);
            }
            s
        };
        let (sb, st) = (spd(&mut rng, 4), spd(&mut rng, 18));
        let prior = PriorDistribution::new(Taxon::Quadruped, normal(&mut rng, 1, 4).into_data(), sb, normal(&mut rng, 1, 18).into_data(), st, None, None)
            .map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let b = g.param("beta", normal(&mut rng, 1, 4));
        let th = g.param("theta", normal(&mut rng, 6, 3));
        let l = smal_prior_graph(&mut g, b, th, &prior, &w.smal_prior).map_err(|e| e.to_string())?;
        record("loss_smal_prior", &g, l, &conf)?;
        // Eq. 7
        let prior = PriorDistribution::new(
            Taxon::Avian,
            vec![0.0; 4],
            Tensor::eye(4),
            vec![0.0; 18],
            Tensor::eye(18),
            Some(normal(&mut rng, 1, 18).into_data()),
            Some(normal(&mut rng, 1, 5).into_data()),
        )
        .map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let b = g.param("beta", normal(&mut rng, 1, 4));
        let th = g.param("theta", normal(&mut rng, 6, 3));
        let a = g.param("alpha", normal(&mut rng, 1, 5));
        let l = aves_prior_graph(&mut g, b, th, Some(a), &prior, &w.aves_prior).map_err(|e| e.to_string())?;
        record("loss_aves_prior", &g, l, &conf)?;
        // Projection.
        let cam = CameraSpec::for_image(64, 64, [0.0; 3]);
        let mut g = Graph::new();
        let x = g.param("x", normal(&mut rng, 5, 3).map(|v| 0.3 * v));
        let tr = g.param("t", Tensor::row(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(4.0..8.0)]));
        let px = project_graph(&mut g, x, tr, &cam);
        let y = weighted_sum(&mut g, px, i);
        record("project", &g, y, &conf)?;
    }
    // model_forward, both taxa.
    for (i, taxon) in Taxon::ALL.into_iter().enumerate() {
        let t = build_toy_template(taxon, 6, 4, 120, 4).map_err(|e| e.to_string())?;
        let p = random_params(&t, &mut rng);
        let mut g = Graph::new();
        let vars = p.bind(&mut g, "p", true);
        let mesh = model_forward_graph(&mut g, &t, &vars);
        let a = weighted_sum(&mut g, mesh.vertices, i);
        let b = weighted_sum(&mut g, mesh.keypoints3d, i + 3);
        let y = g.add(a, b);
        record("model_forward", &g, y, &conf)?;
    }
    // Full toy network (D = 32, 2 blocks, 17 tokens) at a fan-in point.
    let ts = toy_templates();
    let cfg = NetworkConfig::toy(&ts[0], &ts[1]);
    ensure(cfg.embed_dim == 32 && cfg.n_blocks == 2 && cfg.n_tokens() == 17, || "toy network dimensions changed".into())?;
    let state = NetworkState::init_with(&cfg, 12, WeightInit::FanIn).map_err(|e| e.to_string())?;
    for taxon in Taxon::ALL {
        let n = cfg.image_height * cfg.image_width * cfg.channels;
        let img = Tensor::new(vec![cfg.image_height, cfg.image_width, cfg.channels], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.input("x", patchify(&img, &cfg).map_err(|e| e.to_string())?);
        let p = network_forward_graph(&mut g, &state, &cfg, x, taxon).map_err(|e| e.to_string())?;
        let mut outs = vec![p.beta, p.theta, p.camera, p.z];
        outs.extend(p.alpha);
        let mut y = weighted_sum(&mut g, outs[0], 0);
        for (i, &v) in outs.iter().enumerate().skip(1) {
            let s = weighted_sum(&mut g, v, i);
            y = g.add(y, s);
        }
        let net_conf = GradCheckConfig { max_probes_per_leaf: Some(6), ..conf.clone() };
        record("network", &g, y, &net_conf)?;
    }
    let elapsed = start.elapsed();
    let max = worst.values().fold(0.0f64, |m, &v| m.max(v));
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(max <= 1e-4, || format!("max rel error {max:.2e} > 1e-4 ({detail})"))?;
    ensure(elapsed <= Duration::from_secs(60), || format!("suite took {:.1}s > 60s", elapsed.as_secs_f64()))?;
    Ok(format!("max rel error {max:.1e} at h=1e-6 [{detail}]; suite {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn c2_procrustes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_err = 0.0f64;
    let mut worst_param = 0.0f64;
    for _ in 0..100 {
        let x = normal(&mut rng, 30, 3);
        let s = rng.random_range(0.2..5.0);
        let r = rodrigues(random_axis_angle(&mut rng, std::f64::consts::PI));
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let y = Tensor::matrix(
            30,
            3,
            (0..30).flat_map(|i| (0..3).map(move |a| (i, a))).map(|(i, a)| s * (0..3).map(|b| r[a][b] * x.at(i, b)).sum::<f64>() + t[a]).collect(),
        );
        let al = procrustes_align(&x, &y).map_err(|e| e.to_string())?;
        let mut d = (al.scale - s).abs();
        for a in 0..3 {
            d = d.max((al.translation[a] - t[a]).abs());
            for b in 0..3 {
                d = d.max((al.rotation[a][b] - r[a][b]).abs());
            }
        }
        worst_param = worst_param.max(d);
        worst_err = worst_err.max(pa_point_error(&y, &x).map_err(|e| e.to_string())?);
    }
    ensure(worst_err <= 1e-8, || format!("pa_point_error {worst_err:.2e} > 1e-8"))?;
    ensure(worst_param <= 1e-8, || format!("(s,R,t) recovery error {worst_param:.2e}"))?;
    Ok(format!("100 trials, n=30: max pa_point_error {worst_err:.1e}, max |(s,R,t) error| {worst_param:.1e}"))
}

// ---------------------------------------------------------------- 3

fn c3_moe() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut params = BTreeMap::new();
    params.insert("blocks.0.fc2_shared.weight".to_string(), Tensor::matrix(1280, 960, (0..1280 * 960).map(|_| rng.random_range(-0.01..0.01)).collect()));
    params.insert("blocks.0.fc2_shared.bias".to_string(), Tensor::zeros(&[1, 960]));
    for taxon in Taxon::ALL {
        params.insert(format!("blocks.0.fc2_specific.{taxon}.weight"), Tensor::matrix(1280, 320, (0..1280 * 320).map(|_| rng.random_range(-0.01..0.01)).collect()));
        params.insert(format!("blocks.0.fc2_specific.{taxon}.bias"), Tensor::zeros(&[1, 320]));
    }
    let state = NetworkState { params };
    let mut g = Graph::new();
    let h = g.input("h", Tensor::matrix(193, 1280, (0..193 * 1280).map(|_| rng.random::<f64>()).collect()));
    let out = moe_ffn_graph(&mut g, &state, 0, h, Taxon::Avian).map_err(|e| e.to_string())?;
    ensure(g.value(out).shape() == [193, 1280], || format!("MoE output {:?}", g.value(out).shape()))?;
    let hv = g.value(h).clone();
    let shared = hv.matmul(&state.params["blocks.0.fc2_shared.weight"]);
    let specific = hv.matmul(&state.params["blocks.0.fc2_specific.avian.weight"]);
    for r in 0..193 {
        let row = &g.value(out).data()[r * 1280..(r + 1) * 1280];
        ensure(row[..960] == shared.data()[r * 960..(r + 1) * 960] && row[960..] == specific.data()[r * 320..(r + 1) * 320], || format!("row {r} is not [shared | avian expert]"))?;
    }

    let ts = toy_templates();
    let cfg = NetworkConfig::toy(&ts[0], &ts[1]);
    let state = NetworkState::init(&cfg, 3).map_err(|e| e.to_string())?;
    let mut perturbed = state.clone();
    let names = state.taxon_specific_names(Taxon::Avian);
    for name in &names {
        let t = perturbed.params.get_mut(name).unwrap();
        *t = t.map(|v| v * 3.0 + 0.25);
    }
    let bits = |p: &animer::network::PredictedParams| -> Vec<u64> {
        let mut v: Vec<f64> = p.beta.clone();
        v.extend(p.theta.iter().flatten());
        v.extend(p.camera);
        v.extend(&p.z);
        v.into_iter().map(f64::to_bits).collect()
    };
    let mut changed_bits = 0u32;
    let mut avian_changed = 0;
    for _ in 0..20 {
        let n = cfg.image_height * cfg.image_width * cfg.channels;
        let img = Tensor::new(vec![cfg.image_height, cfg.image_width, cfg.channels], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = predict(&state, &cfg, &img, Taxon::Quadruped).map_err(|e| e.to_string())?;
        let b = predict(&perturbed, &cfg, &img, Taxon::Quadruped).map_err(|e| e.to_string())?;
        ensure(a.alpha.is_none() && b.alpha.is_none(), || "quadruped prediction has alpha".into())?;
        changed_bits += bits(&a).iter().zip(bits(&b)).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
        let pa = predict(&state, &cfg, &img, Taxon::Avian).map_err(|e| e.to_string())?;
        let pb = predict(&perturbed, &cfg, &img, Taxon::Avian).map_err(|e| e.to_string())?;
        avian_changed += usize::from(pa != pb);
    }
    ensure(changed_bits == 0, || format!("quadruped outputs changed in {changed_bits} bits"))?;
    ensure(avian_changed == 20, || "perturbation did not reach the avian path".into())?;
    Ok(format!("193x960 ⊕ 193x320 = 193x1280 exact; {} avian tensors perturbed: 0 quadruped bits changed over 20 inputs (avian outputs changed 20/20)", names.len()))
}

// ---------------------------------------------------------------- 4

fn brute_force_con(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let b = z.rows();
    let dot = |i: usize, j: usize| (0..z.cols()).map(|c| z.at(i, c) * z.at(j, c)).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..b).filter(|&o| o != i).map(|o| dot(i, o).exp()).sum();
        total += -pos.iter().map(|&p| (dot(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
    }
    total
}

fn c4_contrastive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let tau = LossWeights::default().tau;
    let (mut oracle_err, mut perm_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let z = unit_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let l = loss_con(&z, &labels, tau).map_err(|e| e.to_string())?;
        oracle_err = oracle_err.max((l - brute_force_con(&z, &labels, tau)).abs());
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let zp = Tensor::matrix(b, d, perm.iter().flat_map(|&i| z.data()[i * d..(i + 1) * d].to_vec()).collect());
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        perm_err = perm_err.max((loss_con(&zp, &lp, tau).map_err(|e| e.to_string())? - l).abs());
    }
    let distinct = loss_con(&unit_rows(&mut rng, 8, 16), &[0, 1, 2, 3, 4, 5, 6, 7], tau).map_err(|e| e.to_string())?;
    ensure(oracle_err <= 1e-12, || format!("oracle mismatch {oracle_err:.2e}"))?;
    ensure(perm_err <= 1e-12, || format!("permutation changes loss by {perm_err:.2e}"))?;
    ensure(distinct == 0.0, || format!("all-distinct labels give {distinct}"))?;
    Ok(format!("50 batches: |oracle diff| ≤ {oracle_err:.1e}, |permutation diff| ≤ {perm_err:.1e}, all-distinct = {distinct}"))
}

// ---------------------------------------------------------------- 5

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn c5_lbs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut eq_err, mut id_err, mut alpha_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut avian_templates = 0;
    for k in 0..20 {
        let taxon = Taxon::ALL[k % 2];
        let joints = rng.random_range(4..=7);
        let t = build_toy_template(taxon, joints, rng.random_range(2..=6), 200, rng.random()).map_err(|e| e.to_string())?;
        let mut p = random_params(&t, &mut rng);
        // Zero-pose identity.
        let (rest_v, rest_j) = rest_shape(&t, &p.beta, p.alpha.as_deref()).map_err(|e| e.to_string())?;
        let mut zero = p.clone();
        zero.theta = vec![[0.0; 3]; t.n_joints()];
        zero.gamma = [0.0; 3];
        let out = model_forward(&t, &zero).map_err(|e| e.to_string())?;
        id_err = id_err.max(out.vertices.zip_map(&rest_v, |a, b| a - b).max_abs()).max(out.joints.zip_map(&rest_j, |a, b| a - b).max_abs());
        // Root-rotation equivariance.
        p.theta[0] = [0.0; 3];
        p.gamma = [0.0; 3];
        let base = model_forward(&t, &p).map_err(|e| e.to_string())?;
        let j0 = [base.joints.at(0, 0), base.joints.at(0, 1), base.joints.at(0, 2)];
        let w = random_axis_angle(&mut rng, 3.0);
        let r = rodrigues(w);
        let tr: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let mut moved = p.clone();
        moved.theta[0] = w;
        moved.gamma = tr;
        let posed = model_forward(&t, &moved).map_err(|e| e.to_string())?;
        for (a, b) in [(&base.vertices, &posed.vertices), (&base.joints, &posed.joints), (&base.keypoints3d, &posed.keypoints3d)] {
            for i in 0..a.rows() {
                let d = [a.at(i, 0) - j0[0], a.at(i, 1) - j0[1], a.at(i, 2) - j0[2]];
                for c in 0..3 {
                    let want = (0..3).map(|e| r[c][e] * d[e]).sum::<f64>() + j0[c] + tr[c];
                    eq_err = eq_err.max((want - b.at(i, c)).abs());
                }
            }
        }
        // Avian single-bone scaling.
        if taxon.has_bone_scale() {
            avian_templates += 1;
            let zero_a = vec![0.0; t.n_bones()];
            let (_, j_ref) = rest_shape(&t, &p.beta, Some(&zero_a)).map_err(|e| e.to_string())?;
            for b in 0..t.n_bones() {
                let mut a = zero_a.clone();
                let amount = rng.random_range(-0.5..3.5);
                a[b] = amount;
                let (_, j1) = rest_shape(&t, &p.beta, Some(&a)).map_err(|e| e.to_string())?;
                for c in 0..t.n_joints() {
                    let Some(q) = t.parents[c] else { continue };
                    let l0 = dist(&j_ref.data()[3 * c..3 * c + 3], &j_ref.data()[3 * q..3 * q + 3]);
                    let l1 = dist(&j1.data()[3 * c..3 * c + 3], &j1.data()[3 * q..3 * q + 3]);
                    let want = if c - 1 == b { 1.0 + amount } else { 1.0 };
                    alpha_err = alpha_err.max((l1 / l0 - want).abs());
                }
            }
        }
    }
    ensure(id_err <= 1e-9, || format!("zero-pose identity error {id_err:.2e}"))?;
    ensure(eq_err <= 1e-9, || format!("root equivariance error {eq_err:.2e}"))?;
    ensure(alpha_err <= 1e-9, || format!("bone scaling error {alpha_err:.2e}"))?;
    Ok(format!("20 templates: equivariance {eq_err:.1e}, zero-pose {id_err:.1e}, single-bone factor error {alpha_err:.1e} ({avian_templates} avian)"))
}

// ---------------------------------------------------------------- 6

fn c6_visibility(dir: &Path) -> Outcome {
    let ds = gen(dir, "visibility", 100, 606)?;
    ensure(ds.records.len() == 200, || format!("{} records", ds.records.len()))?;
    let (mut occluded, mut occluded_flagged, mut visible) = (0usize, 0usize, 0usize);
    for r in &ds.records {
        let t = ds.template(r.taxon).map_err(|e| e.to_string())?;
        let mesh = model_forward(t, &r.params).map_err(|e| e.to_string())?;
        let buffers = rasterize(&mesh.vertices, &t.faces, &r.camera).map_err(|e| e.to_string())?;
        let flags = keypoint_visibility(&mesh.keypoints3d, &r.camera, &buffers, VISIBILITY_TOLERANCE).map_err(|e| e.to_string())?;
        ensure(flags == r.visible, || format!("record {}: recomputed {flags:?} vs stored {:?}", r.id, r.visible))?;
        for (k, &flag) in r.visible.iter().enumerate() {
            let c = r.camera.to_camera([r.keypoints3d.at(k, 0), r.keypoints3d.at(k, 1), r.keypoints3d.at(k, 2)]);
            visible += usize::from(flag);
            let Some(px) = r.camera.pixel_of_camera_point(c) else { continue };
            let (col, row) = (px[0].floor(), px[1].floor());
            if col < 0.0 || row < 0.0 || col >= r.camera.width as f64 || row >= r.camera.height as f64 {
                continue;
            }
            if buffers.depth_at(row as usize, col as usize) + VISIBILITY_TOLERANCE < c[2] {
                occluded += 1;
                occluded_flagged += usize::from(flag);
            }
        }
    }
    // Explicit case: a wall in front of one keypoint, another in front of the wall.
    let cam = CameraSpec::for_image(64, 64, [0.0; 3]);
    let wall = Tensor::from_rows(&[[-1.0, -1.0, 5.0], [1.0, -1.0, 5.0], [1.0, 1.0, 5.0], [-1.0, 1.0, 5.0]]);
    let buffers = rasterize(&wall, &[[0, 1, 2], [0, 2, 3]], &cam).map_err(|e| e.to_string())?;
    let kps = Tensor::from_rows(&[[0.1, 0.1, 7.0], [0.1, 0.1, 4.0], [0.1, 0.1, 5.0]]);
    let wall_flags = keypoint_visibility(&kps, &cam, &buffers, VISIBILITY_TOLERANCE).map_err(|e| e.to_string())?;
    ensure(wall_flags == [false, true, true], || format!("wall case flags {wall_flags:?}"))?;
    ensure(occluded > 0, || "no occluded keypoint in the corpus".into())?;
    ensure(occluded_flagged == 0, || format!("{occluded_flagged} occluded keypoints flagged visible"))?;
    let _ = project; // projection path is covered by the recomputation above
    Ok(format!("200 samples: flags identical; {occluded} occluded keypoints all 0 (+ explicit wall case); {visible} visible"))
}

// ---------------------------------------------------------------- 7

fn c7_sampler() -> Outcome {
    let weights: Vec<f64> = TABLE_III.iter().map(|&(_, w, _)| w).collect();
    ensure(weights == [1.0, 0.6, 0.15, 0.15, 0.05, 0.15, 0.15, 0.45, 0.45], || format!("Table III weights {weights:?}"))?;
    let ds: Vec<DatasetInfo> = TABLE_III.iter().map(|&(n, _, h)| DatasetInfo { name: n.into(), len: 1000, has_3d: h }).collect();
    let s = WeightedSampler::new(&ds, &weights, Stage::Two).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut counts = vec![0usize; ds.len()];
    for (d, _) in weighted_sample_stream(&s, &mut rng).take(100_000) {
        counts[d] += 1;
    }
    let total: f64 = weights.iter().sum();
    let dev = counts.iter().zip(&weights).map(|(&c, &w)| (c as f64 / 1e5 - w / total).abs()).fold(0.0f64, f64::max);
    ensure(dev <= 0.02, || format!("frequency deviation {dev:.4}"))?;
    let s1 = WeightedSampler::new(&ds, &weights, Stage::One).map_err(|e| e.to_string())?;
    let two_d = weighted_sample_stream(&s1, &mut rng).take(10_000).filter(|&(d, _)| !ds[d].has_3d).count();
    ensure(two_d == 0, || format!("stage 1 drew {two_d} 2D-only samples"))?;
    Ok(format!("1e5 draws: max |freq − weight| = {:.2} pp (≤ 2 pp); stage 1: 0/10000 2D-only", dev * 100.0))
}

// ---------------------------------------------------------------- 8

fn c8_weights() -> Outcome {
    let w = LossWeights::default();
    let got: [(&str, f64, f64); 13] = [
        ("lambda_3d", w.lambda_3d, 0.05),
        ("lambda_2d", w.lambda_2d, 0.01),
        ("lambda_smal_prior", w.lambda_smal_prior, 0.001),
        ("lambda_con", w.lambda_con, 0.0005),
        ("lambda_aves_prior", w.lambda_aves_prior, 0.002),
        ("loss3d.lambda_beta", w.loss3d.lambda_beta, 0.01),
        ("loss3d.lambda_theta", w.loss3d.lambda_theta, 0.2),
        ("loss3d.lambda_alpha(avian)", w.loss3d.lambda_alpha(Taxon::Avian), 0.04),
        ("loss3d.lambda_alpha(quadruped)", w.loss3d.lambda_alpha(Taxon::Quadruped), 0.0),
        ("loss2d.lambda_M", w.loss2d.lambda_mask, 2.0),
        ("smal_prior.lambda_beta", w.smal_prior.lambda_beta, 0.5),
        ("aves_prior.lambda_beta", w.aves_prior.lambda_beta, 0.5),
        ("aves_prior.lambda_theta", w.aves_prior.lambda_theta, 1.0),
    ];
    for (name, v, want) in got {
        ensure(v.to_bits() == want.to_bits(), || format!("{name} = {v}, expected {want}"))?;
    }
    ensure(w.tau > 0.0, || "tau must be positive".into())?;
    ensure(SmalPriorWeights { lambda_beta: 0.5 } == w.smal_prior && AvesPriorWeights { lambda_beta: 0.5, lambda_theta: 1.0 } == w.aves_prior, || "prior weights".into())?;
    Ok(format!("{} paper values reproduced bit-exactly (tau = {})", got.len(), w.tau))
}

// ---------------------------------------------------------------- 9

fn c9_oracle(dir: &Path) -> Outcome {
    let ds = gen(dir, "oracle", 40, 909)?;
    let preds: Vec<_> = ds.records.iter().map(oracle_prediction).collect();
    let r = evaluate_predictions(&ds, &preds).map_err(|e| e.to_string())?;
    let mut worst_3d = 0.0f64;
    let mut min_auc = 1.0f64;
    for (scope, m) in std::iter::once(("overall", &r.overall)).chain(r.per_taxon.iter().map(|(k, v)| (k.as_str(), v))) {
        for (name, v) in [("PA-MPJPE", m.pa_mpjpe_mm), ("PA-MPVPE", m.pa_mpvpe_mm), ("PA-CD", m.pa_cd_mm)] {
            let v = v.ok_or_else(|| format!("{scope}: {name} absent"))?;
            worst_3d = worst_3d.max(v);
        }
        for k in ["0.1", "0.15", "hth"] {
            ensure(m.pck.get(k).copied().flatten() == Some(1.0), || format!("{scope}: PCK@{k} = {:?}", m.pck.get(k)))?;
        }
        min_auc = min_auc.min(m.auc.ok_or_else(|| format!("{scope}: AUC absent"))?);
    }
    ensure(worst_3d <= 1e-9, || format!("3D oracle error {worst_3d:.2e} mm"))?;
    ensure(min_auc >= 0.99, || format!("AUC {min_auc}"))?;
    Ok(format!("{} records: PA-MPJPE/MPVPE/CD ≤ {worst_3d:.1e} mm, PCK@0.1/0.15/HTH = 1, AUC ≥ {min_auc:.3}", ds.records.len()))
}

// ---------------------------------------------------------------- 10

fn moving_average(trace: &[f64], end: usize) -> f64 {
    let lo = end.saturating_sub(10);
    trace[lo..end].iter().sum::<f64>() / (end - lo) as f64
}

fn c10_toy(dir: &Path) -> Outcome {
    let start = Instant::now();
    let train = gen(dir, "toy-train", 256, 1)?;
    let test = gen(dir, "toy-test", 64, 2)?;
    let net = NetworkConfig::toy(train.template(Taxon::Quadruped).map_err(|e| e.to_string())?, train.template(Taxon::Avian).map_err(|e| e.to_string())?);
    let data = TrainingData::from_datasets(std::slice::from_ref(&train), &net).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    ensure((cfg.stage1_steps, cfg.stage2_steps, cfg.batch_size) == (1000, 1000, 16), || "toy defaults changed".into())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| -> Outcome {
        let mut trainer = Trainer::new(net.clone(), cfg).map_err(|e| e.to_string())?;
        let init = evaluate_model(&trainer.state, &net, &test).map_err(|e| e.to_string())?;
        let mut trace = Vec::new();
        for stage in [Stage::One, Stage::Two] {
            trainer.run_stage(&data, stage, &mut |_| Ok(())).map_err(|e| e.to_string())?;
            trace.extend_from_slice(&trainer.loss_trace);
        }
        let elapsed = start.elapsed();
        let finite = trace.iter().all(|l| l.is_finite());
        let (first, last) = (moving_average(&trace, 10), moving_average(&trace, trace.len()));
        let ratio = last / first;
        let fin = evaluate_model(&trainer.state, &net, &test).map_err(|e| e.to_string())?;
        let mut parts = vec![format!("loss MA10 {first:.4} -> {last:.4} (ratio {ratio:.3}, need ≤ 0.5)")];
        let mut ok = finite && ratio <= 0.5 && elapsed <= Duration::from_secs(15 * 60);
        for taxon in Taxon::ALL {
            let before = init.per_taxon[taxon.name()].pa_mpjpe_mm.ok_or("PA-MPJPE absent")?;
            let after = fin.per_taxon[taxon.name()].pa_mpjpe_mm.ok_or("PA-MPJPE absent")?;
            let gain = (before - after) / before;
            ok &= gain >= 0.30;
            parts.push(format!("{taxon} PA-MPJPE {before:.1} -> {after:.1} mm ({:+.1}%, need ≥ 30%)", 100.0 * gain));
        }
        parts.push(format!("{:.0}s on 1 thread (limit 900s)", elapsed.as_secs_f64()));
        if !finite {
            parts.push("non-finite loss in trace".into());
        }
        let line = parts.join("; ");
        if ok {
            Ok(line)
        } else {
            Err(line)
        }
    })
}

// ---------------------------------------------------------------- 11

fn c11_reproducibility(dir: &Path) -> Outcome {
    let ds = gen(dir, "repro", 32, 11)?;
    let net = NetworkConfig::toy(ds.template(Taxon::Quadruped).map_err(|e| e.to_string())?, ds.template(Taxon::Avian).map_err(|e| e.to_string())?);
    let data = TrainingData::from_datasets(std::slice::from_ref(&ds), &net).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { stage1_steps: 24, stage2_steps: 16, seed: 17, ..TrainConfig::default() };
    let full = |mid: Option<&Path>| -> Result<Vec<u8>, String> {
        let mut t = Trainer::new(net.clone(), cfg.clone()).map_err(|e| e.to_string())?;
        t.start_stage(Stage::One);
        t.run(&data, Some(10), &mut |_| Ok(())).map_err(|e| e.to_string())?;
        if let Some(path) = mid {
            t.checkpoint().save(path).map_err(|e| e.to_string())?;
            t = Trainer::from_checkpoint(Checkpoint::load(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        }
        t.run(&data, None, &mut |_| Ok(())).map_err(|e| e.to_string())?;
        t.run_stage(&data, Stage::Two, &mut |_| Ok(())).map_err(|e| e.to_string())?;
        t.checkpoint().to_bytes().map_err(|e| e.to_string())
    };
    let a = full(None)?;
    let b = full(None)?;
    ensure(a == b, || "same-seed runs differ".into())?;
    let resumed = full(Some(&dir.join("mid.ckpt")))?;
    ensure(a == resumed, || "save/resume at stage-1 step 10 diverges from the uninterrupted run".into())?;
    let other = {
        let mut t = Trainer::new(net.clone(), TrainConfig { seed: 18, ..cfg.clone() }).map_err(|e| e.to_string())?;
        t.run_stage(&data, Stage::One, &mut |_| Ok(())).map_err(|e| e.to_string())?;
        t.run_stage(&data, Stage::Two, &mut |_| Ok(())).map_err(|e| e.to_string())?;
        t.checkpoint().to_bytes().map_err(|e| e.to_string())?
    };
    ensure(other != a, || "a different seed gave the same checkpoint".into())?;
    Ok(format!("two runs bit-identical ({} byte checkpoint); resume at stage-1 step 10 bit-equivalent; other seed differs", a.len()))
}

// ---------------------------------------------------------------- 12

fn c12_filter() -> Outcome {
    let cfg = GenConfig::default();
    let mut corpus = Vec::new();
    for t in toy_templates() {
        for a in 0..150 {
            let att = run_attempt(1212, a, &t, &cfg).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(a);
            let seg = perturb_mask(&att.record.mask, &cfg.perturbation, &mut rng);
            corpus.push((att.record, seg));
        }
    }
    let thresholds = [0.0, 0.1, 0.3, 0.5, 0.7, 0.8, 0.85, 0.9, 0.95, 0.99, 1.0];
    let mut rates = Vec::new();
    for &thr in &thresholds {
        let mut dropped = 0usize;
        for (rec, seg) in &corpus {
            dropped += usize::from(!cycle_consistency_filter(rec, seg, thr).map_err(|e| e.to_string())?.0);
        }
        rates.push(dropped as f64 / corpus.len() as f64);
    }
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("drop rates not monotone: {rates:?}"))?;
    // IoU = 1/3: 8x8 rendered square inside an 8x24 segmentation.
    let t = toy_template(Taxon::Quadruped);
    let mut rec = animer::datagen::synthesize_sample(&BodyParams::zeros(&t), &cfg.camera().with_translation([0.0, 0.0, 6.0]), 0, &t, &cfg).map_err(|e| e.to_string())?;
    rec.mask = animer::camera::Mask::from_fn(64, 64, |r, c| (10..18).contains(&r) && (10..18).contains(&c));
    rec.degenerate = false;
    let seg = animer::camera::Mask::from_fn(64, 64, |r, c| (10..18).contains(&r) && (10..34).contains(&c));
    let (keep5, iou) = cycle_consistency_filter(&rec, &seg, 0.5).map_err(|e| e.to_string())?;
    let (keep3, _) = cycle_consistency_filter(&rec, &seg, 0.3).map_err(|e| e.to_string())?;
    ensure(iou == 1.0 / 3.0 && !keep5 && keep3, || format!("rectangle case: iou {iou}, keep@0.5 {keep5}, keep@0.3 {keep3}"))?;
    let shown = thresholds.iter().zip(&rates).map(|(t, r)| format!("{t}:{r:.2}")).collect::<Vec<_>>().join(" ");
    Ok(format!("{} samples, drop rate monotone [{shown}]; IoU=1/3 drops at 0.5, kept at 0.3", corpus.len()))
}

// ----------------------------------------------------------------

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let skip_toy = std::env::var("ANIMER_ACCEPTANCE_SKIP_TOY").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, Box<dyn Fn() -> Option<Outcome>>)> = vec![
        ("C1 gradient integrity", Box::new(|| Some(c1_gradients()))),
        ("C2 Procrustes recovery", Box::new(|| Some(c2_procrustes()))),
        ("C3 MoE contracts", Box::new(|| Some(c3_moe()))),
        ("C4 contrastive oracle", Box::new(|| Some(c4_contrastive()))),
        ("C5 LBS rigidity", Box::new(|| Some(c5_lbs()))),
        ("C6 visibility audit", Box::new(|| Some(c6_visibility(dir.path())))),
        ("C7 sampler fidelity", Box::new(|| Some(c7_sampler()))),
        ("C8 loss-weight defaults", Box::new(|| Some(c8_weights()))),
        ("C9 metric sanity", Box::new(|| Some(c9_oracle(dir.path())))),
        ("C10 toy convergence", Box::new(|| (!skip_toy).then(|| c10_toy(dir.path())))),
        ("C11 reproducibility", Box::new(|| Some(c11_reproducibility(dir.path())))),
        ("C12 filter behavior", Box::new(|| Some(c12_filter()))),
    ];
    let mut failures = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Some(Ok(detail)) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Some(Err(detail)) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
            None => {
                failures += 1;
                println!("SKIP {name}: skipped by ANIMER_ACCEPTANCE_SKIP_TOY");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
