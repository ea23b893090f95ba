//! Acceptance checks. Each test writes one `PASS`/`FAIL` line straight to
//! stderr (so it shows even when output is captured) and then asserts.

mod common;

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use lttr::backbone::BevGeometry;
use lttr::fusion::{apply_region_weights, depthwise_xcorr};
use lttr::heads::{build_targets, decode_box, heat_value, loss, perfect_predictions, LossConfig};
use lttr::model::{Model, ModelConfig, Variant};
use lttr::scene::{generate_sequence, Box3D, Sequence, VoxelConfig};
use lttr::tensor::{check_gradient_entries, save_checkpoint, Graph, ParamId, ParamStore, Tensor};
use lttr::tracker::{center_error, evaluate_model, evaluate_ope, iou_3d, make_sample, template_grids, train, write_loss_csv, TrainConfig};
use lttr::transformer::{attention, Decoder, Encoder, Mha, RegionGeometry, TransformerConfig};

fn report(criterion: usize, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {criterion}: {name} ({detail})");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn training_sequences(base: u64, count: u64) -> Vec<Sequence> {
    (0..count).map(|i| generate_sequence(base + i, 20, 0.3, 200).unwrap()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn gradient_integrity() {
    let start = Instant::now();
    let cfg = ModelConfig {
        transformer: TransformerConfig {
            model_dim: 16,
            point_dim: 16,
            ..TransformerConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 3).unwrap();
    let data = vec![generate_sequence(21, 4, 0.3, 200).unwrap()];
    let templates = template_grids(&model, &data, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = make_sample(&model, &data[0], templates[0].as_ref().unwrap(), 2, &mut rng).unwrap().unwrap();

    // move every parameter off relu kinks and exact zeros
    let mut store = model.store.clone();
    let model_ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &model_ids, &mut rng, 0.2);
    let search_id = store.add("probe.search", s.search.features()).unwrap();
    let template_id = store.add("probe.template", s.template.features()).unwrap();

    let per_tensor = 10;
    let mut entries = Vec::new();
    for &id in &model_ids {
        let n = store.get(id).tensor.len();
        entries.extend(sample(&mut rng, n, per_tensor.min(n)).into_iter().map(|i| (id, i)));
    }
    for id in [search_id, template_id] {
        let occupied: Vec<usize> = (0..store.get(id).tensor.len()).filter(|&i| store.get(id).tensor.data()[i] != 0.0).collect();
        entries.extend(sample(&mut rng, occupied.len(), 12.min(occupied.len())).into_iter().map(|k| (id, occupied[k])));
    }

    let loss_cfg = LossConfig::default();
    let result = check_gradient_entries(&mut store, &entries, 1e-6, |g: &mut Graph| {
        let search = g.param(search_id);
        let template = g.param(template_id);
        let out = model.forward_volumes(g, search, template)?;
        Ok(loss(g, &out.preds, &s.targets, &loss_cfg)?.total)
    })
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = result.max_rel_error < 1e-4 && elapsed < 300.0;
    report(
        1,
        "gradient integrity over the full forward path",
        ok,
        &format!(
            "max rel err {:.2e} at {}[{}], {} entries over {} tensors, {:.0} s",
            result.max_rel_error,
            result.worst_param,
            result.worst_index,
            result.checked,
            model_ids.len() + 2,
            elapsed
        ),
    );
    assert!(ok, "{result:?}");
}

#[test]
fn transformer_and_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;

    // plain attention
    let (q, k, v) = (random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[5, 4]), random_tensor(&mut rng, &[5, 2]));
    let store = ParamStore::new();
    {
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (out, w) = attention(&mut g, qv, kv, vv).unwrap();
        let (eo, ew) = common::attention(&to_mat(&q), &to_mat(&k), &to_mat(&v));
        worst = worst.max(max_abs_diff(g.data(out), &flat(&eo))).max(max_abs_diff(g.data(w), &flat(&ew)));
    }

    // multi-head attention, cross form
    let mut store = ParamStore::new();
    let mha_mod = Mha::new(&mut store, "mha", 6, 3, &mut rng).unwrap();
    let (x, c) = (random_tensor(&mut rng, &[4, 6]), random_tensor(&mut rng, &[3, 6]));
    {
        let mut g = Graph::new(&store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
        let (out, ws) = mha_mod.forward(&mut g, xv, cv).unwrap();
        let (eo, ews) = common::mha(&store, "mha", 3, &to_mat(&x), &to_mat(&c));
        worst = worst.max(max_abs_diff(g.data(out), &flat(&eo)));
        for (w, ew) in ws.iter().zip(&ews) {
            worst = worst.max(max_abs_diff(g.data(*w), &flat(ew)));
        }
    }

    // encoder with two layers on a 4×4×2 map, then the decoder on its output
    let tcfg = TransformerConfig {
        region_size: 2,
        point_grid: 2,
        model_dim: 4,
        point_dim: 4,
        heads: 2,
        layers: 2,
        ffn_ratio: 2,
    };
    let mut store = ParamStore::new();
    let geo = RegionGeometry::new([4, 4, 2], 2, 2).unwrap();
    let enc = Encoder::new(&mut store, "enc", &tcfg, geo, &mut rng).unwrap();
    let dec = Decoder::new(&mut store, "dec", &tcfg, &mut rng).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids, &mut rng, 0.5);
    let (ms, mt) = (random_tensor(&mut rng, &[4, 4, 2]), random_tensor(&mut rng, &[4, 4, 2]));
    let shape = EncoderShape {
        region_size: 2,
        point_grid: 2,
        heads: 2,
        layers: 2,
    };
    {
        let mut g = Graph::new(&store);
        let (sv, tv) = (g.constant(ms.clone()), g.constant(mt.clone()));
        let es = enc.encode(&mut g, sv).unwrap();
        let et = enc.encode(&mut g, tv).unwrap();
        let gs_oracle = common::encoder(&store, "enc", &shape, &ms);
        let gt_oracle = common::encoder(&store, "enc", &shape, &mt);
        worst = worst.max(max_abs_diff(g.data(es.regions), &flat(&gs_oracle)));
        worst = worst.max(max_abs_diff(g.data(et.regions), &flat(&gt_oracle)));

        let gs = g.slice(es.regions, 0, 1, 5).unwrap();
        let gt = g.slice(et.regions, 0, 1, 5).unwrap();
        let out = dec.decode(&mut g, gs, gt).unwrap();
        let expect = common::decoder(&store, "dec", 2, &gs_oracle[1..].to_vec(), &gt_oracle[1..].to_vec());
        worst = worst.max(max_abs_diff(g.data(out.regions), &flat(&expect)));
    }
    let attn_ok = worst <= 1e-10;

    // focal loss on random predictions against a real target map
    let bev = BevGeometry::from_voxel_config(&VoxelConfig::desk()).unwrap();
    let label = Box3D::new([0.37, -1.13, -0.6], [1.7, 4.0, 1.5], 0.4).unwrap();
    let targets = build_targets(&label, &bev).unwrap();
    let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
    let lc = LossConfig::default();
    let focal_err = {
        let mut g = Graph::new(&store);
        let p = g.constant(Tensor::new(vec![8, 8, 1], pred.clone()).unwrap());
        let l = g.focal_loss(p, &targets.heatmap, lc.alpha, lc.beta, lc.clamp).unwrap();
        (g.scalar(l) - common::focal_loss(&pred, targets.heatmap.data(), 2.0, 4.0)).abs()
    };
    let focal_ok = focal_err <= 1e-12;

    // heat targets: 1 at the center, 0.8 at distance 1, 1/d elsewhere
    let c = targets.center_cell;
    let mut heat_ok = heat_value(2f64.sqrt()) == 1.0 / 2f64.sqrt() && (heat_value(2f64.sqrt()) - 0.7071).abs() < 1e-4;
    for x in 0..8 {
        for y in 0..8 {
            let d = ((x as f64 - c[0] as f64).powi(2) + (y as f64 - c[1] as f64).powi(2)).sqrt();
            let expect = if d == 0.0 {
                1.0
            } else if d == 1.0 {
                0.8
            } else {
                1.0 / d
            };
            heat_ok &= targets.heatmap.at(&[x, y, 0]) == expect;
        }
    }

    let ok = attn_ok && focal_ok && heat_ok;
    report(
        2,
        "attention, MHA, encoder, decoder, focal loss and heat targets against scripted oracles",
        ok,
        &format!("transformer max abs diff {worst:.2e}, focal diff {focal_err:.2e}, heat targets exact: {heat_ok}"),
    );
    assert!(ok);
}

#[test]
fn structural_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let map = random_tensor(&mut rng, &[8, 8, 5]);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(map.clone());
    let blocks = g.unfold_blocks(m, 4, 4).unwrap();
    let back = g.fold_blocks(blocks, &[8, 8, 5], 4, 4).unwrap();
    let fold_ok = g.data(back) == map.data();

    let ones = g.constant(Tensor::ones(&[4, 1]));
    let weighted = apply_region_weights(&mut g, m, ones, 4).unwrap();
    let ones_ok = g.data(weighted) == map.data();

    let other = random_tensor(&mut rng, &[8, 8, 5]);
    let t = g.constant(other.clone());
    let sim = depthwise_xcorr(&mut g, m, t).unwrap();
    let xcorr_err = max_abs_diff(g.data(sim), &xcorr(&map, &other));

    // zero-weight collapse
    let tcfg = TransformerConfig {
        model_dim: 8,
        point_dim: 8,
        ..TransformerConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &tcfg, RegionGeometry::new([8, 8, 6], 4, 2).unwrap(), &mut rng).unwrap();
    let dec = Decoder::new(&mut store, "dec", &tcfg, &mut rng).unwrap();
    for id in enc.weight_params().into_iter().chain(dec.weight_params()) {
        let shape = store.get(id).tensor.shape().to_vec();
        store.get_mut(id).tensor = Tensor::zeros(&shape);
    }
    let input = random_tensor(&mut rng, &[8, 8, 6]);
    let (enc_ok, dec_ok) = {
        let mut g = Graph::new(&store);
        let x = g.constant(input);
        let out = enc.encode(&mut g, x).unwrap();
        let enc_ok = g.data(out.regions) == store.get(enc.memories).tensor.data();
        let s = g.constant(random_tensor(&mut rng, &[4, 8]));
        let t = g.constant(random_tensor(&mut rng, &[3, 8]));
        let d = dec.decode(&mut g, s, t).unwrap();
        (enc_ok, g.data(d.regions) == g.data(s))
    };

    // targets → perfect maps → decoded box
    let bev = BevGeometry::from_voxel_config(&VoxelConfig::desk()).unwrap();
    let mut round_trip = 0.0f64;
    for _ in 0..500 {
        let b = Box3D::new(
            [rng.gen_range(-3.19..3.19), rng.gen_range(-3.19..3.19), rng.gen_range(-2.0..0.5)],
            [1.7, 4.0, 1.5],
            rng.gen_range(-3.1..3.1),
        )
        .unwrap();
        let targets = build_targets(&b, &bev).unwrap();
        let det = decode_box(&perfect_predictions(&targets), &bev, b.size).unwrap();
        let yaw = lttr::scene::wrap_angle(det.local_box.yaw - b.yaw).abs();
        round_trip = round_trip.max(center_error(&det.local_box, &b)).max(yaw);
    }
    let ok = fold_ok && ones_ok && xcorr_err <= 1e-12 && enc_ok && dec_ok && round_trip <= 1e-9;
    report(
        3,
        "structural identities",
        ok,
        &format!(
            "fold/unfold {fold_ok}, unit weights {ones_ok}, xcorr diff {xcorr_err:.2e}, encoder collapse {enc_ok}, decoder collapse {dec_ok}, target round trip {round_trip:.2e}"
        ),
    );
    assert!(ok);
}

#[test]
fn overfit_smoke_experiment() {
    let start = Instant::now();
    let data = training_sequences(100, 8);
    let mut model = Model::new(ModelConfig::default(), 2).unwrap();
    let cfg = TrainConfig::default();
    let records = train(&mut model, &data, &cfg, &LossConfig::default(), 0).unwrap();
    let initial = records[0].total;
    let tail = &records[records.len() - 50..];
    let last = tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64;
    let ope = evaluate_model(&model, &data, 0).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ok = cfg.steps <= 2000 && initial / last >= 10.0 && ope.success >= 0.80 && ope.precision >= 0.90 && minutes <= 30.0;
    report(
        4,
        "overfit on 8 synthetic sequences",
        ok,
        &format!(
            "{} steps, loss {initial:.3} -> {last:.4} (x{:.1}), success {:.4}, precision {:.4}, {minutes:.1} min",
            cfg.steps,
            initial / last,
            ope.success,
            ope.precision
        ),
    );
    assert!(ok);
}

#[test]
fn ablation_ordering() {
    let start = Instant::now();
    let cfg = TrainConfig {
        steps: 800,
        ..TrainConfig::default()
    };
    let mut base = Vec::new();
    let mut full = Vec::new();
    for seed in 0..5u64 {
        let train_data = training_sequences(1000 * seed, 8);
        let held_out = training_sequences(1000 * seed + 500, 8);
        for (variant, out) in [(Variant::Baseline, &mut base), (Variant::EncoderDecoder, &mut full)] {
            let mut model = Model::new(ModelConfig { variant, ..ModelConfig::default() }, seed).unwrap();
            train(&mut model, &train_data, &cfg, &LossConfig::default(), seed).unwrap();
            out.push(evaluate_model(&model, &held_out, seed).unwrap().success);
        }
    }
    let (mb, mf) = (median(base.clone()), median(full.clone()));
    let ok = mf >= mb;
    report(
        5,
        "encoder+decoder median success >= baseline on held-out sequences",
        ok,
        &format!(
            "baseline {base:.3?} median {mb:.4}; encoder+decoder {full:.3?} median {mf:.4}; {:.1} min",
            start.elapsed().as_secs_f64() / 60.0
        ),
    );
    assert!(ok);
}

#[test]
fn metric_correctness() {
    let gt: Vec<Box3D> = (0..12)
        .map(|t| Box3D::new([t as f64 * 0.3, 1.0, -0.5], [1.6, 3.9, 1.5], 0.1 * t as f64).unwrap())
        .collect();
    let perfect = evaluate_ope(&gt, &gt).unwrap();
    let perfect_ok = (perfect.success - 1.0).abs() <= 0.01 && perfect.precision == 1.0;

    let small: Vec<Box3D> = gt.iter().map(|b| Box3D::new(b.center, [0.5, 0.5, 0.5], b.yaw).unwrap()).collect();
    let shifted: Vec<Box3D> = small.iter().map(|b| Box3D::new([b.center[0], b.center[1] + 1.0, b.center[2]], b.size, b.yaw).unwrap()).collect();
    let off = evaluate_ope(&shifted, &small).unwrap();
    let off_ok = (off.precision - 0.5).abs() <= 0.01 && off.success < 0.011;

    let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
    let b = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
    let iou = iou_3d(&a, &b);
    let cube_ok = (iou - 1.0 / 3.0).abs() <= 1e-12;

    let ok = perfect_ok && off_ok && cube_ok;
    report(
        6,
        "OPE metrics",
        ok,
        &format!(
            "perfect {:.4}/{:.4}, 1 m error {:.4}/{:.4}, half-offset cube IoU {iou:.15}",
            perfect.success, perfect.precision, off.success, off.precision
        ),
    );
    assert!(ok);
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = training_sequences(300, 3);
    let cfg = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>, String) {
        let mut model = Model::new(ModelConfig::default(), 5).unwrap();
        let records = train(&mut model, &data, &cfg, &LossConfig::default(), 5).unwrap();
        let path = dir.path().join(format!("{tag}.bin"));
        save_checkpoint(&model.store, &path).unwrap();
        let mut csv = Vec::new();
        write_loss_csv(&records, &mut csv).unwrap();
        let ope = evaluate_model(&model, &data, 5).unwrap();
        let index = std::fs::read(dir.path().join(format!("{tag}.bin.json"))).unwrap();
        (std::fs::read(&path).unwrap(), index, csv, serde_json::to_string(&ope).unwrap())
    };
    let a = run("a");
    let b = run("b");
    let ok = a == b;
    report(
        7,
        "byte-identical checkpoints, loss curves and OPE reports under equal seeds",
        ok,
        &format!("checkpoint {} bytes, loss csv {} bytes, report {} bytes", a.0.len(), a.2.len(), a.3.len()),
    );
    assert!(ok);
}
