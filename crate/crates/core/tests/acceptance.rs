//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always shown.
//! `cargo test --release --test acceptance -- 3 8` runs a subset.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use pvtc::autodiff::{Graph, ParamStore, Tensor};
use pvtc::codec::bottleneck::{cross_entropy_bits, decode_latents, encode_latents, quantize_latents};
use pvtc::codec::{CodecModel, EntropyBottleneck};
use pvtc::config::{CodecConfig, Dataset, Shape, TrainConfig};
use pvtc::geometry::{dedup_sort, PointCloud};
use pvtc::metrics::{bd_metrics, chamfer_augmented, point_metrics, psnr_d1, RdCurve};
use pvtc::nn::Mlp;
use pvtc::octree::{decode_octree, encode_octree};
use pvtc::pipeline;
use pvtc::rangecoder::{AdaptiveBinaryModel, RangeDecoder, RangeEncoder};
use pvtc::sparse::{SparseTensor, VoxelSet};
use pvtc::train::{synth_cloud, train, TrainOutputs};
use pvtc::transformer::{evt_block, evt_cascade, self_attention_weights, EvtParams, Neighborhood};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "lossless octree roundtrip", c01_octree_roundtrip),
        (2, "pure-octree pipeline", c02_pure_octree),
        (3, "range-coder efficiency", c03_range_coder),
        (4, "entropy-bottleneck consistency", c04_bottleneck),
        (5, "gradient suite", c05_gradients),
        (6, "transformer invariants", c06_transformer),
        (7, "training smoke test", c07_training),
        (8, "metric oracles", c08_metrics),
        (9, "heterogeneity sweep", c09_sweep),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(f) {
            Ok(r) => r,
            Err(e) => (false, format!("panicked: {}", panic_text(&e))),
        };
        println!(
            "criterion {n:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(r: &mut ChaCha8Rng, bits: u8, n: usize) -> PointCloud {
    let max = 1u32 << bits;
    let pts = (0..n).map(|_| [r.random_range(0..max), r.random_range(0..max), r.random_range(0..max)]).collect();
    dedup_sort(pts, bits).unwrap()
}

fn c01_octree_roundtrip() -> Outcome {
    let mut r = rng(1);
    let t = Instant::now();
    let mut bad = 0;
    for _ in 0..1000 {
        let bits = r.random_range(4..=16u8);
        let n = r.random_range(1..=512usize);
        let pc = random_cloud(&mut r, bits, n);
        let bytes = encode_octree(&pc).unwrap();
        if decode_octree(&bytes, bits, pc.len() as u64).ok().as_ref() != Some(&pc) {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (bad == 0 && secs < 60.0, format!("1000 clouds, {bad} mismatches, {secs:.2}s (limit 60s)"))
}

fn c02_pure_octree() -> Outcome {
    let mut worst_mse = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut clouds = Vec::new();
    for (bits, pts) in [(8u8, 2000usize), (10, 5000), (12, 8000)] {
        for shape in [Shape::Sphere, Shape::Torus, Shape::Plane, Shape::LidarRings] {
            clouds.push((true, synth_cloud(shape, bits, pts, 3).unwrap()));
        }
    }
    let mut r = rng(2);
    for _ in 0..20 {
        let bits = r.random_range(1..=14u8);
        let n = r.random_range(1..=300usize);
        clouds.push((false, random_cloud(&mut r, bits, n)));
    }
    for (surface, pc) in &clouds {
        let n = pc.bit_depth();
        let model = CodecModel::new(CodecConfig::from_triple(n, 0, 0).unwrap()).unwrap();
        let bytes = pipeline::encode(pc, &model).unwrap();
        let dec = pipeline::decode(&bytes, None).unwrap();
        let mse = point_metrics(&pc.to_f64(), &dec.points, n).unwrap().d1_mse;
        worst_mse = worst_mse.max(if dec.cloud == *pc { mse } else { f64::INFINITY });
        if *surface && pc.len() >= 64 {
            worst_ratio = worst_ratio.max(pipeline::bpp(bytes.len(), pc.len() as u64) / (3.0 * n as f64));
        }
    }
    (
        worst_mse == 0.0 && worst_ratio < 1.0,
        format!("{} clouds, max D1 MSE {worst_mse}, max bpp/(3n) {worst_ratio:.3}", clouds.len()),
    )
}

fn c03_range_coder() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut detail = Vec::new();
    let mut ok = true;
    for (i, p) in [0.1f64, 0.5, 0.9].into_iter().enumerate() {
        let mut r = rng(30 + i as u64);
        let bits: Vec<bool> = (0..1_000_000).map(|_| r.random_bool(p)).collect();
        let ones = bits.iter().filter(|&&b| b).count() as f64;
        let q = ones / bits.len() as f64;
        let h = -(q * q.log2() + (1.0 - q) * (1.0 - q).log2());
        let bound = bits.len() as f64 * h / 8.0;
        let mut enc = RangeEncoder::new();
        let mut m = AdaptiveBinaryModel::new();
        for &b in &bits {
            enc.encode_bit(&mut m, b);
        }
        let out = enc.finish();
        let mut dec = RangeDecoder::new(&out).unwrap();
        let mut m = AdaptiveBinaryModel::new();
        let exact = bits.iter().all(|&b| dec.decode_bit(&mut m).unwrap() == b);
        let size = out.len() as f64;
        ok &= exact && size <= 1.02 * bound + 16.0;
        worst = worst.max(size / bound - 1.0);
        detail.push(format!("p={p}: {} B vs bound {bound:.0} B", out.len()));
    }
    (ok, format!("{}; worst overhead {:.3}% (limit 2% + 16 B)", detail.join(", "), 100.0 * worst))
}

fn laplace(r: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = r.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn c04_bottleneck() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (seed, scale) in [(40u64, 3.0), (41, 0.7)] {
        let mut store = ParamStore::new(seed);
        let c = 4;
        let eb = EntropyBottleneck::new(&mut store, "eb", c);
        let mut r = rng(seed);
        let rows = 2500;
        let x = Tensor::matrix(rows, c, (0..rows * c).map(|_| laplace(&mut r, scale)).collect());
        let q = quantize_latents(&x);
        let pmf = eb.pmf_table(&store).unwrap();
        let tables = eb.frequency_tables(&store).unwrap();
        let bytes = encode_latents(&q, c, &tables).unwrap();
        let back = decode_latents(&bytes, rows, c, &tables).unwrap();
        let ce = cross_entropy_bits(&q, c, &pmf) / 8.0;
        let actual = bytes.len() as f64;
        ok &= back == q && (actual - ce).abs() <= 0.05 * ce + 64.0;
        detail.push(format!("{} latents (scale {scale}): {actual} B vs estimate {ce:.1} B, roundtrip {}", q.len(), if back == q { "exact" } else { "BROKEN" }));
    }
    (ok, detail.join("; "))
}

fn c05_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let cases = common::all_cases();
    for case in &cases {
        let e = (case.run)();
        if !(e < common::TOL) {
            failures.push(case.name);
        }
        if e > worst.0 {
            worst = (e, case.name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        failures.is_empty() && secs < 300.0,
        format!(
            "{} cases, max rel err {:.2e} ({}), failures {failures:?}, {secs:.2}s",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

/// Plain-loop evaluation of one block: kNN attention with relative-position
/// encoding on keys and values, then a residual MLP.
fn evt_block_loops(store: &ParamStore, p: &EvtParams, coords: &[[u32; 3]], f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mlp = |m: &Mlp, x: &[f64]| -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in m.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let (w, b) = (store.get(l.w).data(), store.get(l.b).data());
            h = (0..l.fan_out)
                .map(|o| b[o] + (0..l.fan_in).map(|i| h[i] * w[i * l.fan_out + o]).sum::<f64>())
                .collect();
        }
        h
    };
    let n = coords.len();
    let d = p.d;
    let mut out = Vec::with_capacity(n);
    for qi in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        let dist = |j: usize| -> i64 { (0..3).map(|a| (coords[qi][a] as i64 - coords[j][a] as i64).pow(2)).sum() };
        order.sort_by_key(|&j| (dist(j), j));
        order.truncate(p.k);
        let q = mlp(&p.mlp_q, &f[qi]);
        let mut logits = Vec::new();
        let mut vals = Vec::new();
        for &j in &order {
            let rel: Vec<f64> = (0..3).map(|a| coords[qi][a] as f64 - coords[j][a] as f64).collect();
            let e = mlp(&p.mlp_p, &rel);
            let k: Vec<f64> = mlp(&p.mlp_k, &f[j]).iter().zip(&e).map(|(a, b)| a + b).collect();
            let v: Vec<f64> = mlp(&p.mlp_v, &f[j]).iter().zip(&e).map(|(a, b)| a + b).collect();
            logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (p.c * (d as f64).sqrt()));
            vals.push(v);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let h: Vec<f64> = (0..d)
            .map(|c| f[qi][c] + ex.iter().zip(&vals).map(|(w, v)| w / z * v[c]).sum::<f64>())
            .collect();
        let m = mlp(&p.mlp_out, &h);
        out.push(h.iter().zip(&m).map(|(a, b)| a + b).collect());
    }
    out
}

fn c06_transformer() -> Outcome {
    let (d, k) = (8, 8);
    let mut worst_sum = 0.0f64;
    let mut worst_ident = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for seed in 0..5u64 {
        let geom = common::small_geom(60 + seed, 20, 4);
        let feats = common::rand_tensor(&mut rng(70 + seed), 20, d, -1.0, 1.0);
        let mut store = ParamStore::new(80 + seed);
        let p = EvtParams::new(&mut store, "evt", d, 1.0, k);
        common::jitter_zero_params(&mut store, 90 + seed);

        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom.clone(), g.constant(feats.clone())).unwrap();
        let nb = Neighborhood::build(&geom, k);
        let (_, w) = self_attention_weights(&g, &t, &p, &nb).unwrap();
        let mut sums = vec![0.0; geom.len()];
        for (pair, &q) in nb.query.iter().enumerate() {
            sums[q] += w.value().data()[pair];
        }
        worst_sum = sums.iter().fold(worst_sum, |m, s| m.max((s - 1.0).abs()));

        let y = evt_block(&g, &t, &p).unwrap().feats.value();
        let rows: Vec<Vec<f64>> = (0..20).map(|r| feats.row(r).to_vec()).collect();
        let want = evt_block_loops(&store, &p, geom.coords(), &rows);
        for r in 0..20 {
            for c in 0..d {
                worst_oracle = worst_oracle.max((y.get(r, c) - want[r][c]).abs());
            }
        }

        let shifted: Vec<[u32; 3]> = geom.coords().iter().map(|c| [c[0] + 13, c[1] + 5, c[2] + 29]).collect();
        let sgeom = Rc::new(VoxelSet::new(shifted, 6));
        let ts = SparseTensor::new(sgeom, g.constant(feats.clone())).unwrap();
        let a = evt_cascade(&g, &t, &p, 3).unwrap().feats.value();
        let b = evt_cascade(&g, &ts, &p, 3).unwrap().feats.value();
        worst_shift = worst_shift.max(a.max_abs_diff(&b));

        let mut zstore = ParamStore::new(seed);
        let zp = EvtParams::new(&mut zstore, "evt", d, 1.0, k);
        zp.zero_residual_init(&mut zstore);
        let gz = Graph::with_params(&zstore);
        let tz = SparseTensor::new(geom.clone(), gz.constant(feats.clone())).unwrap();
        worst_ident = worst_ident.max(evt_block(&gz, &tz, &zp).unwrap().feats.value().max_abs_diff(&feats));
    }
    (
        worst_sum <= 1e-6 && worst_ident == 0.0 && worst_shift <= 1e-10 && worst_oracle <= 1e-10,
        format!(
            "weight-sum err {worst_sum:.1e}, zero-init identity err {worst_ident:.1e}, translation err {worst_shift:.1e}, loop oracle err {worst_oracle:.1e} (20 voxels x 5 seeds)"
        ),
    )
}

fn c07_training() -> Outcome {
    let t = Instant::now();
    let pc = synth_cloud(Shape::Sphere, 8, 2000, 7).unwrap();
    let mut cfg = CodecConfig::from_triple(5, 1, 2).unwrap();
    cfg.stage.c_point = 32;
    cfg.stage.c_voxel = 32;
    cfg.stage.c_latent = 16;
    let mut model = CodecModel::new(cfg).unwrap();
    let d1 = |m: &CodecModel| {
        let (_, dec) = pipeline::roundtrip(&pc, m).unwrap();
        psnr_d1(&pc, &dec.cloud.to_f64(), 8).unwrap()
    };
    let before = d1(&model);
    let tc = TrainConfig {
        epochs: 50,
        lr: 8e-4,
        batch_size: 1,
        samples_per_epoch: 16,
        augment: false,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &tc, std::slice::from_ref(&pc), &TrainOutputs::default(), |_, _| {}).unwrap();
    let after = d1(&model);
    let ratio = report.epoch_means.last().unwrap() / report.epoch_means[0];
    let secs = t.elapsed().as_secs_f64();
    (
        ratio <= 0.5 && after - before >= 3.0 && secs < 1800.0,
        format!(
            "[5,1,2] 2000-pt sphere, 50 epochs: loss {:.3} -> {:.3} (ratio {ratio:.3}, limit 0.5), D1 {before:.2} -> {after:.2} dB (gain {:.2}, limit 3), {secs:.0}s",
            report.epoch_means[0],
            report.epoch_means.last().unwrap(),
            after - before
        ),
    )
}

fn c08_metrics() -> Outcome {
    // Chamfer against a brute-force double loop.
    let mut r = rng(8);
    let mut chamfer_err = 0.0f64;
    for _ in 0..200 {
        let na = r.random_range(1..=50usize);
        let nb = r.random_range(1..=50usize);
        let mut pts = |n| (0..n).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect::<Vec<[f64; 3]>>();
        let (a, b) = (pts(na), pts(nb));
        let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            x.iter()
                .map(|p| y.iter().map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let want = directed(&a, &b).max(directed(&b, &a));
        chamfer_err = chamfer_err.max((chamfer_augmented(&a, &b).unwrap() - want).abs());
    }

    // Points on a stride-4 lattice, each shifted by one unit along x.
    let reference: Vec<[u32; 3]> = (0..6).flat_map(|i| (0..6).map(move |j| [4 * i, 4 * j, 8 * ((i + j) % 3)])).collect();
    let pc = dedup_sort(reference, 10).unwrap();
    let shifted: Vec<[f64; 3]> = pc.points().iter().map(|p| [p[0] as f64 + 1.0, p[1] as f64, p[2] as f64]).collect();
    let got = psnr_d1(&pc, &shifted, 10).unwrap();
    let want = 10.0 * (3.0 * 1023.0f64 * 1023.0).log10();
    let psnr_err = (got - want).abs();

    let anchor = [(0.1, 30.0), (0.25, 34.0), (0.6, 38.5), (1.4, 42.0)];
    let mut bd_err = 0.0f64;
    for pts in [&anchor[..], &anchor[..3]] {
        let a = RdCurve::new(pts.to_vec()).unwrap();
        let t = RdCurve::new(pts.iter().map(|&(r, d)| (0.9 * r, d)).collect()).unwrap();
        bd_err = bd_err.max((bd_metrics(&a, &t).unwrap().bd_rate + 10.0).abs() / 10.0);
    }
    (
        chamfer_err <= 1e-12 && psnr_err <= 1e-6 && bd_err <= 1e-3,
        format!(
            "chamfer vs brute force {chamfer_err:.1e}; unit-offset D1 {got:.9} dB vs {want:.9} dB; BD-rate of 0.9x curve rel err {bd_err:.1e}"
        ),
    )
}

fn parse_table(path: &Path) -> Vec<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn c09_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(
        &cfg,
        "c_point=16\nc_voxel=16\nc_latent=8\nepochs=10\nsamples_per_epoch=8\nbatch_size=1\naugment=false\n\
         shape=sphere\nbits=8\npoints=2000\ndata_seed=7\n",
    )
    .unwrap();
    let (table, svg, csv) = (dir.path().join("table.csv"), dir.path().join("rd.svg"), dir.path().join("rd.csv"));
    let out = Command::new(env!("CARGO_BIN_EXE_pvtc"))
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--triples", "7,0,1;6,1,1;5,2,1", "--table"])
        .arg(&table)
        .arg("--svg")
        .arg(&svg)
        .arg("--output")
        .arg(&csv)
        .output()
        .unwrap();
    if !out.status.success() {
        return (false, format!("sweep exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    let rows = parse_table(&table);
    let mut by_c: Vec<(u8, f64, f64)> = rows
        .iter()
        .map(|r| {
            let c: u8 = r["triple"].split('-').next().unwrap().parse().unwrap();
            (c, r["bpp"].parse().unwrap(), r["d1_psnr"].parse().unwrap())
        })
        .collect();
    by_c.sort_by(|a, b| b.0.cmp(&a.0));
    let decreasing = by_c.len() == 3 && by_c.windows(2).all(|w| w[1].1 < w[0].1);
    let curve_ok = RdCurve::new(by_c.iter().map(|r| (r.1, r.2)).collect()).is_ok();
    let svg_text = std::fs::read_to_string(&svg).unwrap_or_default();
    let svg_ok = svg_text.contains("<polyline") && svg_text.trim_end().ends_with("</svg>");

    // Reported only: where the lossless octree sits relative to the learned points.
    let pc = synth_cloud(Shape::Sphere, 8, 2000, 7).unwrap();
    let oct = pipeline::encode_octree_only(&pc).unwrap();
    let oct_bpp = pipeline::bpp(oct.len(), pc.len() as u64);
    let pts: Vec<String> = by_c.iter().map(|(c, b, d)| format!("c={c}: {b:.2} bpp / {d:.2} dB")).collect();
    (
        decreasing && curve_ok && svg_ok && table.exists() && csv.exists(),
        format!(
            "{}; bpp strictly decreasing with c: {decreasing}; valid curve: {curve_ok}; table and SVG written: {svg_ok}; [8,0,0] octree {oct_bpp:.2} bpp lossless (reported, not gated)",
            pts.join(", ")
        ),
    )
}

fn c10_determinism() -> Outcome {
    let pc = synth_cloud(Shape::Torus, 8, 1500, 5).unwrap();
    let mut cfg = CodecConfig::from_triple(4, 2, 2).unwrap();
    cfg.stage.c_point = 8;
    cfg.stage.c_voxel = 8;
    cfg.stage.c_latent = 4;
    let a = pipeline::encode(&pc, &CodecModel::new(cfg.clone()).unwrap()).unwrap();
    let model = CodecModel::new(cfg.clone()).unwrap();
    let same_enc = (0..3).all(|_| pipeline::encode(&pc, &model).unwrap() == a);
    let oct = CodecModel::new(CodecConfig::from_triple(8, 0, 0).unwrap()).unwrap();
    let same_oct = pipeline::encode(&pc, &oct).unwrap() == pipeline::encode(&pc, &oct).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        samples_per_epoch: 4,
        seed: 11,
        dataset: Dataset::Synthetic { shape: Shape::Torus, bits: 8, points: 1500, seed: 5 },
        ..TrainConfig::default()
    };
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    for i in 0..2 {
        let mut m = CodecModel::new(cfg.clone()).unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join(format!("m{i}.ckpt"))),
            loss_log: Some(dir.path().join(format!("loss{i}.csv"))),
        };
        train(&mut m, &tc, std::slice::from_ref(&pc), &out, |_, _| {}).unwrap();
        logs.push(std::fs::read(out.loss_log.unwrap()).unwrap());
        ckpts.push(std::fs::read(out.checkpoint.unwrap()).unwrap());
    }
    let same_log = logs[0] == logs[1] && !logs[0].is_empty();
    let same_ckpt = ckpts[0] == ckpts[1];
    (
        same_enc && same_oct && same_log && same_ckpt,
        format!(
            "learned container identical: {same_enc} ({} B); octree container identical: {same_oct}; loss logs identical: {same_log}; checkpoints identical: {same_ckpt}",
            a.len()
        ),
    )
}
