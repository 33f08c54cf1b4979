//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cabm::autograd::Graph;
use cabm::checkpoint::Checkpoint;
use cabm::config::RunConfig;
use cabm::data::{mixed_scene, PatchDataset, SynthConfig};
use cabm::lut::{
    self, build_lut, build_lut_detailed, num_subintervals, subinterval_bounds, subinterval_index,
    subinterval_index_steps, Beta, LutParams,
};
use cabm::pipeline::{merge_patches, run_sr_with, split_patches, BitSource};
use cabm::quant::{quantize_scalar, step_size};
use cabm::recipe::{self, evaluate_held_out, held_out};
use cabm::selector::SelectorBank;
use cabm::supernet::{self, FullPrecision};
use cabm::train::{self, level_probabilities, DifficultyLevels, LevelSampler, Schedule};
use cabm::{BitConfig, BitRecord, EdgeScore, EdgeToBitLut, Strategy, Supernet, SupernetSpec, Tensor};

const F: f64 = 0.01;

/// Writes past the test harness capture so the line is always shown.
fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {id} {status}: {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn fixture(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn criterion_1_quantizer_properties() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let trials = 100_000;
    for i in 0..trials {
        let alpha: f64 = rng.gen_range(1e-3..10.0);
        let n: u32 = rng.gen_range(2..=16);
        let x: f64 = rng.gen_range(-2.0 * alpha..2.0 * alpha);
        let y: f64 = rng.gen_range(-2.0 * alpha..2.0 * alpha);
        let s = step_size(alpha, n).unwrap();
        let q = quantize_scalar(x, alpha, n);
        let clamped = x.clamp(-alpha, alpha);
        let k = q / s;
        let levels = ((1u64 << (n - 1)) - 1) as f64;
        let checks = [
            ("bounded error", (q - clamped).abs() <= s / 2.0 + 1e-12 * alpha),
            ("idempotence", quantize_scalar(q, alpha, n) == q),
            ("symmetry", quantize_scalar(-x, alpha, n) == -q),
            ("monotonicity", quantize_scalar(x.min(y), alpha, n) <= quantize_scalar(x.max(y), alpha, n)),
            ("grid membership", (k - k.round()).abs() < 1e-9 && k.round().abs() <= levels),
        ];
        for (name, ok) in checks {
            if !ok {
                failures.push(format!("#{i} {name}: x={x} alpha={alpha} n={n}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "quantizer suite",
        failures.is_empty() && secs < 10.0,
        &format!("{trials} triples, {} failures, {secs:.2}s (limit 10s) {:?}", failures.len(), failures.first()),
    );
}

fn tiny_spec() -> SupernetSpec {
    SupernetSpec {
        num_blocks: 1,
        channels: 4,
        scale: 2,
        ..SupernetSpec::default()
    }
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of the full-precision network under an l1 loss.
fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: Supernet<f64> = Supernet::<f32>::build(tiny_spec(), seed).unwrap().cast();
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = Tensor::<f64>::from_fn([1, 3, 5, 5], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::<f64>::from_fn([1, 3, 10, 10], |_| rng.gen_range(0.0..1.0));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let trace = net.forward_graph(&mut g, xv, &mut FullPrecision).unwrap();
    let loss = g.l1_loss(trace.output, &target).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = trace
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |n: &Supernet<f64>| {
        let out = n.forward_with(&x, &mut FullPrecision).unwrap();
        supernet::l1_loss(&out, &target).unwrap()
    };
    let eps = 1e-6;
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let count = net.params().len();
    for i in 0..count {
        let len = net.params()[i].numel();
        for j in 0..len {
            let orig = net.params()[i].data()[j];
            net.params_mut()[i].data_mut()[j] = orig + eps;
            let up = eval(&net);
            net.params_mut()[i].data_mut()[j] = orig - eps;
            let down = eval(&net);
            net.params_mut()[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

#[test]
fn criterion_2_gradient_oracle() {
    let errors: Vec<f64> = (0..20).map(gradient_error).collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    report(
        2,
        "gradient oracle (f64, full-precision path, 20 seeds)",
        worst < 1e-4,
        &format!("max relative error {worst:.3e} (limit 1e-4)"),
    );
}

#[test]
fn criterion_3_subinterval_algebra() {
    let mut bad = Vec::new();
    let r_max = 10_000;
    for r in 1..=r_max {
        let s = subinterval_bounds(r, F, 0, 0).unwrap();
        let next = subinterval_bounds(r + 1, F, 0, 0).unwrap();
        let (lo, hi) = (F * (r as f64 - 1.0) / 2.0, F * (5.0 * r as f64 - 1.0) / 10.0);
        let exact = s.hi_tenths - s.lo_tenths == 4
            && next.lo_tenths - s.lo_tenths == 5
            && s.lo_tenths == 5 * (r as i64 - 1)
            && (s.lo(F) - lo).abs() <= 1e-12 * lo.max(1.0)
            && (s.hi(F) - hi).abs() <= 1e-12 * hi.max(1.0)
            && ((s.hi(F) - s.lo(F)) - 0.4 * F).abs() <= 1e-9
            && ((next.lo(F) - s.lo(F)) - 0.5 * F).abs() <= 1e-9;
        if !exact {
            bad.push(format!("bounds r={r}"));
        }
    }
    // Every F-grid score whose index is below the clamp.
    for k in 0..(r_max as u64 - 1) / 2 + 1 {
        let r = subinterval_index(k as f64 * F, F, r_max);
        let s = subinterval_bounds(r, F, 0, 0).unwrap();
        if !s.contains_steps(k) || r != subinterval_index_steps(k, r_max) {
            bad.push(format!("index k={k} r={r}"));
        }
    }
    for de in [10u32, 20, 30, 40, 80] {
        for beta in [0usize, 4500, r_max] {
            for r in 1..=r_max {
                let s = subinterval_bounds(r, F, de, beta).unwrap();
                let superset = s.expanded_lo_tenths <= s.lo_tenths && s.expanded_hi_tenths >= s.hi_tenths;
                let strict = s.expanded_lo_tenths < s.lo_tenths && s.expanded_hi_tenths > s.hi_tenths;
                let shape_ok = if r > beta {
                    strict && s.lo_tenths - s.expanded_lo_tenths == 10 * de as i64
                } else {
                    s.expanded_lo_tenths == s.lo_tenths && s.expanded_hi_tenths == s.hi_tenths
                };
                if !superset || !shape_ok {
                    bad.push(format!("expansion de={de} beta={beta} r={r}"));
                }
            }
        }
    }
    report(
        3,
        "subinterval algebra (F=0.01, r up to 1e4, de in 10/20/30/40/80)",
        bad.is_empty(),
        &format!("{} violations {:?}", bad.len(), bad.first()),
    );
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<BitRecord> {
    let layers = 3;
    let macs: Vec<f64> = (0..layers).map(|_| rng.gen_range(1..50) as f64 * 100.0).collect();
    let count = rng.gen_range(1..200);
    let max_steps = rng.gen_range(0..80);
    (0..count)
        .map(|_| {
            let bits: Vec<u32> = (0..layers).map(|_| [4, 6, 8][rng.gen_range(0..3)]).collect();
            let bitops = bits.iter().zip(&macs).map(|(&b, m)| b as f64 * 8.0 * m).sum();
            BitRecord {
                edge: EdgeScore::from_steps(rng.gen_range(0..=max_steps), F).unwrap(),
                config: BitConfig::new(bits),
                bitops,
            }
        })
        .collect()
}

/// Candidate bitops of subinterval `r`, recomputed from the bounds' closed form.
fn oracle_candidates(records: &[BitRecord], r: usize, de: u32, beta: usize) -> Vec<f64> {
    let pad = if r > beta { de as f64 * F } else { 0.0 };
    let lo = F * (r as f64 - 1.0) / 2.0 - pad;
    let hi = F * (5.0 * r as f64 - 1.0) / 10.0 + pad;
    records
        .iter()
        .filter(|rec| rec.edge.value() >= lo - 1e-9 && rec.edge.value() <= hi + 1e-9)
        .map(|rec| rec.bitops)
        .collect()
}

#[test]
fn criterion_4_lut_strategy_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut order_bad, mut mono_bad, mut oracle_bad, mut checked) = (0, 0, 0, 0usize);
    for set in 0..100 {
        let records = random_records(&mut rng);
        let beta = if set % 2 == 0 { Beta::Auto } else { Beta::Index(rng.gen_range(0..40)) };
        let params = |strategy, de| LutParams {
            strategy,
            precision: F,
            de,
            beta,
            seed: set as u64,
        };
        let s1 = build_lut_detailed(&records, &params(Strategy::S1, 10)).unwrap();
        let s2 = build_lut_detailed(&records, &params(Strategy::S2, 10)).unwrap();
        let s3 = build_lut_detailed(&records, &params(Strategy::S3, 10)).unwrap();
        for r in 0..s1.selections.len() {
            let (a, b, c) = (s1.selections[r].bitops, s3.selections[r].bitops, s2.selections[r].bitops);
            checked += 1;
            if !(a <= b && b <= c) {
                order_bad += 1;
            }
        }
        let mut prev: Option<lut::LutBuild> = None;
        for de in [0u32, 10, 20, 30, 40, 80] {
            let cur = build_lut_detailed(&records, &params(Strategy::S1, de)).unwrap();
            let beta_idx = cur.lut.beta();
            for (i, sel) in cur.selections.iter().enumerate() {
                let cands = oracle_candidates(&records, i + 1, de, beta_idx);
                let min = cands.iter().cloned().fold(f64::INFINITY, f64::min);
                if cands.len() != sel.candidates || (!cands.is_empty() && min != sel.bitops) {
                    oracle_bad += 1;
                }
            }
            if let Some(p) = &prev {
                for (old, new) in p.selections.iter().zip(&cur.selections) {
                    if old.candidates > 0 && new.bitops > old.bitops {
                        mono_bad += 1;
                    }
                }
            }
            prev = Some(cur);
        }
    }
    report(
        4,
        "LUT strategy ordering and expansion monotonicity (100 record sets)",
        order_bad == 0 && mono_bad == 0 && oracle_bad == 0,
        &format!(
            "{checked} subintervals; ordering violations {order_bad}, de-monotonicity violations {mono_bad}, oracle mismatches {oracle_bad}"
        ),
    );
}

#[test]
fn criterion_5_level_probabilities() {
    let bucket = |c: f64| vec![(BitConfig::new(vec![c as u32]), c)];
    let levels = DifficultyLevels::from_buckets([bucket(1.0), bucket(2.0), bucket(3.0)]);
    let p = level_probabilities(&levels).unwrap();
    let exact = p == [1.0 / 14.0, 4.0 / 14.0, 9.0 / 14.0];

    let net = Supernet::build(tiny_spec(), 5).unwrap();
    let real = DifficultyLevels::for_net(&net, 12, 12).unwrap();
    let mut worst: f64 = 0.0;
    for lv in [&levels, &real] {
        let sampler = LevelSampler::new(lv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[sampler.sample_level(&mut rng)] += 1;
        }
        for (c, q) in counts.iter().zip(sampler.probabilities()) {
            worst = worst.max((*c as f64 / draws as f64 - q).abs());
        }
    }
    report(
        5,
        "level probabilities",
        exact && worst <= 0.02,
        &format!("hand case {p:?} exact={exact}; max Monte-Carlo deviation {worst:.4} at 1e4 draws (limit 0.02)"),
    );
}

#[test]
fn criterion_6_end_to_end_direction() {
    let start = std::time::Instant::now();
    let cfg = RunConfig::default();
    let art = recipe::run(&cfg).unwrap();
    let images = held_out(12, cfg.data.hr_size, cfg.model.scale, cfg.seed.wrapping_add(1000)).unwrap();
    let patch = cfg.data.lr_patch;
    let top = recipe::top_config(&art.baseline);
    let base = evaluate_held_out(&images, &art.baseline, BitSource::Fixed(&top), patch).unwrap();
    let raw = evaluate_held_out(&images, &art.supernet, BitSource::Lut(&art.lut), patch).unwrap();
    let tuned = evaluate_held_out(&images, &art.finetuned, BitSource::Lut(&art.lut), patch).unwrap();

    let a = tuned.summary.psnr >= base.summary.psnr - 0.3;
    let b = tuned.summary.fab < 8.0;
    let c = tuned.summary.psnr > raw.summary.psnr;
    // Flat and textured patches: below and above the median edge score.
    let mut patches: Vec<(u64, f64)> = tuned
        .results
        .iter()
        .flat_map(|r| r.per_patch.iter().map(|p| (p.edge.steps(), p.config.fab())))
        .collect();
    patches.sort_by_key(|p| p.0);
    let median = patches[patches.len() / 2].0;
    let mean_fab = |keep: &dyn Fn(u64) -> bool| {
        let v: Vec<f64> = patches.iter().filter(|p| keep(p.0)).map(|p| p.1).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (flat_fab, textured_fab) = (mean_fab(&|e| e < median), mean_fab(&|e| e >= median));
    let d = flat_fab <= textured_fab;
    let line = format!(
        "fixed-8 {:.3} dB; CABM {:.3} dB (a: within 0.3 dB {a}); FAB {:.3} (b: below 8 {b}); \
         without fine-tuning {:.3} dB (c: {c}); FAB flat {flat_fab:.3} vs textured {textured_fab:.3} \
         (d: {d}); by image family {:.3} vs {:.3}; {:.0}s",
        base.summary.psnr,
        tuned.summary.psnr,
        tuned.summary.fab,
        raw.summary.psnr,
        tuned.smooth_fab,
        tuned.textured_fab,
        start.elapsed().as_secs_f64()
    );

    // Per-patch l1 sensitivity to the activation width, by edge tercile.
    let data = cfg.dataset().unwrap();
    let layers = art.baseline.quantized_layers();
    let mut rows: Vec<(u64, [f64; 2])> = (0..data.len())
        .map(|i| {
            let mut v = [0.0; 2];
            for (k, bit) in [4u32, 6].into_iter().enumerate() {
                let (out, _) = art.baseline.forward_with_bits(&data.lr[i], &BitConfig::uniform(bit, layers)).unwrap();
                v[k] = supernet::l1_loss(&out, &data.hr[i]).unwrap();
            }
            (data.edges[i].steps(), v)
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let diag: Vec<String> = rows
        .chunks(rows.len().div_ceil(3))
        .map(|ch| {
            let d = ch.iter().map(|r| r.1[0] - r.1[1]).sum::<f64>() / ch.len() as f64;
            format!("edge<={:.2}: {d:.5}", ch.last().unwrap().0 as f64 * F)
        })
        .collect();
    let _ = std::io::stderr()
        .lock()
        .write_all(format!("[acceptance] criterion 6 note: l1 increase from 6 to 4 bits by edge tercile: {}\n", diag.join(", ")).as_bytes());
    report(6, "end-to-end direction check", a && b && c && d, &line);
}

#[test]
fn criterion_7_pipeline_identity_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = 0;
    for _ in 0..50 {
        let (h, w, p) = (rng.gen_range(1..130), rng.gen_range(1..130), rng.gen_range(1..100));
        let img = Tensor::<f32>::from_fn([1, 3, h, w], |_| rng.gen_range(0.0..1.0));
        let (grid, patches) = split_patches(&img, p).unwrap();
        if merge_patches(&grid, &patches, 1).unwrap() != img {
            bad += 1;
        }
    }

    let run_once = || {
        let spec = tiny_spec();
        let data = PatchDataset::synthetic(
            &SynthConfig {
                images: 6,
                hr_size: 24,
                scale: 2,
                lr_patch: 6,
                seed: 3,
            },
            F,
        )
        .unwrap();
        let mut net = Supernet::build(spec, 9).unwrap();
        let mut bank = SelectorBank::for_net(&net, F, 9).unwrap();
        let sched = Schedule {
            epochs: 1,
            lambda: 0.01,
            seed: 9,
            ..Schedule::default()
        };
        train::train_supernet(&mut net, &mut bank, &data, &sched).unwrap();
        let records = lut::collect_records(&net, &bank, &data.lr).unwrap();
        let table = build_lut(&records, &LutParams::default()).unwrap();
        let img = mixed_scene(20, 28, &mut ChaCha8Rng::seed_from_u64(9));
        let (sr, result) = run_sr_with(&img, &net, BitSource::Lut(&table), None, 8).unwrap();
        (sr, result, table.to_text())
    };
    let (a, b) = (run_once(), run_once());
    let same_bits = a.0.data().iter().zip(b.0.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let deterministic = same_bits && a.1 == b.1 && a.2 == b.2;
    report(
        7,
        "pipeline identity and determinism",
        bad == 0 && deterministic,
        &format!("merge(split) mismatches {bad}/50; repeated run bit-identical {deterministic}"),
    );
}

#[test]
fn criterion_8_serialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lut_bad = 0;
    for i in 0..200 {
        let precision = [0.01, 0.02, 0.005, 0.1, 0.25][i % 5];
        let layers = rng.gen_range(1..6);
        let entries: Vec<BitConfig> = (0..rng.gen_range(1..60))
            .map(|_| BitConfig::new((0..layers).map(|_| [4, 6, 8, 32][rng.gen_range(0..4)]).collect()))
            .collect();
        let strategy = [Strategy::S1, Strategy::S2, Strategy::S3][i % 3];
        let table = EdgeToBitLut::from_entries(precision, entries, strategy, rng.gen_range(0..100), rng.gen_range(0..60)).unwrap();
        let text = table.to_text();
        let back = EdgeToBitLut::parse(&text).unwrap();
        let grid_ok = (0..2 * table.num_subintervals() as u64).all(|k| {
            let e = EdgeScore::from_steps(k, precision).unwrap();
            back.lookup(e) == table.lookup(e)
        });
        if back != table || back.to_text() != text || !grid_ok {
            lut_bad += 1;
        }
    }

    let mut ck_bad = 0;
    for seed in 0..5 {
        let net = Supernet::build(tiny_spec(), seed).unwrap();
        let bank = SelectorBank::for_net(&net, F, seed).unwrap();
        let ck = Checkpoint::new(net, Some(bank));
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        let bits = |n: &Supernet| -> Vec<u32> { n.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
        if bits(&back.net) != bits(&ck.net) || back.selectors != ck.selectors || back.to_json().unwrap() != text {
            ck_bad += 1;
        }
    }

    let records = lut::records_from_csv(&fixture("records.csv"), F).unwrap();
    let golden_text = fixture("records_s1_de10.lut");
    let golden = EdgeToBitLut::parse(&golden_text).unwrap();
    let built = build_lut(&records, &LutParams::default()).unwrap();
    let golden_ok = records.len() == 5 && built == golden && built.to_text() == golden_text;

    let two = EdgeToBitLut::parse(&fixture("two_entry.lut")).unwrap();
    let two_ok = two.precision() == 0.02
        && two.num_subintervals() == 2
        && two.layers() == 3
        && two.strategy() == Strategy::S2
        && (two.de(), two.beta()) == (0, 1)
        && two.entry(1) == &BitConfig::new(vec![4, 6, 8])
        && two.entry(2) == &BitConfig::new(vec![8, 8, 8]);
    report(
        8,
        "serialization",
        lut_bad == 0 && ck_bad == 0 && golden_ok && two_ok,
        &format!("LUT round-trip failures {lut_bad}/200, checkpoint failures {ck_bad}/5, golden LUT {golden_ok}, two-entry fixture {two_ok}"),
    );
}

#[test]
fn criterion_9_cost_model() {
    let mut ok = true;
    let mut details = Vec::new();
    for spec in [tiny_spec(), SupernetSpec::default()] {
        let net: Supernet = Supernet::build(spec, 0).unwrap();
        let layers = net.quantized_layers();
        let c8 = net.cost(&BitConfig::uniform(8, layers), 24, 24).unwrap();
        let c32 = net.cost(&BitConfig::uniform(32, layers), 24, 24).unwrap();
        let ratio = c32.quantized_bitops() / c8.quantized_bitops();
        let total_ratio = c32.total_bitops / c8.total_bitops;
        ok &= c8.fab == 8.0 && ratio == 16.0 && num_subintervals(0.0, F).unwrap() == 1;
        details.push(format!(
            "{} layers: FAB(all-8) {}, quantized-layer ratio {ratio}, whole-network ratio {total_ratio:.4}",
            layers, c8.fab
        ));
    }
    report(9, "cost model", ok, &details.join("; "));
}
