//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacnet::attention::{ita_update, similarity, sta_combine, AttentionState, QueryKeyPack};
use tacnet::config::RunConfig;
use tacnet::convlstm::{backward, forward, forward_trace, loss_of_trace, AttentionInputs, ConvLSTMParams};
use tacnet::metrics::{adapted_rand_index, dice, variation_of_information, LabelMap2D};
use tacnet::persistence::{betti_numbers, superlevel_diagram};
use tacnet::pipeline::{self, attend_stack, run_ablation, Dataset, Variant};
use tacnet::synth::generate;
use tacnet::train::{predict_center, train_backbone, Refinement, Stage};
use tacnet::{threshold, BinaryMask2D, ScalarField2D, SliceStack};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- oracles

/// 4-connected foreground components and bounded 8-connected background
/// components, by explicit flood fill on a one-pixel padded grid.
fn flood_betti(mask: &BinaryMask2D) -> (usize, usize) {
    let (h, w) = (mask.height() + 2, mask.width() + 2);
    let fg = |r: usize, c: usize| r > 0 && c > 0 && r < h - 1 && c < w - 1 && mask.get(r - 1, c - 1);
    let count = |want: bool, diagonal: bool| {
        let mut seen = vec![false; h * w];
        let mut n = 0;
        for s in 0..h * w {
            if seen[s] || fg(s / w, s % w) != want {
                continue;
            }
            n += 1;
            seen[s] = true;
            let mut stack = vec![s];
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if (dr == 0 && dc == 0) || (!diagonal && dr != 0 && dc != 0) {
                            continue;
                        }
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let j = rr as usize * w + cc as usize;
                        if !seen[j] && fg(rr as usize, cc as usize) == want {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        n
    };
    (count(true, false), count(false, true) - 1)
}

fn ari_pairs(pred: &[u32], gt: &[u32]) -> f64 {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    let (mut both, mut sp, mut sg) = (0u64, 0u64, 0u64);
    for &i in &idx {
        for &j in &idx {
            let a = pred[i] == pred[j];
            let b = gt[i] == gt[j];
            both += (a && b) as u64;
            sp += a as u64;
            sg += b as u64;
        }
    }
    let (p, r) = (both as f64 / sp as f64, both as f64 / sg as f64);
    2.0 * p * r / (p + r)
}

fn voi_histogram(pred: &[u32], gt: &[u32]) -> f64 {
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let (mut a, mut b): (BTreeMap<u32, f64>, BTreeMap<u32, f64>) = (BTreeMap::new(), BTreeMap::new());
    let mut n = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 0 {
            continue;
        }
        *joint.entry((p, g)).or_default() += 1.0;
        *a.entry(p).or_default() += 1.0;
        *b.entry(g).or_default() += 1.0;
        n += 1.0;
    }
    joint
        .iter()
        .map(|(&(p, g), &c)| {
            let pij = c / n;
            -pij * (pij / (a[&p] / n)).ln() - pij * (pij / (b[&g] / n)).ln()
        })
        .sum()
}

// ---------------------------------------------------------------- criteria

fn persistence_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut levels, mut bad) = (0usize, 0usize);
    for _ in 0..1000 {
        // few distinct values, so ties are common
        let f = ScalarField2D::from_fn(8, 8, |_, _| rng.gen_range(0..10) as f64 / 9.0).unwrap();
        let d = superlevel_diagram(&f);
        let mut values = f.values().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &alpha in &values {
            levels += 1;
            if flood_betti(&threshold(&f, alpha)) != d.betti_at(alpha) {
                bad += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(bad == 0 && secs < 30.0, format!("1000 fields, {levels} levels, {bad} mismatches, {secs:.2}s"))
}

fn betti_correctness() -> Outcome {
    let annulus = BinaryMask2D::from_ascii(&[".....", ".###.", ".#.#.", ".###.", "....."]).unwrap();
    let squares = BinaryMask2D::from_ascii(&["##...", "##...", ".....", "...##", "...##"]).unwrap();
    let empty = BinaryMask2D::empty(5, 5).unwrap();
    let examples = betti_numbers(&annulus) == (1, 1) && betti_numbers(&squares) == (2, 0) && betti_numbers(&empty) == (0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for i in 0..1000 {
        let density = 0.2 + 0.6 * (i as f64 / 1000.0);
        let m = BinaryMask2D::from_fn(16, 16, |_, _| rng.gen_bool(density)).unwrap();
        if betti_numbers(&m) != flood_betti(&m) {
            bad += 1;
        }
    }
    outcome(examples && bad == 0, format!("examples {}, 1000 random masks, {bad} mismatches", if examples { "ok" } else { "wrong" }))
}

fn attention_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let c = [1usize, 3, 5][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let n = h * w;
        let row: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let q: Vec<f64> = (0..c).flat_map(|_| row.clone()).collect();
        let k: Vec<f64> = (0..c * n).map(|_| rng.gen()).collect();
        let sm = similarity(&QueryKeyPack::from_parts(q, k, c, h, w).unwrap());
        for r in 0..n {
            worst = worst.max((sm.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let rows_ok = worst <= 1e-9;

    let p = ScalarField2D::from_fn(6, 5, |_, _| rng.gen()).unwrap();
    let o = ScalarField2D::from_fn(6, 5, |_, _| rng.gen()).unwrap();
    let identity = sta_combine(&p, &o, 0.0).unwrap() == p;

    let o1 = ScalarField2D::from_fn(6, 5, |_, _| rng.gen()).unwrap();
    let o2 = ScalarField2D::from_fn(6, 5, |_, _| rng.gen()).unwrap();
    let run = |beta: f64| {
        let mut s = AttentionState::new(beta, 0.0).unwrap();
        ita_update(&mut s, &o1).unwrap();
        ita_update(&mut s, &o2).unwrap()
    };
    let degenerate = run(0.0) == o2 && run(1.0) == o1;

    let mut s = AttentionState::new(0.5, 0.0).unwrap();
    ita_update(&mut s, &ScalarField2D::filled(3, 3, 0.8).unwrap()).unwrap();
    let blended = ita_update(&mut s, &ScalarField2D::filled(3, 3, 0.2).unwrap()).unwrap();
    let half = blended.values().iter().all(|&v| v == 0.5);

    outcome(
        rows_ok && identity && degenerate && half,
        format!("max |row sum - 1| = {worst:.1e}, identity {identity}, beta 0/1 {degenerate}, 0.8/0.2 blend {half}"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (hc, k, size, l, step) = (4usize, 3usize, 8usize, 3usize, 1e-4);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params = ConvLSTMParams::<f64>::init(hc, k, &mut rng).unwrap();
        params.attention_weight = rng.gen_range(-0.5..0.5);
        let stack = SliceStack::new((0..l).map(|_| ScalarField2D::from_fn(size, size, |_, _| rng.gen()).unwrap()).collect()).unwrap();
        let target = SliceStack::new(
            (0..l)
                .map(|_| ScalarField2D::from_fn(size, size, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).unwrap())
                .collect(),
        )
        .unwrap();
        let ys: Vec<&[f64]> = target.slices().iter().map(|s| s.values()).collect();

        // odd seeds exercise the attention path, with ITA history on every other one
        let probs = forward(&params, &stack).unwrap();
        let att_maps = tacnet::attention::TopologyAttention { epsilon: 0.01, sigma: 1.0 }.maps(&probs).unwrap();
        let o_prev: Vec<f64> = (0..size * size).map(|_| rng.gen()).collect();
        let attention = (seed % 2 == 1).then(|| AttentionInputs {
            similarity: &att_maps.similarity,
            o_prev: (seed % 4 == 3).then_some(o_prev.as_slice()),
            beta: 0.5,
        });

        let (_, grad) = backward(&params, &stack, &target, attention.as_ref()).unwrap();
        let analytic = grad.flat();
        let flat = params.flat();
        let loss_at = |flat: &[f64]| {
            let mut p = params.clone();
            p.set_flat(flat);
            let trace = forward_trace(&p, &stack).unwrap();
            loss_of_trace(&p, &trace, &ys, attention.as_ref()).unwrap().loss
        };
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += step;
            minus[i] -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 120.0, format!("20 seeds, max relative error {worst:.2e}, {secs:.1}s"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ari_err, mut voi_err, mut sym_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    while checked < 500 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let n = h * w;
        let k = rng.gen_range(1..6);
        let p: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=k)).collect();
        let g: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=k)).collect();
        if g.iter().all(|&v| v == 0) {
            continue;
        }
        checked += 1;
        let (pl, gl) = (LabelMap2D::new(w, h, p.clone()).unwrap(), LabelMap2D::new(w, h, g.clone()).unwrap());
        ari_err = ari_err.max((adapted_rand_index(&pl, &gl).unwrap() - ari_pairs(&p, &g)).abs());
        voi_err = voi_err.max((variation_of_information(&pl, &gl).unwrap() - voi_histogram(&p, &g)).abs());
        // symmetry holds when neither side has excluded pixels
        let (p1, g1): (Vec<u32>, Vec<u32>) = (p.iter().map(|v| v + 1).collect(), g.iter().map(|v| v + 1).collect());
        let (p1, g1) = (LabelMap2D::new(w, h, p1).unwrap(), LabelMap2D::new(w, h, g1).unwrap());
        let d = variation_of_information(&p1, &g1).unwrap() - variation_of_information(&g1, &p1).unwrap();
        sym_err = sym_err.max(d.abs());
    }
    let a = BinaryMask2D::from_ascii(&["##..", "##.."]).unwrap();
    let b = BinaryMask2D::from_ascii(&["#.#.", "#.#."]).unwrap();
    let c = BinaryMask2D::from_ascii(&["..##", "..##"]).unwrap();
    let dice_ok = dice(&a, &a).unwrap() == 1.0 && dice(&a, &c).unwrap() == 0.0 && dice(&a, &b).unwrap() == 0.5;
    let same = LabelMap2D::new(4, 1, vec![1, 1, 2, 2]).unwrap();
    let identity = adapted_rand_index(&same, &same).unwrap() == 1.0 && variation_of_information(&same, &same).unwrap() == 0.0;
    let pass = ari_err <= 1e-12 && voi_err <= 1e-12 && sym_err <= 1e-12 && dice_ok && identity;
    outcome(
        pass,
        format!("500 labelings, ARI err {ari_err:.1e}, VOI err {voi_err:.1e}, VOI asym {sym_err:.1e}, dice {dice_ok}, identity {identity}"),
    )
}

fn stage_two_start() -> Outcome {
    let config = RunConfig::from_file(desk_config()).unwrap();
    let spec = tacnet::synth::SyntheticSpec { depth: 6, height: 32, width: 32, ..config.synth.clone() };
    let data = Dataset::from_volume(&generate(&spec).unwrap()).unwrap();
    let tc = tacnet::train::TrainConfig { epochs: 3, patch: 16, ..config.train.clone() };
    let samples = pipeline::build_samples(&data, 0..6, tc.slices, tc.patch).unwrap();
    let backbone = train_backbone(&tc, &samples).unwrap().params;
    let mut identical = backbone.attention_weight == 0.0;
    for z in 0..6 {
        let stack = pipeline::window(&data.image, z, tc.slices, 0, 6).unwrap();
        let plain = predict_center(&backbone, &stack, &tacnet::train::TrainConfig { refinement: Refinement::None, ..tc.clone() }).unwrap();
        let refined = predict_center(&backbone, &stack, &tacnet::train::TrainConfig { refinement: Refinement::Attention, ..tc.clone() }).unwrap();
        let meta = tacnet::io::CheckpointMeta { stage: 1, slices: tc.slices, patch: tc.patch, beta: 0.5, sigma: 1.0, epsilon: 0.01 };
        let exported = attend_stack(&backbone, &meta, &stack).unwrap();
        identical &= plain == refined && exported.refined == exported.probability && exported.probability == plain;
    }
    outcome(identical, "attention_weight 0 leaves every center map bit-identical")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn betti_of(rows: &[pipeline::AblationRow], variant: Variant, slices: usize) -> f64 {
    rows.iter().find(|r| r.variant == variant && r.slices == slices).unwrap().betti_error.0
}

fn directional_ablation(data: &Dataset, config: &RunConfig) -> (Outcome, Vec<pipeline::AblationRow>) {
    let start = Instant::now();
    let rows = run_ablation(&{ let mut c = config.clone(); c.ablate_slices = vec![3]; c }, data).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (plain, sta, ita) =
        (betti_of(&rows, Variant::ConvLstm, 3), betti_of(&rows, Variant::Sta, 3), betti_of(&rows, Variant::StaIta, 3));
    let pass = ita <= plain && sta <= plain && secs < 600.0;
    (outcome(pass, format!("betti error convlstm {plain:.4}, +sta {sta:.4}, +sta+ita {ita:.4}; {secs:.0}s")), rows)
}

fn slice_count_ablation(data: &Dataset, config: &RunConfig, l3: &[pipeline::AblationRow]) -> Outcome {
    let rows = run_ablation(&{ let mut c = config.clone(); c.ablate_slices = vec![1]; c }, data).unwrap();
    let one = betti_of(&rows, Variant::StaIta, 1);
    let three = betti_of(l3, Variant::StaIta, 3);
    outcome(three <= one, format!("betti error l=1 {one:.4}, l=3 {three:.4}"))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "ablation_timing.csv" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_all_commands(root: &Path) {
    let mut c = RunConfig::from_file(desk_config()).unwrap();
    for (k, v) in [
        ("seed", "7"),
        ("synth.depth", "6"),
        ("synth.height", "24"),
        ("synth.width", "24"),
        ("synth.rings", "1"),
        ("patch", "12"),
        ("epochs", "2"),
        ("fine_tune_epochs", "2"),
        ("data.test_slices", "2"),
        ("eval.betti_patch", "12"),
        ("eval.betti_samples", "10"),
        ("ablate.seeds", "0"),
        ("ablate.slices", "1, 3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.data_dir = root.join("data");
    pipeline::cmd_gen_data(&c, &c.data_dir).unwrap();
    let run = root.join("run");
    pipeline::cmd_train(&c, Stage::Backbone, &run).unwrap();
    pipeline::cmd_train(&c, Stage::Tacnet, &run).unwrap();
    pipeline::cmd_attend(&c, run.join(pipeline::TACNET_CHECKPOINT), run.join("attend")).unwrap();
    pipeline::cmd_eval(&c, run.join("attend/phat.tact"), c.data_dir.join("membrane.tact"), run.join("eval")).unwrap();
    pipeline::cmd_ablate(&c, run.join("ablate")).unwrap();
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all_commands(a.path());
    run_all_commands(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<String> =
        ta.keys().chain(tb.keys()).filter(|k| ta.get(*k) != tb.get(*k)).map(|k| k.display().to_string()).collect();
    outcome(
        differing.is_empty() && ta.len() > 10,
        format!("{} files compared, differing: {:?}", ta.len(), differing),
    )
}

fn main() -> ExitCode {
    let mut out = std::io::stdout();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(out, "criterion {n} [{tag}] {name}: {}", o.detail).unwrap();
        out.flush().unwrap();
        failed += usize::from(!o.pass);
    };
    report(1, "persistence oracle", persistence_oracle());
    report(2, "betti numbers", betti_correctness());
    report(3, "attention algebra", attention_algebra());
    report(4, "gradient check", gradient_check());
    report(5, "metric oracles", metric_oracles());
    report(6, "stage-2 start equivalence", stage_two_start());

    let config = RunConfig::from_file(desk_config()).unwrap();
    let data = Dataset::from_volume(&generate(&config.synth).unwrap()).unwrap();
    let (o7, l3_rows) = directional_ablation(&data, &config);
    report(7, "directional ablation", o7);
    report(8, "slice-count ablation", slice_count_ablation(&data, &config, &l3_rows));
    report(9, "determinism", determinism());

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        writeln!(std::io::stdout(), "{failed} criteria failed").unwrap();
        ExitCode::FAILURE
    }
}
