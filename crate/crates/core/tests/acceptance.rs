//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run outputs land under
//! `$CARGO_TARGET_TMPDIR/acceptance`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpn_core::gradcheck::{run_suite, GradTarget, Tolerance};
use mpn_core::harness::{evaluate, evaluate_retrieval, load_dataset, run_config, EvalResult, TrainConfig, TrainOutcome};
use mpn_core::losses::{ntuple_loss, triplet_soft_margin, triplet_soft_margin_softmax, InverseTemperature};
use mpn_core::math::{log_softmax, similarity, softplus, Matrix, SimilarityKind};
use mpn_core::meta::MetaLearnerParams;
use mpn_core::sampling::{count_prototype_tuples, count_tuples, enumerate_tuples};

const DEGENERACY_TOL: f64 = 1e-12;
const DEGENERACY_PAIRS: usize = 100_000;
const DEGENERACY_BUDGET: Duration = Duration::from_secs(5);
const GRAD_TRIALS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const EVAL_TRIALS: usize = 1000;
const MAX_GALLERY: usize = 20;
const BENCH_SEEDS: u64 = 5;
const RUN_BUDGET: Duration = Duration::from_secs(300);
const HIST_MIN_SEEDS: usize = 4;
const EXTREME_LOGIT: f64 = 1e4;

struct Verdict {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { id, passed, detail }
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn degeneracy() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_tuple = 0.0f64;
    let mut worst_forms = 0.0f64;
    for _ in 0..DEGENERACY_PAIRS {
        let s_pos: f64 = rng.gen_range(-1.0..=1.0);
        let s_neg: f64 = rng.gen_range(-1.0..=1.0);
        // 1-d inner products reproduce the drawn similarities exactly
        let tuple = ntuple_loss(&[1.0], &[s_pos], &[&[s_neg]], InverseTemperature::unit(), SimilarityKind::InnerProduct)
            .unwrap()
            .value;
        let soft = triplet_soft_margin(s_pos, s_neg).unwrap().value;
        let softmax_form = triplet_soft_margin_softmax(s_pos, s_neg).unwrap();
        worst_tuple = worst_tuple.max((tuple - soft).abs());
        worst_forms = worst_forms.max((softmax_form - soft).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        "1 degeneracy",
        worst_tuple < DEGENERACY_TOL && worst_forms < DEGENERACY_TOL && elapsed < DEGENERACY_BUDGET,
        format!("max |tuple-soft| {worst_tuple:.3e}, max |softmax-softplus| {worst_forms:.3e}, {elapsed:.2?}"),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for target in GradTarget::ALL {
        let report = run_suite(target, GRAD_TRIALS, 0, Tolerance::default()).unwrap();
        worst = worst.max(report.max_rel_error);
        if !report.passed() {
            failed.push(format!("{} ({}/{})", target.name(), report.failures, report.trials));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "2 gradients",
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!("{} targets x {GRAD_TRIALS}, max rel err {worst:.2e}, failed [{}], {elapsed:.2?}", GradTarget::ALL.len(), failed.join(", ")),
    )
}

fn counting() -> Verdict {
    let pairs = count_tuples(16, 4, 2).unwrap();
    let proto = count_prototype_tuples(16, 4, 16).unwrap();
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for p in 1..=4usize {
        for k in 1..=3usize {
            for n in 2..=p {
                let labels: Vec<usize> = (0..p).flat_map(|c| std::iter::repeat(c).take(k)).collect();
                let formula = count_tuples(p, k, n).ok();
                let listed = enumerate_tuples(&labels, n).ok().map(|t| t.len() as u128);
                checked += 1;
                if formula != listed {
                    mismatches.push(format!("P{p}K{k}N{n}: {formula:?} vs {listed:?}"));
                }
            }
        }
    }
    verdict(
        "3 counting",
        pairs == 11520 && proto == 64 && mismatches.is_empty(),
        format!("count(16,4,2) = {pairs}, prototype(16,4,16) = {proto}, {checked} shapes, mismatches [{}]", mismatches.join("; ")),
    )
}

/// Ranks are computed independently: items before `g` are those with a
/// strictly higher similarity, or an equal one at a lower index.
fn brute_force(query: &Matrix, ql: &[usize], gallery: &Matrix, gl: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = gallery.rows();
    let mut first = vec![0usize; n];
    let mut aps = Vec::new();
    for q in 0..query.rows() {
        let sims: Vec<f64> =
            (0..n).map(|g| similarity(query.row(q), gallery.row(g), SimilarityKind::Cosine).unwrap()).collect();
        let rank = |g: usize| 1 + (0..n).filter(|&h| sims[h] > sims[g] || (sims[h] == sims[g] && h < g)).count();
        let mut pos: Vec<usize> = (0..n).filter(|&g| gl[g] == ql[q]).map(rank).collect();
        pos.sort_unstable();
        first[pos[0] - 1] += 1;
        let mut sum = 0.0;
        for (i, r) in pos.iter().enumerate() {
            sum += (i + 1) as f64 / *r as f64;
        }
        aps.push(sum / pos.len() as f64);
    }
    let mut cmc = Vec::new();
    let mut running = 0;
    for c in first {
        running += c;
        cmc.push(running as f64 / query.rows() as f64);
    }
    (cmc, aps)
}

fn evaluation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for _ in 0..EVAL_TRIALS {
        let dim = rng.gen_range(1..=4);
        let ids = rng.gen_range(1..=5);
        let n_gallery = rng.gen_range(ids..=MAX_GALLERY);
        let n_query = rng.gen_range(1..=6);
        // coarse integer features produce tied similarities
        let mut draw = |rows: usize| Matrix::from_fn(rows, dim, |_, _| rng.gen_range(-2..=2) as f64 + 0.5);
        let gallery = draw(n_gallery);
        let query = draw(n_query);
        let mut gl: Vec<usize> = (0..n_gallery).map(|g| if g < ids { g } else { rng.gen_range(0..ids) }).collect();
        for i in (1..gl.len()).rev() {
            gl.swap(i, rng.gen_range(0..=i));
        }
        let ql: Vec<usize> = (0..n_query).map(|_| rng.gen_range(0..ids)).collect();
        let got = evaluate_retrieval(&query, &ql, &gallery, &gl).unwrap();
        let (cmc, aps) = brute_force(&query, &ql, &gallery, &gl);
        let map = aps.iter().sum::<f64>() / n_query as f64;
        let at = |k: usize| cmc[k.min(n_gallery) - 1];
        let same = got.cmc == cmc
            && got.ap == aps
            && got.map == map
            && got.rank1 == at(1)
            && got.rank5 == at(5)
            && got.rank10 == at(10);
        mismatches += usize::from(!same);
        let monotone = got.cmc.windows(2).all(|w| w[0] <= w[1]) && got.rank1 <= got.rank5 && got.rank5 <= got.rank10;
        non_monotone += usize::from(!monotone);
    }
    verdict(
        "4 evaluation",
        mismatches == 0 && non_monotone == 0,
        format!("{EVAL_TRIALS} instances, {mismatches} oracle mismatches, {non_monotone} non-monotone CMC"),
    )
}

const METHODS: [(&str, &str); 4] = [
    ("ntuple_n2", "tuple_loss = ntuple\nn_classes = 2\nstages = none\n"),
    ("ntuple_n8", "tuple_loss = ntuple\nn_classes = 8\nstages = none\n"),
    ("soft_triplet", "tuple_loss = soft_triplet\nn_classes = 2\nstages = none\n"),
    ("mpn_tuple", "tuple_loss = mpn_tuple\nn_classes = 8\n"),
];

struct Bench {
    /// `maps[method][seed]`
    maps: Vec<Vec<f64>>,
    slowest: Duration,
    mpn: Vec<(TrainConfig, TrainOutcome)>,
}

fn bench_config(method: &str, seed: u64) -> TrainConfig {
    let body = METHODS.iter().find(|(m, _)| *m == method).unwrap().1;
    TrainConfig::parse_text(&format!("seed = {seed}\ndata_seed = {seed}\n{body}")).unwrap()
}

fn run_bench() -> Bench {
    let mut maps = vec![Vec::new(); METHODS.len()];
    let mut slowest = Duration::ZERO;
    let mut mpn = Vec::new();
    for (m, (name, _)) in METHODS.iter().enumerate() {
        for seed in 0..BENCH_SEEDS {
            let config = bench_config(name, seed);
            let start = Instant::now();
            let outcome = run_config(&config, &out_root().join(format!("{name}_seed{seed}"))).unwrap();
            slowest = slowest.max(start.elapsed());
            maps[m].push(outcome.final_eval.map);
            if *name == "mpn_tuple" {
                mpn.push((config, outcome));
            }
        }
    }
    Bench { maps, slowest, mpn }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn benchmark(bench: &Bench) -> (Verdict, Verdict) {
    let med: Vec<f64> = bench.maps.iter().map(|m| median(m)).collect();
    let (n2, n8, tri, mpn) = (med[0], med[1], med[2], med[3]);
    let mut table = String::from("seed");
    for (name, _) in METHODS {
        write!(table, ",{name}").unwrap();
    }
    table.push('\n');
    for s in 0..BENCH_SEEDS as usize {
        write!(table, "{s}").unwrap();
        for m in &bench.maps {
            write!(table, ",{}", m[s]).unwrap();
        }
        table.push('\n');
    }
    write!(table, "median,{n2},{n8},{tri},{mpn}\nmargin_n8_minus_n2,{}\nmargin_mpn_minus_soft_triplet,{}\n", n8 - n2, mpn - tri)
        .unwrap();
    fs::write(out_root().join("benchmark.csv"), table).unwrap();
    let in_budget = bench.slowest < RUN_BUDGET;
    let timing = format!("slowest run {:.2?}", bench.slowest);
    (
        verdict(
            "5a n8 >= n2",
            n8 >= n2 && in_budget,
            format!("median mAP n8 {n8:.4} vs n2 {n2:.4}, margin {:+.4}, {timing}", n8 - n2),
        ),
        verdict(
            "5b mpn > soft",
            mpn > tri && in_budget,
            format!("median mAP mpn {mpn:.4} vs soft triplet {tri:.4}, margin {:+.4}, {timing}", mpn - tri),
        ),
    )
}

fn histogram(bench: &Bench) -> (Verdict, Verdict) {
    let mut lines = String::from("seed,stage2_original,stage2_meta,final_original,final_meta\n");
    let (mut compact, mut closing) = (0, 0);
    for (config, outcome) in &bench.mpn {
        let get = |tag: &str| &outcome.histograms.iter().find(|(t, _)| t == tag).unwrap().1;
        let (s2, fin) = (get("stage2"), get("final"));
        let gap2 = s2.mean_original - s2.mean_meta;
        let gap_final = fin.mean_original - fin.mean_meta;
        compact += usize::from(s2.mean_meta < s2.mean_original);
        closing += usize::from(gap_final < gap2);
        writeln!(lines, "{},{},{},{},{}", config.seed, s2.mean_original, s2.mean_meta, fin.mean_original, fin.mean_meta)
            .unwrap();
    }
    fs::write(out_root().join("histogram_gaps.csv"), lines).unwrap();
    let n = bench.mpn.len();
    (
        verdict("6a meta compact", compact >= HIST_MIN_SEEDS, format!("{compact}/{n} seeds with meta mean < original mean at stage 2")),
        verdict("6b gap closes", closing >= HIST_MIN_SEEDS, format!("{closing}/{n} seeds with final gap < stage-2 gap")),
    )
}

fn bits(r: &EvalResult) -> Vec<u64> {
    [r.rank1, r.rank5, r.rank10, r.map].iter().chain(&r.cmc).chain(&r.ap).map(|v| v.to_bits()).collect()
}

fn inference(bench: &Bench) -> Verdict {
    let (config, outcome) = &bench.mpn[0];
    let dataset = load_dataset(config).unwrap();
    let before = evaluate(&outcome.model, &dataset, config.protocol).unwrap();
    let mut model = outcome.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    model.meta = MetaLearnerParams::init(config.dim, config.reduction, &mut rng).unwrap();
    for v in model.meta.bn_scale.iter_mut().chain(model.meta.bn_shift.iter_mut()).chain(model.meta.bn_running_mean.iter_mut()) {
        *v = rng.gen_range(-3.0..3.0);
    }
    let after = evaluate(&model, &dataset, config.protocol).unwrap();
    let same = bits(&before) == bits(&after);
    let changed = model.meta != outcome.model.meta;
    verdict("7 inference", same && changed, format!("phi re-randomized: {changed}, EvalResult bit-identical: {same}"))
}

fn determinism() -> Verdict {
    let config = TrainConfig::parse_text("epochs = 12\nstages = 6,9\n").unwrap();
    let files = ["metrics.csv", "histogram_means.csv", "histogram_stage2.csv", "histogram_final.csv"];
    let dirs = [out_root().join("determinism_a"), out_root().join("determinism_b")];
    for d in &dirs {
        run_config(&config, d).unwrap();
    }
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| fs::read(dirs[0].join(f)).unwrap() != fs::read(dirs[1].join(f)).unwrap()).collect();
    let logits = [EXTREME_LOGIT, -EXTREME_LOGIT, 0.0, EXTREME_LOGIT];
    let finite = log_softmax(&logits).unwrap().iter().all(|v| v.is_finite())
        && log_softmax(&logits.map(|v| -v)).unwrap().iter().all(|v| v.is_finite())
        && [EXTREME_LOGIT, -EXTREME_LOGIT, 0.0].iter().all(|&x| softplus(x).is_finite());
    verdict(
        "8 determinism",
        differing.is_empty() && finite,
        format!("{} CSVs compared, differing [{}], finite at |logit| {EXTREME_LOGIT:e}: {finite}", files.len(), differing.join(", ")),
    )
}

fn main() -> ExitCode {
    fs::create_dir_all(out_root()).unwrap();
    let mut verdicts = vec![degeneracy(), gradients(), counting(), evaluation()];
    let bench = run_bench();
    let (a, b) = benchmark(&bench);
    let (c, d) = histogram(&bench);
    verdicts.extend([a, b, c, d, inference(&bench), determinism()]);
    let mut report = String::new();
    for v in &verdicts {
        let line = format!("{} {:<18} {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.detail);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    fs::write(out_root().join("verdicts.txt"), report).unwrap();
    println!("outputs in {}", out_root().display());
    if verdicts.iter().all(|v| v.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
