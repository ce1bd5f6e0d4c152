//! Acceptance run over the synthetic benchmark. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any criterion fails.
//!
//! Benchmark: 2000 origins, dim 256, W trained on profile "seen"
//! (sigma_resid 0.6) at strength 0.9 with 10 translations per origin, then
//! scored on held-out origins for "seen" and two unseen profiles.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use oid_core::embedding::{EmbeddingSet, ProjectionMatrix};
use oid_core::eval::{evaluate, evaluate_projection, Metrics};
use oid_core::format::GroundTruth;
use oid_core::loss::{projected_loss_and_grad, LossKind, LossParams};
use oid_core::matcher::{build_index, measure_scan, search, Hit, MatchResult};
use oid_core::rng::{gaussian_vec, substream};
use oid_core::sim::{generate_dataset, NoiseSchedule, ResidualSpectrum, SimDataset, SimModelProfile};
use oid_core::spectral::{alignment_residual_by_truth, sv_cosine};
use oid_core::train::train;

use oid_suite as bench;

type Check = Result<(bool, String), String>;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn record(lines: &mut Vec<Line>, id: usize, name: &'static str, f: impl FnOnce() -> Check) {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let line = Line {
        id,
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} {:>2} {}: {} [{:.1}s]",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail,
        line.seconds
    );
    lines.push(line);
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_oracle() -> Check {
    let kinds = [LossKind::CosFace, LossKind::Circle, LossKind::Softmax];
    let per_kind = 100;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (ki, &kind) in kinds.iter().enumerate() {
        let params = LossParams::defaults(kind);
        for i in 0..per_kind {
            let mut rng = substream(11, &[ki as u64, i as u64]);
            let b = rng.gen_range(2..=8);
            let m = rng.gen_range(2..=32);
            let gen = Array2::from_shape_vec((b, m), gaussian_vec(&mut rng, b * m)).map_err(err)?;
            let orig = Array2::from_shape_vec((b, m), gaussian_vec(&mut rng, b * m)).map_err(err)?;
            let mut labels: Vec<usize> = (0..b).collect();
            labels.shuffle(&mut rng);
            let out = projected_loss_and_grad(&params, gen.view(), orig.view(), &labels).map_err(err)?;
            let h = 1e-6;
            let fd_gen = bench::central_difference(
                |g| projected_loss_and_grad(&params, g.view(), orig.view(), &labels).unwrap().loss,
                &gen,
                h,
            );
            let fd_orig = bench::central_difference(
                |o| projected_loss_and_grad(&params, gen.view(), o.view(), &labels).unwrap().loss,
                &orig,
                h,
            );
            worst = worst
                .max(bench::relative_error(&out.grad_gen, &fd_gen))
                .max(bench::relative_error(&out.grad_origins, &fd_orig));
            count += 1;
        }
    }
    Ok((
        worst <= 1e-4,
        format!("{count} instances (b<=8, m<=32), worst relative error {worst:.2e} (tol 1e-4)"),
    ))
}

fn fit(data: &SimDataset, profile: &str, rank: usize, loss: LossKind, seed: u64) -> Result<ProjectionMatrix, String> {
    let gen = data
        .queries(profile, bench::TRAIN_STRENGTH)
        .ok_or_else(|| format!("no training queries for {profile}"))?;
    let out = train(
        data.origins(),
        gen,
        data.ground_truth(),
        &bench::train_config(rank, loss, seed),
    )
    .map_err(err)?;
    Ok(out.w)
}

struct Bench {
    train: SimDataset,
    test: SimDataset,
    main: ProjectionMatrix,
    setup_seconds: f64,
}

impl Bench {
    fn queries(&self, profile: &str, strength: f64) -> Result<&EmbeddingSet, String> {
        self.test
            .queries(profile, strength)
            .ok_or_else(|| format!("no test queries for {profile} at {strength}"))
    }

    fn metrics(&self, profile: &str, strength: f64, w: Option<&ProjectionMatrix>) -> Result<Metrics, String> {
        evaluate_projection(
            self.test.origins(),
            self.queries(profile, strength)?,
            self.test.ground_truth(),
            w,
            bench::N_ORIGINS,
        )
        .map_err(err)
    }

    fn map(&self, profile: &str, w: Option<&ProjectionMatrix>) -> Result<f64, String> {
        Ok(self.metrics(profile, bench::TRAIN_STRENGTH, w)?.map)
    }

    fn unseen(&self, w: Option<&ProjectionMatrix>) -> Result<f64, String> {
        let mut sum = 0.0;
        for p in bench::UNSEEN {
            sum += self.map(p, w)?;
        }
        Ok(sum / bench::UNSEEN.len() as f64)
    }
}

fn build_bench() -> Result<Bench, String> {
    let start = Instant::now();
    let train_data = bench::train_set(&[bench::SEEN, bench::UNSEEN[0]]).map_err(err)?;
    let test = bench::test_set().map_err(err)?;
    let main = fit(&train_data, bench::SEEN, 128, LossKind::CosFace, 0)?;
    Ok(Bench {
        train: train_data,
        test,
        main,
        setup_seconds: start.elapsed().as_secs_f64(),
    })
}

fn operational_check(b: &Bench) -> Check {
    let start = Instant::now();
    let gen = b.queries(bench::SEEN, bench::TRAIN_STRENGTH)?;
    let truth = b.test.ground_truth();
    let trained = alignment_residual_by_truth(b.test.origins(), gen, truth, &b.main).map_err(err)?;
    let ident = ProjectionMatrix::identity(bench::DIM).map_err(err)?;
    let base = alignment_residual_by_truth(b.test.origins(), gen, truth, &ident).map_err(err)?;
    let raw = b.map(bench::SEEN, None)?;
    let with_w = b.map(bench::SEEN, Some(&b.main))?;
    let runtime = b.setup_seconds + start.elapsed().as_secs_f64();
    let pass = trained.value < base.value && with_w - raw >= 0.15 && runtime < 300.0;
    Ok((
        pass,
        format!(
            "alignment residual {:.4} vs identity {:.4}; seen mAP {:.4} vs raw {:.4} (gain {:+.4}, need >= 0.15); runtime {:.0}s (< 300s)",
            trained.value, base.value, with_w, raw, with_w - raw, runtime
        ),
    ))
}

fn generalization_check(b: &Bench) -> Check {
    let raw = b.unseen(None)?;
    let with_w = b.unseen(Some(&b.main))?;
    Ok((
        with_w - raw >= 0.15,
        format!(
            "unseen mAP (u1 sigma 0.4, u2 sigma 0.8) {:.4} vs raw {:.4} (gain {:+.4}, need >= 0.15)",
            with_w,
            raw,
            with_w - raw
        ),
    ))
}

fn spectrum_check(b: &Bench) -> Check {
    let other = fit(&b.train, bench::UNSEEN[0], 128, LossKind::CosFace, 1)?;
    let c = sv_cosine(&b.main, &other).map_err(err)?;
    Ok((
        c >= 0.99,
        format!("sv_cosine(W_seen, W_u1) = {c:.5} (need >= 0.99)"),
    ))
}

fn rank_ablation(b: &Bench) -> Check {
    let mut maps = Vec::new();
    for rank in [bench::DIM, bench::DIM / 8, bench::DIM / 64] {
        let t = fit(&b.train, bench::SEEN, rank, LossKind::CosFace, 0)?;
        maps.push((rank, b.unseen(Some(&t))?));
    }
    let (full, eighth, tiny) = (maps[0].1, maps[1].1, maps[2].1);
    let pass = (eighth - full).abs() <= 0.02 && full - tiny >= 0.02;
    Ok((
        pass,
        format!(
            "unseen mAP rank {} {:.4}, rank {} {:.4} (|diff| {:.4} <= 0.02), rank {} {:.4} (drop {:.4} >= 0.02)",
            maps[0].0,
            full,
            maps[1].0,
            eighth,
            (eighth - full).abs(),
            maps[2].0,
            tiny,
            full - tiny
        ),
    ))
}

/// `>` when `a` leads by at least 0.01, `~` inside that band, `<` otherwise.
fn relation(a: f64, b: f64) -> &'static str {
    if a - b >= 0.01 {
        ">"
    } else if (a - b).abs() < 0.01 {
        "~"
    } else {
        "<"
    }
}

fn loss_ordering(b: &Bench) -> Check {
    let cos = b.unseen(Some(&b.main))?;
    let circle = fit(&b.train, bench::SEEN, 128, LossKind::Circle, 0)?;
    let soft = fit(&b.train, bench::SEEN, 128, LossKind::Softmax, 0)?;
    let circle = b.unseen(Some(&circle))?;
    let soft = b.unseen(Some(&soft))?;
    let (r1, r2) = (relation(cos, circle), relation(circle, soft));
    Ok((
        r1 != "<" && r2 != "<",
        format!(
            "unseen mAP cosface {cos:.4} {r1} circle {circle:.4} {r2} softmax {soft:.4} (~ is a tie within 0.01)"
        ),
    ))
}

fn strength_trend(b: &Bench) -> Check {
    let mut maps = Vec::new();
    for s in bench::TEST_STRENGTHS {
        maps.push((s, b.metrics(bench::SEEN, s, Some(&b.main))?.map));
    }
    let tail = &maps[1..];
    let monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1);
    let low = maps[0].1;
    let listed: Vec<String> = maps.iter().map(|(s, m)| format!("{s}: {m:.4}")).collect();
    Ok((
        monotone && low >= 0.99,
        format!(
            "seen mAP by strength [{}]; non-increasing over 0.3..0.9: {monotone}; 0.1 >= 0.99: {}",
            listed.join(", "),
            low >= 0.99
        ),
    ))
}

fn random_instance(i: u64) -> Result<(EmbeddingSet, EmbeddingSet, usize), String> {
    let mut rng = substream(8, &[i]);
    let n = if i == 0 { 5000 } else { rng.gen_range(1..=5000) };
    let dim = rng.gen_range(1..=48);
    let nq = rng.gen_range(1..=6);
    let mut rows: Vec<Vec<f32>> = (0..n)
        .map(|_| gaussian_vec(&mut rng, dim).into_iter().map(|v| v as f32).collect())
        .collect();
    // Duplicate rows so that exact score ties occur.
    for _ in 0..n / 5 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        rows[b] = rows[a].clone();
    }
    let mut ids: Vec<u64> = (0..n as u64).map(|j| j * 7919 + 13).collect();
    ids.shuffle(&mut rng);
    let mut queries: Vec<Vec<f32>> = Vec::new();
    for q in 0..nq {
        if q % 2 == 0 {
            queries.push(rows[rng.gen_range(0..n)].iter().map(|v| v * 3.0).collect());
        } else {
            queries.push(gaussian_vec(&mut rng, dim).into_iter().map(|v| v as f32).collect());
        }
    }
    let k = match rng.gen_range(0..4) {
        0 => n,
        1 => 1,
        _ => rng.gen_range(1..=n.min(64)),
    };
    Ok((
        EmbeddingSet::from_rows(ids, dim, &rows).map_err(err)?,
        EmbeddingSet::from_rows((0..nq as u64).collect(), dim, &queries).map_err(err)?,
        k,
    ))
}

fn fixture(hits: &[(u64, f32)], query: u64) -> MatchResult {
    MatchResult {
        query_id: query,
        hits: hits
            .iter()
            .map(|&(ref_id, score)| Hit { ref_id, score })
            .collect(),
    }
}

fn matcher_oracle() -> Check {
    let mut compared = 0usize;
    for i in 0..200 {
        let (refs, queries, k) = random_instance(i)?;
        let index = build_index(&refs).map_err(err)?;
        let got = search(&index, &queries, k).map_err(err)?;
        let want = bench::naive_search(&refs, &queries, k);
        if got != want {
            return Ok((false, format!("instance {i}: search differs from the naive oracle")));
        }
        compared += got.iter().map(|r| r.hits.len()).sum::<usize>();
    }

    // Truth at ranks 1, 2 and 4.
    let truth: GroundTruth = [(1, 10), (2, 20), (3, 30)].into_iter().collect();
    let matches = vec![
        fixture(&[(10, 0.9), (11, 0.5)], 1),
        fixture(&[(21, 0.8), (20, 0.7)], 2),
        fixture(&[(31, 0.95), (32, 0.6), (33, 0.4), (30, 0.3)], 3),
    ];
    let m = evaluate(&matches, &truth, 10).map_err(err)?;
    let map_ok = (m.map - 7.0 / 12.0).abs() <= 1e-12;
    let acc_ok = (m.top1_acc - 1.0 / 3.0).abs() <= 1e-12;
    // Pooled: true hits land at positions 2, 4 and 8 of the merged list.
    let micro_ok = (m.micro_ap - (0.5 + 0.5 + 0.375) / 3.0).abs() <= 1e-12;
    let cut = evaluate(&matches, &truth, 2).map_err(err)?;
    let cut_ok = (cut.map - 0.5).abs() <= 1e-12;
    let pass = map_ok && acc_ok && micro_ok && cut_ok;
    Ok((
        pass,
        format!(
            "200 instances (up to 5000 refs, duplicated rows), {compared} hits identical; fixture mAP {:.12} (7/12), Acc {:.12}, micro-AP {:.12}, k_eval=2 mAP {:.12}",
            m.map, m.top1_acc, m.micro_ap, cut.map
        ),
    ))
}

fn translation_identity() -> Check {
    let names = [bench::SEEN, bench::UNSEEN[0]];
    let ps = names
        .iter()
        .map(|n| bench::profile(n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let strengths = [0.3, 0.9];
    let n = 2500;
    let data = generate_dataset(n, bench::DIM, &ps, &strengths, 5, &NoiseSchedule::default()).map_err(err)?;
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    let mut stored_ok = true;
    for (pi, _) in ps.iter().enumerate() {
        for (si, &s) in strengths.iter().enumerate() {
            let set = data.queries(ps[pi].name(), s).ok_or("missing cell")?;
            for o in 0..n {
                let t = data.replay_pair(o, 0, pi, si).map_err(err)?;
                let z0: Vec<f64> = data.origins().row(o).iter().map(|&v| v as f64).collect();
                let norm = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(t.identity_error(&z0) / norm);
                let stored = set.row(o);
                stored_ok &= t.output.iter().zip(stored).all(|(a, &b)| *a as f32 == b);
                pairs += 1;
            }
        }
    }

    let zero = SimModelProfile::new("clean", 0.0, 4, bench::DIM, ResidualSpectrum::default_for(bench::DIM))
        .map_err(err)?;
    let clean = generate_dataset(500, bench::DIM, &[zero], &[0.5, 0.9], 6, &NoiseSchedule::default())
        .map_err(err)?;
    let origins = clean.origins().data();
    let duplicates = clean.query_sets().iter().all(|q| q.set.data() == origins);

    Ok((
        worst <= 1e-6 && stored_ok && duplicates,
        format!(
            "{pairs} pairs, worst relative identity error {worst:.2e} (tol 1e-6), stored queries match replay: {stored_ok}; sigma_resid=0 queries are exact duplicates: {duplicates}"
        ),
    ))
}

fn cli(args: &[String]) -> Result<(), String> {
    match oid_cli::run(args.to_vec()) {
        0 => Ok(()),
        code => Err(format!("oid {} exited with {code}", args.join(" "))),
    }
}

fn arg(s: impl AsRef<str>) -> String {
    s.as_ref().to_string()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

const PIPELINE_CONFIG: &str = "\
seed = 3

[sim]
n_origins = 200
variants = 4
dim = 32
strengths = 0.5, 0.9
test_seed = 4

[profile seen]
sigma_resid = 0.6
style_seed = 1

[profile other]
sigma_resid = 0.4
style_seed = 2

[train]
rank = 16
loss = cosface
peak_lr = 3e-3
total_steps = 300
batch_size = 64
profile = seen
strength = 0.9

[grid]
losses = cosface, softmax
ranks = 8, 16
k = 20
";

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, PIPELINE_CONFIG).map_err(err)?;
    let first = root.join("first");
    let data = first.join("data");
    let base = |sub: &str, out: &Path| -> Vec<String> {
        vec![arg(sub), arg("--config"), path(&cfg), arg("--out"), path(out)]
    };

    cli(&base("simulate", &data))?;
    let train_dir = data.join("train");
    let test_dir = data.join("test");
    let mut train_args = base("train", &first.join("train"));
    train_args.extend([
        arg("--origins"),
        path(&train_dir.join("origins.oide")),
        arg("--generated"),
        path(&train_dir.join("queries_seen_0.9.oide")),
        arg("--truth"),
        path(&train_dir.join("truth.tsv")),
    ]);
    cli(&train_args)?;
    let w = first.join("train").join("w.oide");
    let mut search_args = base("search", &first.join("search"));
    search_args.extend([
        arg("--refs"),
        path(&test_dir.join("origins.oide")),
        arg("--queries"),
        path(&test_dir.join("queries_other_0.9.oide")),
        arg("--w"),
        path(&w),
    ]);
    cli(&search_args)?;
    let mut eval_args = base("eval", &first.join("eval"));
    eval_args.extend([
        arg("--results"),
        path(&first.join("search").join("results.tsv")),
        arg("--truth"),
        path(&test_dir.join("truth.tsv")),
    ]);
    cli(&eval_args)?;
    cli(&base("grid", &first.join("grid")))?;

    let stages = ["data", "train", "search", "eval", "grid"];
    let manifests = [
        ("data", "simulate"),
        ("train", "train"),
        ("search", "search"),
        ("eval", "eval"),
        ("grid", "grid"),
    ];
    let second = root.join("second");
    for (dir, sub) in manifests {
        let manifest = first.join(dir).join(format!("{sub}.manifest.json"));
        cli(&[
            arg("replay"),
            arg("--manifest"),
            path(&manifest),
            arg("--out"),
            path(&second.join(dir)),
        ])?;
    }

    let mut compared = 0;
    let mut differing = Vec::new();
    for stage in stages {
        let mut files = Vec::new();
        collect_files(&first.join(stage), &mut files).map_err(err)?;
        for f in files {
            // Manifests carry wall-clock timings and their own output paths.
            if f.to_string_lossy().ends_with(".manifest.json") {
                continue;
            }
            let rel = f.strip_prefix(&first).map_err(err)?;
            let a = std::fs::read(&f).map_err(err)?;
            let b = std::fs::read(second.join(rel)).map_err(err)?;
            if a != b {
                differing.push(rel.display().to_string());
            }
            compared += 1;
        }
    }
    let names: HashSet<&str> = ["w.oide", "results.tsv", "report.json", "grid.jsonl"].into_iter().collect();
    let mut seen = HashSet::new();
    for stage in stages {
        let mut files = Vec::new();
        collect_files(&first.join(stage), &mut files).map_err(err)?;
        for f in files {
            if let Some(n) = f.file_name().and_then(|n| n.to_str()) {
                if names.contains(n) {
                    seen.insert(n.to_string());
                }
            }
        }
    }
    let complete = seen.len() == names.len();
    Ok((
        differing.is_empty() && complete && compared > 0,
        if differing.is_empty() {
            format!("replayed simulate/train/search/eval/grid from their manifests; {compared} output files byte-identical (W, results, reports included: {complete})")
        } else {
            format!("differing after replay: {}", differing.join(", "))
        },
    ))
}

fn scan_throughput() -> Check {
    let (n, dim, nq) = (100_000usize, 512usize, 50usize);
    let mut rng = substream(12, &[]);
    let data: Vec<f32> = gaussian_vec(&mut rng, n * dim).into_iter().map(|v| v as f32).collect();
    let refs = EmbeddingSet::new((0..n as u64).collect(), dim, data).map_err(err)?;
    let qd: Vec<f32> = gaussian_vec(&mut rng, nq * dim).into_iter().map(|v| v as f32).collect();
    let queries = EmbeddingSet::new((0..nq as u64).collect(), dim, qd).map_err(err)?;
    let index = build_index(&refs).map_err(err)?;
    drop(refs);
    let mut runs = Vec::new();
    for _ in 0..3 {
        let (_, stats) = measure_scan(&index, &queries, 10, 1).map_err(err)?;
        runs.push(stats);
    }
    runs.sort_by(|a, b| a.bytes_per_sec_per_thread.total_cmp(&b.bytes_per_sec_per_thread));
    let median = runs[1];
    Ok((
        median.bytes_per_sec_per_thread >= 1e9,
        format!(
            "100000 refs x 512 dim x 50 queries, 1 thread: {:.2} GB/s (median of 3, need >= 1), {:.3e} s/pair",
            median.bytes_per_sec_per_thread / 1e9,
            median.seconds_per_pair
        ),
    ))
}

fn main() {
    let mut lines = Vec::new();
    record(&mut lines, 1, "gradient oracle", gradient_oracle);

    let setup = build_bench();
    let shared = |lines: &mut Vec<Line>, id, name, f: fn(&Bench) -> Check| {
        record(lines, id, name, || match &setup {
            Ok(b) => f(b),
            Err(e) => Err(format!("benchmark setup failed: {e}")),
        })
    };
    shared(&mut lines, 2, "alignment and seen gain", operational_check);
    shared(&mut lines, 3, "unseen generalization", generalization_check);
    shared(&mut lines, 4, "singular-value cosine", spectrum_check);
    shared(&mut lines, 5, "rank ablation", rank_ablation);
    shared(&mut lines, 6, "loss ordering", loss_ordering);
    shared(&mut lines, 7, "strength trend", strength_trend);

    record(&mut lines, 8, "matcher and evaluator oracles", matcher_oracle);
    record(&mut lines, 9, "translation identity", translation_identity);
    record(&mut lines, 10, "replay determinism", determinism);
    record(&mut lines, 11, "flat scan throughput", scan_throughput);

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| l.id.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        lines.len() - failed.len(),
        lines.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
