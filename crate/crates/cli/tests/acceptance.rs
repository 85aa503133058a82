//! Acceptance suite: every criterion runs against an independent oracle and
//! prints one PASS/FAIL line. Runs without the libtest harness so the lines
//! always reach the terminal.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonroute_cli::artifacts;
use reasonroute_cli::eval::{build_report, evaluate_arms, Arm, ArmResult, EvalItem};
use reasonroute_cli::stages::{self, ReportDoc};
use reasonroute_cli::synth::{generate, SynthConfig};
use reasonroute_cli::config::SplitName;
use reasonroute_cli::PipelineConfig;
use reasonroute_core::error::Error;
use reasonroute_core::features::{FeatureSchema, DELTA_COST_FEATURE};
use reasonroute_core::io::{kinds, Header};
use reasonroute_core::policy::{
    default_eta_grid, dominates, epsilon_point, freeze_policy, knee_point, pareto_filter, sweep_eta, Anchor,
    AnchorParams, FrontierPoint, LoggedPair, PolicyArtifact, Provenance, SweepInputs,
};
use reasonroute_core::probe::{
    aggregate_pairs, build_block_diagonal_mask, build_probe_layout, default_checklist, extract_yes_no, ProbeResult,
};
use reasonroute_core::ranking::{
    ndcg_at_k, outcome_utility, pairwise_accuracy, recall_at_k, top1_agreement, tradeoff_score, Mode, Qrels,
    UtilityMetric,
};
use reasonroute_core::router::{train, Node, Reweight, RouterModel, TrainConfig, Tree};
use reasonroute_core::Execution;

type Criterion = (&'static str, Duration, fn() -> Result<String>);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("report-arithmetic", Duration::from_secs(1), report_arithmetic),
        ("metric-oracles", Duration::from_secs(10), metric_oracles),
        ("monotone-router", Duration::from_secs(30), monotone_router),
        ("pareto-machinery", Duration::from_secs(10), pareto_machinery),
        ("routing-endpoints", Duration::from_secs(5), routing_endpoints),
        ("oracle-dominance", Duration::from_secs(5), oracle_dominance),
        ("end-to-end-routing", Duration::from_secs(120), end_to_end),
        ("mask-correctness", Duration::from_secs(5), mask_correctness),
        ("probe-algebra", Duration::from_secs(5), probe_algebra),
        ("serialization", Duration::from_secs(5), serialization),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run));
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) if took <= budget => (true, d),
            Ok(Ok(d)) => (false, format!("{d}; over the {budget:?} budget")),
            Ok(Err(e)) => (false, format!("{e:#}")),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        failed += !ok as usize;
        println!(
            "{} {name:<20} {:>8.2}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------

fn fixture_arm(arm: Arm, ndcg10: f64, tokens: f64) -> ArmResult {
    ArmResult {
        arm,
        utility: ndcg10,
        ndcg10,
        recall10: 0.0,
        top1: 0.0,
        mean_tokens: tokens,
        think_fraction: 0.0,
        tradeoff: tradeoff_score(ndcg10, tokens),
    }
}

fn report_arithmetic() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = PipelineConfig {
        work_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let arms = vec![
        fixture_arm(Arm::Think, 0.1902, 384.0),
        fixture_arm(Arm::Routed, 0.2022, 194.0),
        fixture_arm(Arm::SelfSelect, 0.2552, 279.0),
    ];
    let report = build_report(SplitName::Test, UtilityMetric::default(), 1, arms, Arm::Think)?;
    artifacts::save(&cfg.path(|p| &p.eval), &Header::new(kinds::EVAL), &[report])?;
    stages::report(&cfg, None)?;

    let doc: ReportDoc = serde_json::from_str(&fs::read_to_string(cfg.path(|p| &p.report_json))?)?;
    let routed = doc.report.deltas.iter().find(|d| d.arm == Arm::Routed).context("routed delta")?;
    let ndcg = 100.0 * routed.ndcg10.context("ndcg delta undefined")?;
    let tokens = 100.0 * routed.mean_tokens.context("token delta undefined")?;
    let tradeoff = 100.0 * doc.report.arms.iter().find(|a| a.arm == Arm::SelfSelect).context("arm")?.tradeoff;
    ensure!(close(ndcg, 6.31, 0.05), "ndcg delta {ndcg:.4}%");
    ensure!(close(tokens, -49.48, 0.05), "token delta {tokens:.4}%");
    ensure!(close(tradeoff, 22.73, 0.05), "trade-off {tradeoff:.4}");
    let md = fs::read_to_string(cfg.path(|p| &p.report_md))?;
    ensure!(md.contains("+6.31%") && md.contains("-49.48%") && md.contains("22.73"), "markdown report:\n{md}");
    Ok(format!("NDCG@10 {ndcg:+.2}%, tokens {tokens:+.2}%, trade-off {tradeoff:.2}"))
}

// ---------------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn dcg(grades: &[u32], perm: &[usize], k: usize) -> f64 {
    perm.iter()
        .take(k)
        .enumerate()
        .map(|(i, &it)| (2f64.powi(grades[it] as i32) - 1.0) / (i as f64 + 2.0).log2())
        .sum()
}

fn metric_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for n in 1..=5 {
        let perms = permutations(n);
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let order_of = |p: &[usize]| p.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
        for _ in 0..500 {
            let grades: Vec<u32> = (0..n).map(|_| rng.random_range(0..=3)).collect();
            let qrels: Qrels = ids.iter().cloned().zip(grades.iter().copied()).collect();
            // ideal DCG by exhaustive search over every ordering
            let idcg: Vec<f64> = (1..=n)
                .map(|k| perms.iter().map(|p| dcg(&grades, p, k)).fold(0.0, f64::max))
                .collect();
            let positives = grades.iter().filter(|&&g| g > 0).count();
            let best = *grades.iter().max().expect("n >= 1");
            let truth = &perms[rng.random_range(0..perms.len())];
            for p in &perms {
                let order = order_of(p);
                for k in 1..=n {
                    let want = if positives == 0 { 0.0 } else { dcg(&grades, p, k) / idcg[k - 1] };
                    let got = ndcg_at_k(&order, &qrels, k)?.value;
                    ensure!(close(got, want, 1e-9), "ndcg@{k} {got} vs {want} for {grades:?} {p:?}");
                    let hits = p.iter().take(k).filter(|&&i| grades[i] > 0).count();
                    let want = if positives == 0 { 0.0 } else { hits as f64 / positives as f64 };
                    let got = recall_at_k(&order, &qrels, k)?.value;
                    ensure!(close(got, want, 1e-9), "recall@{k} {got} vs {want}");
                    checked += 2;
                }
                let want = grades.iter().all(|&g| g <= grades[p[0]]);
                ensure!(top1_agreement(&order, &qrels)? == want, "top1 for {grades:?} {p:?}");
                ensure!(want == (grades[p[0]] == best));

                let pos = |perm: &[usize], it: usize| perm.iter().position(|&x| x == it).expect("item");
                let (mut agree, mut total) = (0usize, 0usize);
                for a in 0..n {
                    for b in a + 1..n {
                        total += 1;
                        agree += ((pos(p, a) < pos(p, b)) == (pos(truth, a) < pos(truth, b))) as usize;
                    }
                }
                let want = if total == 0 { 1.0 } else { agree as f64 / total as f64 };
                let got = pairwise_accuracy(&order, &order_of(truth)).value;
                ensure!(close(got, want, 1e-9), "pairwise {got} vs {want}");
                checked += 2;
            }
        }
    }
    Ok(format!("{checked} metric values match brute force"))
}

// ---------------------------------------------------------------------------

const MIN_GAIN: f64 = 1e-12;
const PROBES: usize = 10_000;

struct OracleTree<'a> {
    nodes: Vec<Node>,
    /// The fitted tree; where several splits tie within rounding, the oracle
    /// follows the one it chose so both stay aligned.
    guide: Option<&'a [Node]>,
    ties: usize,
}

fn weighted_mean(rows: &[usize], r: &[f64], w: &[f64]) -> f64 {
    rows.iter().map(|&i| w[i] * r[i]).sum::<f64>() / rows.iter().map(|&i| w[i]).sum::<f64>()
}

fn sse(rows: &[usize], r: &[f64], w: &[f64], v: f64) -> f64 {
    rows.iter().map(|&i| w[i] * (r[i] - v) * (r[i] - v)).sum()
}

/// Exhaustive split search: every feature, every midpoint between distinct
/// values, losses recomputed from scratch. Children of a split on a
/// decreasing feature are bounded on either side of the midpoint of the two
/// child values.
#[allow(clippy::too_many_arguments)]
fn oracle_build(
    x: &Array2<f64>,
    r: &[f64],
    w: &[f64],
    rows: Vec<usize>,
    depth: usize,
    max_depth: usize,
    bounds: (f64, f64),
    decreasing: &[bool],
    out: &mut OracleTree,
) -> usize {
    let (lo, hi) = bounds;
    let value = weighted_mean(&rows, r, w).clamp(lo, hi);
    let id = out.nodes.len();
    out.nodes.push(Node::Leaf { value });
    if depth >= max_depth || rows.len() < 2 {
        return id;
    }
    let parent = sse(&rows, r, w, value);
    let min_gain = MIN_GAIN * rows.iter().map(|&i| w[i]).sum::<f64>();
    let mut cands: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for f in 0..x.ncols() {
        let mut vals: Vec<f64> = rows.iter().map(|&i| x[[i, f]]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let mut t = a + 0.5 * (b - a);
            if t >= b {
                t = a;
            }
            let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, f]] <= t);
            let vl = weighted_mean(&left, r, w).clamp(lo, hi);
            let vr = weighted_mean(&right, r, w).clamp(lo, hi);
            if decreasing[f] && vl < vr {
                continue;
            }
            let gain = parent - sse(&left, r, w, vl) - sse(&right, r, w, vr);
            if gain > min_gain {
                cands.push((f, t, gain, vl, vr));
            }
        }
    }
    // earliest candidate wins ties
    let Some(&best) = cands.iter().reduce(|b, c| if c.2 > b.2 + 1e-10 * b.2.abs() { c } else { b }) else {
        return id;
    };
    let tol = 1e-9 * best.2.abs().max(1.0);
    let chosen = match out.guide.and_then(|g| g.get(id)) {
        Some(Node::Split { feature, threshold, .. }) => cands
            .iter()
            .find(|c| c.0 == *feature && c.1 == *threshold && c.2 >= best.2 - tol)
            .copied()
            .unwrap_or(best),
        _ => best,
    };
    if chosen != best {
        out.ties += 1;
    }
    let (f, t, gain, vl, vr) = chosen;
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, f]] <= t);
    let (lb, rb) = if decreasing[f] {
        let mid = 0.5 * (vl + vr);
        ((lo.max(mid), hi), (lo, hi.min(mid)))
    } else {
        ((lo, hi), (lo, hi))
    };
    let left = oracle_build(x, r, w, left_rows, depth + 1, max_depth, lb, decreasing, out);
    let right = oracle_build(x, r, w, right_rows, depth + 1, max_depth, rb, decreasing, out);
    out.nodes[id] = Node::Split {
        feature: f,
        threshold: t,
        left,
        right,
        gain,
    };
    id
}

fn oracle_predict(nodes: &[Node], row: &[f64]) -> f64 {
    Tree { nodes: nodes.to_vec() }.predict(row)
}

/// Boosting with full-sample trees and the loss-guarded step.
fn oracle_boost<'a>(
    x: &Array2<f64>,
    y: &[f64],
    w: &[f64],
    depth: usize,
    lr: f64,
    fitted: &'a [Tree],
) -> (f64, Vec<OracleTree<'a>>) {
    let n = y.len();
    let p = x.ncols();
    let mut decreasing = vec![false; p];
    decreasing[p - 1] = true;
    let base = weighted_mean(&(0..n).collect::<Vec<_>>(), y, w);
    let mut pred = vec![base; n];
    let mut trees = Vec::new();
    for fit in fitted {
        let resid: Vec<f64> = (0..n).map(|i| y[i] - pred[i]).collect();
        let mut t = OracleTree {
            nodes: Vec::new(),
            guide: Some(&fit.nodes),
            ties: 0,
        };
        oracle_build(x, &resid, w, (0..n).collect(), 0, depth, (f64::NEG_INFINITY, f64::INFINITY), &decreasing, &mut t);
        let out: Vec<f64> = (0..n).map(|i| oracle_predict(&t.nodes, x.row(i).as_slice().unwrap())).collect();
        let rt: f64 = (0..n).map(|i| w[i] * resid[i] * out[i]).sum();
        let tt: f64 = (0..n).map(|i| w[i] * out[i] * out[i]).sum();
        let step = if tt > 0.0 && lr * lr * tt - 2.0 * lr * rt > 0.0 {
            (rt / tt).clamp(0.0, lr)
        } else {
            lr
        };
        if step != lr {
            for node in &mut t.nodes {
                if let Node::Leaf { value } = node {
                    *value *= step / lr;
                }
            }
        }
        for i in 0..n {
            pred[i] += step * out[i];
        }
        trees.push(t);
    }
    (base, trees)
}

fn same_tree(got: &Tree, want: &[Node]) -> bool {
    got.nodes.len() == want.len()
        && got.nodes.iter().zip(want).all(|(g, w)| match (g, w) {
            (Node::Leaf { value: a }, Node::Leaf { value: b }) => close(*a, *b, 1e-9 * b.abs().max(1.0)),
            (
                Node::Split {
                    feature: f1,
                    threshold: t1,
                    left: l1,
                    right: r1,
                    gain: g1,
                },
                Node::Split {
                    feature: f2,
                    threshold: t2,
                    left: l2,
                    right: r2,
                    gain: g2,
                },
            ) => f1 == f2 && t1 == t2 && l1 == l2 && r1 == r2 && close(*g1, *g2, 1e-9 * g2.abs().max(1.0)),
            _ => false,
        })
}

fn cost_schema(p: usize) -> FeatureSchema {
    let mut names: Vec<String> = (0..p - 1).map(|j| format!("f{j}")).collect();
    names.push(DELTA_COST_FEATURE.to_string());
    FeatureSchema::new(names)
}

/// Raise only the cost column and count predictions that go up.
fn monotone_violations(model: &RouterModel, seed: u64) -> usize {
    let p = model.schema.len();
    let cost = model.schema.iter().position(|f| f == DELTA_COST_FEATURE).expect("cost feature");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..PROBES {
        let mut row: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        row[cost] = rng.random_range(-3.0..900.0);
        let before = model.predict_row(&row);
        row[cost] += rng.random_range(1e-6..400.0);
        bad += (model.predict_row(&row) > before) as usize;
    }
    bad
}

fn monotone_router() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut models = Vec::new();
    let (mut compared, mut ties) = (0usize, 0usize);
    for case in 0..300 {
        let n = rng.random_range(2..=8);
        let p = rng.random_range(1..=2);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(0.0..10.0));
        // targets that mostly grow with cost, so the constraint binds
        let y: Vec<f64> = (0..n).map(|i| 0.2 * x[[i, p - 1]] + rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let (rounds, depth, lr) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(0.1..=1.0));
        let cfg = TrainConfig {
            n_rounds: rounds,
            max_depth: depth,
            learning_rate: lr,
            min_samples_leaf: 1,
            subsample: 1.0,
            reweight: Reweight::None,
            seed: case,
            ..TrainConfig::default()
        };
        let (model, _) = train(Execution::Sequential, &x, &y, &w, &cost_schema(p), &cfg)?;
        let (base, trees) = oracle_boost(&x, &y, &w, depth, lr, &model.trees);
        ensure!(model.trees.len() == rounds, "expected {rounds} trees, got {}", model.trees.len());
        ensure!(close(model.base_score, base, 1e-12), "base score {} vs {base}", model.base_score);
        for (r, (got, want)) in model.trees.iter().zip(&trees).enumerate() {
            ensure!(
                same_tree(got, &want.nodes),
                "case {case} round {r}: {:?} vs oracle {:?}",
                got.nodes,
                want.nodes
            );
            ties += want.ties;
        }
        compared += rounds;
        models.push(model);
    }

    for seed in 0..4u64 {
        let p = 2 + seed as usize;
        let n = 200;
        let x = Array2::from_shape_fn((n, p), |(_, j)| {
            if j == p - 1 {
                rng.random_range(1.0..800.0)
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let c: f64 = x[[i, p - 1]] / 800.0;
                x[[i, 0]] * c + (4.0 * c).sin() + 0.3 * rng.random_range(-1.0..1.0)
            })
            .collect();
        let cfg = TrainConfig {
            n_rounds: 60,
            max_depth: 1 + seed as usize,
            learning_rate: 0.2,
            min_samples_leaf: 3,
            reweight: if seed % 2 == 0 { Reweight::Tukey } else { Reweight::None },
            seed,
            ..TrainConfig::default()
        };
        models.push(train(Execution::default(), &x, &y, &vec![1.0; n], &cost_schema(p), &cfg)?.0);
    }
    let violations: usize = models.iter().enumerate().map(|(i, m)| monotone_violations(m, i as u64)).sum();
    ensure!(violations == 0, "{violations} monotonicity violations");
    Ok(format!(
        "{compared} small-fit trees match the exhaustive oracle ({ties} near-tied splits); {} models x {PROBES} probes, 0 violations",
        models.len()
    ))
}

// ---------------------------------------------------------------------------

fn pt(t: f64, u: f64) -> FrontierPoint {
    FrontierPoint {
        eta: 0.0,
        mean_tokens: t,
        utility: u,
        think_fraction: 0.0,
    }
}

fn increasing_frontier(rng: &mut ChaCha8Rng, n: usize) -> Vec<FrontierPoint> {
    let (mut t, mut u) = (rng.random_range(0.0..50.0), rng.random_range(0.0..0.5));
    (0..n)
        .map(|i| {
            t += rng.random_range(0.5..40.0);
            u += rng.random_range(0.001..0.05);
            FrontierPoint {
                eta: (n - i) as f64,
                ..pt(t, u)
            }
        })
        .collect()
}

fn pareto_machinery() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        // coarse grid so duplicates and shared coordinates occur
        let pts: Vec<FrontierPoint> = (0..n)
            .map(|_| pt(rng.random_range(0..30) as f64 * 10.0, rng.random_range(0..20) as f64 / 20.0))
            .collect();
        let mut want: Vec<FrontierPoint> = (0..n)
            .filter(|&i| !pts.iter().any(|q| dominates(q, &pts[i])))
            .filter(|&i| !pts[..i].contains(&pts[i]))
            .map(|i| pts[i])
            .collect();
        want.sort_by(|a, b| a.mean_tokens.total_cmp(&b.mean_tokens));
        ensure!(pareto_filter(&pts) == want, "pareto filter differs on {pts:?}");
    }

    let mut flagged = 0;
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        let front = increasing_frontier(&mut rng, n);
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(-1e3..1e3));
        let (c, d) = (rng.random_range(0.01..100.0), rng.random_range(-10.0..10.0));
        let scaled: Vec<FrontierPoint> = front
            .iter()
            .map(|p| FrontierPoint {
                mean_tokens: a * p.mean_tokens + b,
                utility: c * p.utility + d,
                ..*p
            })
            .collect();
        let (k1, f1) = knee_point(&front)?;
        let (k2, f2) = knee_point(&scaled)?;
        ensure!(k1.eta == k2.eta && f1 == f2, "knee moved under rescaling: {k1:?} vs {k2:?}");
        flagged += f1.is_some() as usize;
    }

    let mut infeasible = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..30);
        let front = increasing_frontier(&mut rng, len);
        let (u_base, eps) = (rng.random_range(0.0..1.2), rng.random_range(0.0..0.05));
        let target = u_base + eps;
        let mut want: Option<FrontierPoint> = None;
        for p in &front {
            if p.utility >= target && want.is_none_or(|w| p.mean_tokens < w.mean_tokens) {
                want = Some(*p);
            }
        }
        match (epsilon_point(&front, u_base, eps), want) {
            (Ok(got), Some(w)) => ensure!(got == w, "epsilon picked {got:?}, scan {w:?}"),
            (Err(Error::Infeasible { .. }), None) => infeasible += 1,
            (got, w) => anyhow::bail!("epsilon {got:?} vs scan {w:?}"),
        }
    }
    ensure!(infeasible > 0 && infeasible < 1000, "epsilon cases must cover both outcomes");
    Ok(format!(
        "1000 filters match the O(n^2) oracle; 100 knees invariant ({flagged} flagged); 1000 epsilon scans ({infeasible} infeasible)"
    ))
}

// ---------------------------------------------------------------------------

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<LoggedPair>) {
    let a = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
    let d = (0..n).map(|_| rng.random_range(1.0..600.0)).collect();
    let p = (0..n)
        .map(|_| {
            let t_non = rng.random_range(10.0..100.0);
            LoggedPair {
                u_non: rng.random(),
                u_think: rng.random(),
                t_non,
                t_think: t_non + rng.random_range(0.0..500.0),
            }
        })
        .collect();
    (a, d, p)
}

fn seq_mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / n as f64
}

fn routing_endpoints() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sweeps = 0;
    for _ in 0..300 {
        let n = rng.random_range(1..200);
        let (a, d, p) = random_pairs(&mut rng, n);
        for preds in [a.clone(), a.iter().map(|v: &f64| v.abs()).collect()] {
            let inputs = SweepInputs::new(&preds, &d, &p)?;
            let grid = default_eta_grid(&preds, &d, 60);
            let pts = sweep_eta(Execution::default(), &inputs, &grid)?;
            ensure!(
                pts.windows(2).all(|w| w[1].think_fraction <= w[0].think_fraction),
                "think fraction rose along the sweep"
            );
            sweeps += 1;
        }
        let pos: Vec<f64> = a.iter().map(|v| v.abs()).collect();
        let inputs = SweepInputs::new(&pos, &d, &p)?;
        let zero = inputs.evaluate(0.0)?;
        ensure!(
            zero.think_fraction == 1.0
                && zero.mean_tokens == seq_mean(p.iter().map(|x| x.t_think), n)
                && zero.utility == seq_mean(p.iter().map(|x| x.u_think), n),
            "eta = 0 differs from always-Think"
        );
        let top = pos.iter().zip(&d).map(|(a, d)| a / d).fold(0.0, f64::max);
        let last = inputs.evaluate(2.0 * top + 1e-9)?;
        ensure!(
            last.think_fraction == 0.0
                && last.mean_tokens == seq_mean(p.iter().map(|x| x.t_non), n)
                && last.utility == seq_mean(p.iter().map(|x| x.u_non), n),
            "super-threshold eta differs from always-Non-Think"
        );
    }
    Ok(format!("{sweeps} sweeps non-increasing; 300 endpoint pairs exact"))
}

// ---------------------------------------------------------------------------

fn oracle_dominance() -> Result<String> {
    let cfg = SynthConfig {
        n_instances: 300,
        ..SynthConfig::default()
    };
    let checklist = default_checklist();
    let metric = UtilityMetric::default();
    let mut lines = Vec::new();
    for seed in 0..4 {
        let data = generate(&cfg, seed, &checklist, Execution::default())?;
        let mut wins = [0usize; 2];
        let mut items = Vec::new();
        for (inst, rec) in data.instances.iter().zip(&data.records) {
            let u_non = outcome_utility(metric, inst, &rec.non_think)?;
            let u_think = outcome_utility(metric, inst, &rec.think)?;
            if u_non > u_think {
                wins[0] += 1;
            } else if u_think > u_non {
                wins[1] += 1;
            }
            items.push(EvalItem {
                instance: inst,
                record: rec,
                routed: Mode::NonThink,
            });
        }
        ensure!(wins[0] > 0 && wins[1] > 0, "seed {seed}: each mode must win somewhere ({wins:?})");
        let arms = evaluate_arms(metric, &items, 0.5, seed)?;
        let get = |a: Arm| arms.iter().find(|r| r.arm == a).expect("arm");
        let (o, t, n) = (get(Arm::Oracle), get(Arm::Think), get(Arm::NonThink));
        ensure!(o.utility > t.utility && o.utility > n.utility, "seed {seed}: oracle {o:?}");
        ensure!(o.mean_tokens <= t.mean_tokens, "seed {seed}: oracle tokens {}", o.mean_tokens);
        lines.push(format!("{:.3}>{:.3}/{:.3}", o.utility, t.utility, n.utility));
    }
    Ok(format!("oracle > think/non-think on 4 logs: {}", lines.join(", ")))
}

// ---------------------------------------------------------------------------

fn files_under(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?);
        }
    }
    Ok(out)
}

fn end_to_end() -> Result<String> {
    let run = |dir: &Path| -> Result<()> {
        let cfg = PipelineConfig {
            work_dir: dir.to_path_buf(),
            sequential: true,
            ..PipelineConfig::default()
        };
        ensure!(cfg.synth.n_instances == 2000 && cfg.policy.anchor == Anchor::Umax, "default config drifted");
        stages::run_all(&cfg)?;
        Ok(())
    };
    let (d1, d2) = (tempfile::tempdir()?, tempfile::tempdir()?);
    run(d1.path())?;
    run(d2.path())?;
    let (f1, f2) = (files_under(d1.path())?, files_under(d2.path())?);
    ensure!(f1.keys().eq(f2.keys()), "reruns wrote different file sets");
    for (name, bytes) in &f1 {
        ensure!(f2[name] == *bytes, "{name} differs between reruns");
    }

    let cfg = PipelineConfig {
        work_dir: d1.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let (report, _) = stages::load_eval(&cfg)?;
    let get = |a: Arm| report.arms.iter().find(|r| r.arm == a).context("arm missing");
    let (routed, think) = (get(Arm::Routed)?, get(Arm::Think)?);
    ensure!(
        routed.utility >= think.utility - 0.005,
        "routed utility {:.4} below always-Think {:.4}",
        routed.utility,
        think.utility
    );
    let ratio = routed.mean_tokens / think.mean_tokens;
    ensure!(ratio <= 0.7, "routed tokens {:.1} are {ratio:.3} of always-Think", routed.mean_tokens);

    let model = RouterModel::load(&fs::read_to_string(cfg.path(|p| &p.model))?)?;
    let violations = monotone_violations(&model, 77);
    ensure!(violations == 0, "pipeline model has {violations} monotonicity violations");
    Ok(format!(
        "{} held-out: routed {:.4} vs think {:.4}, tokens ratio {ratio:.3}; {} files identical across reruns",
        report.n_instances,
        routed.utility,
        think.utility,
        f1.len()
    ))
}

// ---------------------------------------------------------------------------

fn mask_correctness() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut layouts = 0;
    let mut allowed = 0usize;
    while layouts < 200 {
        let prefix = rng.random_range(1..30);
        let lens: Vec<usize> = (0..rng.random_range(0..8)).map(|_| rng.random_range(2..12)).collect();
        let t = prefix + lens.iter().sum::<usize>();
        if t > 64 {
            continue;
        }
        layouts += 1;
        let qs: Vec<(String, usize)> = lens.iter().enumerate().map(|(i, &l)| (format!("q{i}"), l)).collect();
        let mask = build_block_diagonal_mask(&build_probe_layout(prefix, &qs)?);
        ensure!(mask.size() == t, "mask size {} vs {t}", mask.size());
        let mut block = vec![None; t + 1];
        let mut pos = prefix;
        for (b, &l) in lens.iter().enumerate() {
            for slot in &mut block[pos + 1..=pos + l] {
                *slot = Some(b);
            }
            pos += l;
        }
        for i in 1..=t {
            for j in 1..=t {
                let expect = j <= i && (j <= prefix || block[i] == block[j]);
                ensure!(mask.allows(i, j) == expect, "layout {prefix}+{lens:?}: ({i},{j})");
                if let (Some(a), Some(b)) = (block[i], block[j]) {
                    ensure!(a == b || !mask.allows(i, j), "cross-block edge ({i},{j})");
                }
                allowed += expect as usize;
            }
        }
    }
    Ok(format!("200 layouts, {allowed} allowed edges, 0 cross-block"))
}

// ---------------------------------------------------------------------------

fn probe_algebra() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let scale = [1.0, 50.0, 1e3][i % 3];
        let (a, b) = (rng.random_range(-scale..=scale), rng.random_range(-scale..=scale));
        let (p, q) = (extract_yes_no(a, b)?, extract_yes_no(b, a)?);
        ensure!((0.0..=1.0).contains(&p), "p_yes {p} for ({a}, {b})");
        worst = worst.max((p + q - 1.0).abs());
    }
    ensure!(worst <= 1e-12, "complement error {worst:e}");
    ensure!(extract_yes_no(1e3, -1e3)? == 1.0 && extract_yes_no(-1e3, 1e3)? == 0.0);

    let checklist = default_checklist();
    let flipped: Vec<_> = checklist
        .iter()
        .map(|q| {
            let mut q = q.clone();
            q.direction = q.direction.flipped();
            q
        })
        .collect();
    for i in 0..1000 {
        let result = ProbeResult {
            instance_id: format!("x{i}"),
            p_yes: checklist.iter().map(|q| (q.qid.clone(), rng.random::<f64>())).collect(),
            flags: BTreeMap::new(),
        };
        let s = aggregate_pairs(&result, &checklist)?.signals;
        let f = aggregate_pairs(&result, &flipped)?.signals;
        ensure!(s.keys().eq(f.keys()), "pair sets differ");
        for (k, v) in &s {
            ensure!(f[k] == -v, "pair {k}: {v} vs flipped {}", f[k]);
        }
    }
    Ok(format!("max |p(a,b)+p(b,a)-1| = {worst:.1e} over 10000 pairs; 1000 flips antisymmetric"))
}

// ---------------------------------------------------------------------------

fn corruptions(text: &str) -> Vec<String> {
    let mut out = vec![String::new(), "not json\n".into(), text[..text.len() / 2].into()];
    out.push(text.lines().next().unwrap_or_default().to_string());
    out.push(format!("{text}{{\"extra\":1}}\n"));
    out.push(text.replacen("\"version\":1", "\"version\":9", 1));
    // change one digit inside the body
    let body_start = text.find('\n').map_or(0, |i| i + 1);
    if let Some(off) = text[body_start..].find(|c: char| c.is_ascii_digit()) {
        let at = body_start + off;
        let digit = text.as_bytes()[at];
        let swapped = if digit == b'9' { '0' } else { (digit + 1) as char };
        out.push(format!("{}{}{}", &text[..at], swapped, &text[at + 1..]));
    }
    out
}

fn structured(e: &Error) -> bool {
    matches!(e, Error::Parse { .. } | Error::Checksum | Error::VersionMismatch { .. } | Error::InvalidInput(_))
}

fn serialization() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = 4;
    let n = 150;
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
    let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] - 0.3 * x[[i, p - 1]] + rng.random_range(-0.2..0.2)).collect();
    let cfg = TrainConfig {
        n_rounds: 40,
        ..TrainConfig::default()
    };
    let (model, _) = train(Execution::default(), &x, &y, &vec![1.0; n], &cost_schema(p), &cfg)?;
    let text = model.save()?;
    let back = RouterModel::load(&text)?;
    ensure!(back == model, "model changed on round trip");

    let policy = freeze_policy(
        Anchor::Knee,
        &FrontierPoint {
            eta: rng.random_range(0.0..1e-3),
            ..pt(123.4, 0.56)
        },
        AnchorParams::default(),
        Provenance {
            model_hash: "m".repeat(64),
            data_hash: "d".repeat(64),
            timestamp: None,
        },
    )?;
    let ptext = policy.save()?;
    let pback = PolicyArtifact::load(&ptext)?;
    ensure!(pback == policy, "policy changed on round trip");

    let mut thinks = 0;
    for _ in 0..100 {
        let row: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, b) = (model.predict_row(&row), back.predict_row(&row));
        ensure!(a.to_bits() == b.to_bits(), "prediction {a} vs reloaded {b}");
        let delta = rng.random_range(1.0..600.0);
        let (m1, m2) = (policy.route(a, delta)?, pback.route(b, delta)?);
        ensure!(m1 == m2, "decision changed after reload");
        thinks += (m1 == Mode::Think) as usize;
    }

    let mut rejected = 0;
    for bad in corruptions(&text) {
        match RouterModel::load(&bad) {
            Err(e) if structured(&e) => rejected += 1,
            other => anyhow::bail!("corrupt model gave {other:?}"),
        }
    }
    for bad in corruptions(&ptext) {
        match PolicyArtifact::load(&bad) {
            Err(e) if structured(&e) => rejected += 1,
            other => anyhow::bail!("corrupt policy gave {other:?}"),
        }
    }
    Ok(format!("100 bit-identical predictions ({thinks} think decisions); {rejected} corruptions rejected"))
}
