//! End-to-end acceptance report: one PASS/FAIL line per criterion, exit
//! status 1 when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use i2i_core::baselines::{cosine, TaskSimilarityMatrix};
use i2i_core::checkpoint::Checkpoint;
use i2i_core::cli::{self, RunConfig};
use i2i_core::config::BackboneConfig;
use i2i_core::gradcheck::{run_suite, GradCheckOptions, SUITE_TOLERANCE};
use i2i_core::harness::{
    evaluate_stored, param_counts, Algo, AuditMode, CLRunRecord, Lab, ParamCounts, RunOutput,
    StoredTask, TaskSizes,
};
use i2i_core::i2i::{
    i2i_step, initialize, lowshot_seed, subsample, subsample_indices, I2IVariant, Phase,
    PhaseContext,
};
use i2i_core::metrics::{knowledge_transfer, metric_table, MetricTable};
use i2i_core::params::bit_identical;
use i2i_core::pretrain::load_backbone;
use i2i_core::rng::Seed;

const GRAD_BUDGET_S: f64 = 60.0;
const TRANSFER_TOL: f64 = 0.05;
/// Final over initial distillation loss, per task with k >= 3.
const DISTILL_RATIO: f64 = 0.1;
const TASK_BUDGET_S: f64 = 120.0;
const DIRECTIONAL_BUDGET_S: f64 = 30.0 * 60.0;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Budget and step size of every continual-learning phase in the directional runs.
const CL_EPOCHS: usize = 3;
const CL_LR: f64 = 1e-2;
const CL_PHASES: [&str; 6] = [
    "adapter",
    "improvise",
    "initialize",
    "train",
    "fusion",
    "knowledge_free",
];

/// (label, algo, variant) of the candidate methods.
const METHODS: [(&str, Algo, Option<I2IVariant>); 4] = [
    ("adapterfusion", Algo::AdapterFusion, None),
    ("i2i_FF", Algo::I2I, Some(I2IVariant::FF)),
    ("i2i_FL", Algo::I2I, Some(I2IVariant::FL)),
    ("i2i_LL", Algo::I2I, Some(I2IVariant::LL)),
];

struct Verdict {
    pass: bool,
    statistical: bool,
    detail: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, detail: Vec<String>) -> Verdict {
        Verdict {
            pass,
            statistical: false,
            detail,
        }
    }
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let entries = match run_suite(GradCheckOptions::default()) {
        Ok(e) => e,
        Err(e) => return Verdict::new(false, vec![format!("suite error: {e}")]),
    };
    let secs = t0.elapsed().as_secs_f64();
    let worst = entries
        .iter()
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.name)
        .collect();
    let has_model = entries.iter().any(|e| e.name.starts_with("model"));
    Verdict::new(
        failed.is_empty() && has_model && worst < SUITE_TOLERANCE && secs < GRAD_BUDGET_S,
        vec![format!(
            "{} checks, max rel error {worst:.2e} (< {SUITE_TOLERANCE:e}), {secs:.1}s (< {GRAD_BUDGET_S}s), failed {failed:?}",
            entries.len()
        )],
    )
}

fn published_transfers() -> Verdict {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (algo, variant, scores, published) in common::TABLE2_ROWS {
        let mut row = Vec::new();
        for i in 0..5 {
            let t = knowledge_transfer(scores[i], common::TABLE2_VANILLA[i]).unwrap();
            worst = worst.max((t - published[i]).abs());
            row.push(format!("{t:.2}"));
        }
        detail.push(format!(
            "{algo}{} {}",
            variant.map(|v| format!("_{v}")).unwrap_or_default(),
            row.join(" ")
        ));
    }
    let example = format!("{:.2}", knowledge_transfer(61.52, 61.42).unwrap());
    detail.push(format!(
        "max deviation {worst:.4} (<= {TRANSFER_TOL}), (61.52, 61.42) -> {example}"
    ));
    Verdict::new(worst <= TRANSFER_TOL && example == "0.16", detail)
}

fn closest_selection() -> Verdict {
    let m = TaskSimilarityMatrix::from_csv(common::TABLE6).unwrap();
    let expected = [
        ("VQAv2", "VizWiz", 0.9877),
        ("Visual7W", "VQA-Abs", 0.9771),
        ("VQA-Abs", "Visual7W", 0.9771),
        ("VizWiz", "VQAv2", 0.9877),
        ("DAQUAR", "Visual7W", 0.9820),
    ];
    let mut pass = true;
    let mut picks = Vec::new();
    for (row, (task, pick, sim)) in expected.iter().enumerate() {
        let others: Vec<usize> = (0..5).filter(|&j| j != row).collect();
        let chosen = m.select(row, &others).unwrap();
        pass &= m.labels[row] == *task
            && m.labels[chosen] == *pick
            && m.values[row][chosen] == Some(*sim);
        picks.push(format!("{task}->{}", m.labels[chosen]));
    }
    let v = [0.3, -1.7, 2.2, 5.0];
    let same = cosine(&v, &v).unwrap();
    let orth = cosine(&[1.0, 2.0, 0.0], &[-2.0, 1.0, 0.0]).unwrap();
    pass &= same == 1.0 && orth == 0.0;
    Verdict::new(
        pass,
        vec![
            picks.join(", "),
            format!("cos(v, v) = {same}, cos(orthogonal) = {orth}"),
        ],
    )
}

fn lowshot() -> Verdict {
    let mut pass = true;
    let mut sizes = Vec::new();
    for (i, id) in ["count_red", "exist_circle", "parity_square"]
        .iter()
        .enumerate()
    {
        let seed = lowshot_seed(Seed(i as u64).child(id));
        let a = subsample_indices(2000, 0.05, seed).unwrap();
        pass &= a.len() == 100 && a == subsample_indices(2000, 0.05, seed).unwrap();
        let data: Vec<usize> = (0..2000).collect();
        pass &= subsample(&data, 0.05, seed).unwrap() == a;
        let touched = |v: I2IVariant| -> std::collections::BTreeSet<usize> {
            let mut s: std::collections::BTreeSet<usize> =
                subsample_indices(2000, v.improvise_fraction, seed)
                    .unwrap()
                    .into_iter()
                    .collect();
            s.extend(subsample_indices(2000, v.initialize_fraction, seed).unwrap());
            s
        };
        let (ll, fl, ff) = (
            touched(I2IVariant::LL),
            touched(I2IVariant::FL),
            touched(I2IVariant::FF),
        );
        pass &= ll.is_subset(&fl) && fl.is_subset(&ff) && ff.len() == 2000;
        sizes.push(format!(
            "{id}: LL {} FL {} FF {}",
            ll.len(),
            fl.len(),
            ff.len()
        ));
    }
    Verdict::new(
        pass,
        vec![
            "subsample(2000, 0.05) -> 100, stable per seed".into(),
            sizes.join("; "),
        ],
    )
}

fn accounting(lab: &Lab, runs: &Runs) -> Verdict {
    let config = BackboneConfig::default();
    let r = i2i_core::train::HyperSet::default().bottleneck;
    let s = common::closed_form(&config, r);
    let mut pass = lab.backbone.config == config && lab.hyper.bottleneck == r;
    let counts = |algo: Algo| -> Vec<ParamCounts> {
        (1..=5)
            .map(|k| {
                let tasks: Vec<TaskSizes> = (1..=k)
                    .map(|j| TaskSizes {
                        adapter: s.phi,
                        head: s.psi,
                        fusion: (algo == Algo::AdapterFusion && j >= 2).then_some(s.f),
                    })
                    .collect();
                param_counts(algo, s.b, s.f, &tasks).unwrap()
            })
            .collect()
    };
    let (v, af, i2i) = (
        counts(Algo::Vanilla),
        counts(Algo::AdapterFusion),
        counts(Algo::I2I),
    );
    for k in 1..=5 {
        let i = k - 1;
        for (algo, c) in [
            (Algo::Vanilla, &v),
            (Algo::AdapterFusion, &af),
            (Algo::I2I, &i2i),
        ] {
            pass &= c[i] == common::expected(algo, k, &s);
        }
        pass &= i2i[i].inference == v[i].inference;
        pass &= af[i].total - i2i[i].total == (k - 1) * s.f;
        pass &= af[i].training_forward >= i2i[i].training_forward
            && i2i[i].training_forward >= v[i].training_forward;
        pass &= af[i].inference >= i2i[i].inference && af[i].total >= i2i[i].total;
        if k >= 2 {
            pass &= af[i].training_forward > i2i[i].training_forward
                && af[i].inference > i2i[i].inference;
        }
        if k >= 3 {
            pass &= i2i[i].training_forward > v[i].training_forward;
        }
    }
    // The recorded counts of real runs follow the same enumeration.
    let mut checked = 0;
    for ((_, label, _), out) in runs.iter() {
        let algo = out.record.algo;
        for (j, t) in out.record.tasks.iter().enumerate() {
            pass &= t.params == common::expected(algo, j + 1, &s);
            checked += 1;
        }
        if label == "adapterfusion" {
            for (j, t) in out.record.tasks.iter().enumerate() {
                pass &= t.params.total - i2i[j].total == j * s.f;
            }
        }
    }
    Verdict::new(
        pass,
        vec![
            format!("B={} Phi={} Psi={} F={}", s.b, s.phi, s.psi, s.f),
            format!(
                "after task 5: total vanilla {} i2i {} adapterfusion {} (diff {} = 4F); inference i2i {} = vanilla {}",
                v[4].total,
                i2i[4].total,
                af[4].total,
                af[4].total - i2i[4].total,
                i2i[4].inference,
                v[4].inference
            ),
            format!("{checked} recorded task counts match the enumeration"),
        ],
    )
}

/// (seed, method label, order) -> run.
type Runs = BTreeMap<(u64, String, usize), RunOutput>;

fn cl_overrides(out: &Path) -> Vec<String> {
    let mut o = vec![format!("out={:?}", out.display().to_string())];
    for p in CL_PHASES {
        o.push(format!("hyper.{p}.epochs={CL_EPOCHS}"));
        o.push(format!("hyper.{p}.adam.lr={CL_LR:e}"));
    }
    o
}

fn schedule_config(
    base: &RunConfig,
    seed: u64,
    algo: Algo,
    variant: Option<I2IVariant>,
    order: usize,
) -> RunConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.algo = algo.name().to_string();
    c.variant = variant.and_then(|v| v.name()).map(str::to_string);
    c.order = order;
    c.knowledge_free = algo == Algo::I2I;
    c.audit = AuditMode::Final;
    c
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-task means over the orders in which the task is not first.
fn per_task_later(
    records: &[&CLRunRecord],
    f: impl Fn(&i2i_core::harness::TaskRecord) -> Option<f64>,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for t in r.tasks.iter().skip(1) {
            if let Some(v) = f(t) {
                acc.entry(t.task_id.clone()).or_default().push(v);
            }
        }
    }
    acc.into_iter()
        .map(|(k, v)| (k, mean(&v).unwrap()))
        .collect()
}

struct SeedSummary {
    table: MetricTable,
    improvise: BTreeMap<String, f64>,
    knowledge_free: BTreeMap<String, f64>,
}

impl SeedSummary {
    fn row(&self, method: &str) -> &i2i_core::metrics::MetricRow {
        self.table
            .rows
            .iter()
            .find(|r| r.method == method)
            .expect("method row")
    }
}

fn summarize(runs: &Runs, vanilla: &BTreeMap<u64, RunOutput>, seed: u64) -> SeedSummary {
    let candidates: Vec<CLRunRecord> = runs
        .iter()
        .filter(|((s, _, _), _)| *s == seed)
        .map(|(_, o)| o.record.clone())
        .collect();
    let table = metric_table(&vanilla[&seed].record, &candidates).unwrap();
    let ff: Vec<&CLRunRecord> = candidates
        .iter()
        .filter(|r| r.variant_name.as_deref() == Some("FF"))
        .collect();
    SeedSummary {
        table,
        improvise: per_task_later(&ff, |t| t.phases.score(Phase::Improvise)),
        knowledge_free: per_task_later(&ff, |t| t.knowledge_free_score),
    }
}

/// At least two of the three seeds.
fn majority(n: usize) -> bool {
    n >= 2
}

fn directional(summaries: &BTreeMap<u64, SeedSummary>, secs: f64) -> Verdict {
    let mut detail = Vec::new();
    let mut pass = secs < DIRECTIONAL_BUDGET_S;
    detail.push(format!(
        "{} seeds x 3 orders in {secs:.0}s (< {DIRECTIONAL_BUDGET_S}s)",
        summaries.len()
    ));

    let overall = |s: &SeedSummary, m: &str| s.row(m).overall;
    let a = summaries
        .values()
        .filter(|s| overall(s, "i2i_FF") > 0.0)
        .count();
    let b = summaries
        .values()
        .filter(|s| overall(s, "i2i_FF") >= overall(s, "adapterfusion"))
        .count();
    let ff: Vec<String> = summaries
        .values()
        .map(|s| format!("{:.2}", overall(s, "i2i_FF")))
        .collect();
    let af: Vec<String> = summaries
        .values()
        .map(|s| format!("{:.2}", overall(s, "adapterfusion")))
        .collect();
    detail.push(format!("(a) FF overall > 0 in {a}/3 seeds: FF {ff:?}"));
    detail.push(format!(
        "(b) FF overall >= AdapterFusion in {b}/3 seeds: AF {af:?}"
    ));
    pass &= majority(a) && majority(b);

    let tasks: Vec<String> = summaries.values().next().unwrap().table.task_ids.clone();
    let mut c_ok = true;
    let mut c_line = Vec::new();
    let mut d_ok = true;
    let mut d_line = Vec::new();
    for id in &tasks {
        let c = summaries
            .values()
            .filter(|s| match (s.improvise.get(id), s.knowledge_free.get(id)) {
                (Some(i), Some(k)) => i >= k,
                _ => false,
            })
            .count();
        c_ok &= majority(c);
        c_line.push(format!("{id} {c}/3"));
        let col = tasks.iter().position(|t| t == id).unwrap();
        let d = summaries
            .values()
            .filter(|s| {
                match (
                    s.row("i2i_FF").cells[col].decay,
                    s.row("i2i_FL").cells[col].decay,
                ) {
                    (Some(f), Some(l)) => f <= l,
                    _ => false,
                }
            })
            .count();
        d_ok &= majority(d);
        d_line.push(format!("{id} {d}/3"));
    }
    detail.push(format!(
        "(c) improvise >= knowledge-free per task: {}",
        c_line.join(", ")
    ));
    detail.push(format!(
        "(d) FF decay <= FL decay per task: {}",
        d_line.join(", ")
    ));
    pass &= c_ok && d_ok;

    let gain = |s: &SeedSummary, m: &str| s.row(m).phase3_gain;
    let e = summaries
        .values()
        .filter(|s| matches!((gain(s, "i2i_LL"), gain(s, "i2i_FF")), (Some(l), Some(f)) if l >= f))
        .count();
    let gains: Vec<String> = summaries
        .values()
        .map(|s| {
            format!(
                "LL {:.1} FF {:.1}",
                gain(s, "i2i_LL").unwrap_or(f64::NAN),
                gain(s, "i2i_FF").unwrap_or(f64::NAN)
            )
        })
        .collect();
    detail.push(format!(
        "(e) LL phase-three gain >= FF in {e}/3 seeds: {}",
        gains.join("; ")
    ));
    pass &= majority(e);
    Verdict {
        pass,
        statistical: true,
        detail,
    }
}

fn distillation(runs: &Runs) -> Verdict {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut slowest = 0.0f64;
    for ((_, label, _), out) in runs {
        if label != "i2i_FF" {
            continue;
        }
        for t in out.record.tasks.iter().skip(2) {
            let p = t.phases.get(Phase::Initialize).expect("initialize phase");
            let (i, f) = (
                p.distill_initial_loss.unwrap(),
                p.distill_final_loss.unwrap(),
            );
            worst = worst.max(f / i);
            count += 1;
        }
        for t in &out.timings.tasks {
            slowest = slowest.max(t.seconds);
        }
    }
    Verdict::new(
        count > 0 && worst <= DISTILL_RATIO && slowest < TASK_BUDGET_S,
        vec![format!(
            "{count} FF tasks with k >= 3: max final/initial distillation loss {worst:.4} (<= {DISTILL_RATIO}); slowest task {slowest:.1}s (< {TASK_BUDGET_S}s)"
        )],
    )
}

/// Re-scores every task of `out` from checkpoint bytes written to `dir`.
fn rescore_from_disk(lab: &Lab, out: &RunOutput, dir: &Path) -> Result<usize, String> {
    out.write(dir).map_err(|e| e.to_string())?;
    let record = CLRunRecord::read(&dir.join("record.json")).map_err(|e| e.to_string())?;
    if record != out.record {
        return Err("record changed on the way through disk".into());
    }
    let mut store = Vec::new();
    for t in &record.tasks {
        let c = Checkpoint::read(&dir.join(&t.checkpoint_file)).map_err(|e| e.to_string())?;
        store.push(
            StoredTask::from_checkpoint(&t.task_id, &c, &lab.backbone.config)
                .map_err(|e| e.to_string())?,
        );
    }
    for (j, t) in record.tasks.iter().enumerate() {
        let val = &lab.dataset(&t.task_id).unwrap().val;
        let again = evaluate_stored(
            &lab.backbone,
            &store,
            j,
            val,
            lab.hyper.adapter.eval_batch_size,
        )
        .map_err(|e| e.to_string())?;
        if again.to_bits() != t.score.to_bits() {
            return Err(format!(
                "{} {}: recorded {} re-scored {again}",
                record.algo.name(),
                t.task_id,
                t.score
            ));
        }
    }
    Ok(record.tasks.len())
}

fn forgetting(
    lab: &Lab,
    runs: &Runs,
    vanilla: &BTreeMap<u64, RunOutput>,
    cti: &RunOutput,
    root: &Path,
) -> Verdict {
    let mut checked = 0;
    let mut errors = Vec::new();
    let seed0 = runs
        .iter()
        .filter(|((s, _, _), _)| *s == SEEDS[0])
        .map(|((_, l, o), out)| (format!("{l}_order{o}"), out))
        .chain([
            ("vanilla".to_string(), &vanilla[&SEEDS[0]]),
            ("closest_task_init".to_string(), cti),
        ]);
    for (name, out) in seed0 {
        match rescore_from_disk(lab, out, &root.join("rescore").join(&name)) {
            Ok(n) => checked += n,
            Err(e) => errors.push(e),
        }
    }
    let audited = runs.len() + vanilla.len() + 1;
    Verdict::new(
        errors.is_empty(),
        vec![
            format!("{audited} five-task runs passed the in-run final audit (bit-exact re-scoring from checkpoint bytes)"),
            format!("{checked} tasks of seed {} re-scored from files on disk, bit-identical; errors {errors:?}", SEEDS[0]),
        ],
    )
}

fn copy_contract(lab: &Lab, runs: &Runs) -> Verdict {
    let mut pass = true;
    let mut k2 = 0;
    for ((_, label, _), out) in runs {
        if !label.starts_with("i2i") {
            continue;
        }
        let p = out.record.tasks[1]
            .phases
            .get(Phase::Initialize)
            .expect("initialize phase");
        pass &= p.steps == 0 && p.examples == 0 && p.distill_initial_loss.is_none();
        k2 += 1;
    }
    // Replay the second task of one run: the copy is bitwise, the phase takes
    // no optimizer step, and with no third-phase budget Φ₂ stays the copy.
    let out = &runs[&(SEEDS[0], "i2i_FF".to_string(), 1)];
    let phi1 = &out.store[0].adapter;
    let ds = lab.dataset(&out.record.tasks[1].task_id).unwrap();
    let init = initialize(
        lab.context(),
        2,
        &[phi1],
        None,
        &out.store[1].head,
        &ds.train,
        &ds.val,
        Seed(1),
    )
    .unwrap();
    pass &= bit_identical(&init.adapter, phi1) && init.record.steps == 0;
    let mut hyper = lab.hyper.clone();
    hyper.train.epochs = 0;
    let ctx = PhaseContext {
        hyper: &hyper,
        ..lab.context()
    };
    let step = i2i_step(
        ctx,
        2,
        I2IVariant::FF,
        &ds.train,
        &ds.val,
        &[phi1],
        Seed(5),
        None,
    )
    .unwrap();
    pass &=
        bit_identical(&step.adapter, phi1) && step.trace.get(Phase::Initialize).unwrap().steps == 0;
    Verdict::new(
        pass,
        vec![format!(
            "{k2} i2i runs record zero phase-two steps at k=2; replay: copy bit-identical to Phi1, 0 steps, Phi2 at phase-three start bit-identical"
        )],
    )
}

fn tree_bytes(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !skip.iter().any(|s| p.file_name().unwrap() == *s) {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(base: &RunConfig, warm: &RunOutput, root: &Path) -> Verdict {
    let mut detail = Vec::new();
    let mut pass = true;
    // A second output root: data, backbone and one run from a cold process state.
    let mut other = base.clone();
    other.out = Some(root.join("second"));
    let run_cfg = schedule_config(&other, SEEDS[0], Algo::I2I, Some(I2IVariant::FF), 1);
    let first_dir = base.out_root();
    let second_dir = other.out_root();
    let result = (|| -> i2i_core::Result<()> {
        cli::pretrain(&other, &mut |_| {})?;
        cli::run(&run_cfg, &mut |_| {})?;
        Ok(())
    })();
    if let Err(e) = result {
        return Verdict::new(false, vec![format!("second pipeline failed: {e}")]);
    }
    let warm_cfg = schedule_config(base, SEEDS[0], Algo::I2I, Some(I2IVariant::FF), 1);
    let warm_dir = warm_cfg.run_dir().unwrap();
    warm.write(&warm_dir).unwrap();
    for rel in ["data", "backbone.ckpt"] {
        let (a, b) = (first_dir.join(rel), second_dir.join(rel));
        let same = if a.is_dir() {
            tree_bytes(&a, &[]) == tree_bytes(&b, &[])
        } else {
            std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
        };
        pass &= same;
        detail.push(format!(
            "{rel}: {}",
            if same { "identical" } else { "differs" }
        ));
    }
    let cold_dir = run_cfg.run_dir().unwrap();
    let (a, b) = (
        tree_bytes(&warm_dir, &["timings.json"]),
        tree_bytes(&cold_dir, &["timings.json"]),
    );
    let same = a == b && a.contains_key("record.json");
    pass &= same;
    detail.push(format!(
        "run directory ({} files, memoized vs cold): {}",
        a.len(),
        if same { "identical" } else { "differs" }
    ));
    let mut svgs = Vec::new();
    for dir in [&warm_dir, &cold_dir] {
        let out = dir.join("params.svg");
        cli::plot(&dir.join("params.csv"), &out).unwrap();
        let table = cli::metrics(&dir.join("record.json"), &[dir.join("record.json")]).unwrap();
        std::fs::write(dir.join("table.csv"), table).unwrap();
        cli::plot(&dir.join("table.csv"), &dir.join("table.svg")).unwrap();
        svgs.push((
            std::fs::read(out).unwrap(),
            std::fs::read(dir.join("table.svg")).unwrap(),
        ));
    }
    let same = svgs[0] == svgs[1];
    pass &= same;
    detail.push(format!(
        "plots: {}",
        if same { "identical" } else { "differ" }
    ));
    Verdict::new(pass, detail)
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut verdicts: BTreeMap<usize, (&str, Verdict)> = BTreeMap::new();
    verdicts.insert(1, ("gradient suite", gradients()));
    verdicts.insert(2, ("metric reproduction", published_transfers()));
    verdicts.insert(8, ("closest-task selection", closest_selection()));
    verdicts.insert(10, ("low-shot contract", lowshot()));

    let root = tempfile::tempdir().unwrap();
    let base = RunConfig::load(None, &cl_overrides(root.path())).unwrap();
    let t_pre = Instant::now();
    cli::pretrain(&base, &mut |_| {}).unwrap();
    let (backbone, psi0) = load_backbone(&base.backbone_path(), &base.backbone).unwrap();
    let (datasets, _) = cli::gen(&base, &mut |_| {}).unwrap();
    let mut lab = Lab::new(backbone, psi0, base.hyper.clone(), datasets).unwrap();
    println!(
        "setup: pretraining and data {:.1}s",
        t_pre.elapsed().as_secs_f64()
    );

    let t_dir = Instant::now();
    let mut runs: Runs = BTreeMap::new();
    let mut vanilla = BTreeMap::new();
    for seed in SEEDS {
        let c = schedule_config(&base, seed, Algo::Vanilla, None, 1);
        vanilla.insert(seed, lab.run_schedule(&c.schedule().unwrap()).unwrap());
        for order in 1..=3 {
            for (label, algo, variant) in METHODS {
                let c = schedule_config(&base, seed, algo, variant, order);
                let out = lab.run_schedule(&c.schedule().unwrap()).unwrap();
                runs.insert((seed, label.to_string(), order), out);
            }
        }
        println!(
            "seed {seed} done after {:.0}s",
            t_dir.elapsed().as_secs_f64()
        );
    }
    let dir_secs = t_dir.elapsed().as_secs_f64();
    let summaries: BTreeMap<u64, SeedSummary> = SEEDS
        .iter()
        .map(|&s| (s, summarize(&runs, &vanilla, s)))
        .collect();
    for (seed, s) in &summaries {
        println!("seed {seed} metric table\n{}", s.table.to_csv().trim_end());
    }
    verdicts.insert(
        7,
        ("directional results", directional(&summaries, dir_secs)),
    );
    verdicts.insert(6, ("distillation effectiveness", distillation(&runs)));
    verdicts.insert(
        5,
        ("k=2 initialization contract", copy_contract(&lab, &runs)),
    );
    verdicts.insert(3, ("parameter accounting", accounting(&lab, &runs)));

    let cti_cfg = schedule_config(&base, SEEDS[0], Algo::ClosestTaskInit, None, 1);
    let cti = lab.run_schedule(&cti_cfg.schedule().unwrap()).unwrap();
    verdicts.insert(
        4,
        (
            "zero forgetting",
            forgetting(&lab, &runs, &vanilla, &cti, root.path()),
        ),
    );
    let warm = &runs[&(SEEDS[0], "i2i_FF".to_string(), 1)];
    verdicts.insert(9, ("determinism", determinism(&base, warm, root.path())));

    println!();
    let mut failed = 0;
    for (n, (name, v)) in &verdicts {
        let flag = if v.statistical { " [statistical]" } else { "" };
        println!(
            "criterion {n:>2} {}: {name}{flag}",
            if v.pass { "PASS" } else { "FAIL" }
        );
        for d in &v.detail {
            println!("    {d}");
        }
        failed += !v.pass as usize;
    }
    println!(
        "acceptance: {} of {} criteria pass, {:.0}s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
