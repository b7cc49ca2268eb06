//! Transfer, distillation decay and phase-three gain, plus tables built
//! from run records.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::harness::CLRunRecord;
use crate::i2i::Phase;

/// `100·(S_F − S_A)/S_A`: relative improvement over the vanilla adapter.
pub fn knowledge_transfer(s_f: f64, s_a: f64) -> Result<f64> {
    if s_a <= 0.0 {
        return invalid(format!(
            "transfer is undefined for a vanilla score of {s_a}"
        ));
    }
    Ok(100.0 * (s_f - s_a) / s_a)
}

/// Mean of the per-task transfers of tasks `2..K`.
pub fn overall_transfer(per_task: &[f64]) -> Result<f64> {
    mean(per_task).ok_or_else(|| Error::InvalidArgument("overall transfer of an empty list".into()))
}

/// `100·(S_F − S_Φ)/S_F`: score lost by distilling the improvised model.
pub fn distillation_decay(s_f: f64, s_phi: f64) -> Result<f64> {
    if s_f <= 0.0 {
        return invalid(format!("decay is undefined for a teacher score of {s_f}"));
    }
    Ok(100.0 * (s_f - s_phi) / s_f)
}

/// Mean over tasks of `100·(after3 − after2)/after2`.
pub fn phase3_gain(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return invalid("phase-three gain needs at least one task");
    }
    let gains = pairs
        .iter()
        .map(|&(a2, a3)| {
            if a2 <= 0.0 {
                invalid(format!(
                    "phase-three gain is undefined for a phase-two score of {a2}"
                ))
            } else {
                Ok(100.0 * (a3 - a2) / a2)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&gains).expect("nonempty"))
}

/// Unweighted mean of per-order values.
pub fn cross_order_mean(values: &[f64]) -> Result<f64> {
    mean(values).ok_or_else(|| Error::InvalidArgument("no orders to average".into()))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One task's column pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCell {
    pub transfer: f64,
    pub score: f64,
    pub decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub cells: Vec<TaskCell>,
    pub overall: f64,
    pub phase3_gain: Option<f64>,
    pub orders: usize,
}

/// Per-task transfer and score, overall transfer, decay and gain, one row
/// per method, columns in a fixed task order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub task_ids: Vec<String>,
    pub rows: Vec<MetricRow>,
}

fn method_label(r: &CLRunRecord) -> String {
    match &r.variant_name {
        Some(v) => format!("{}_{v}", r.algo.name()),
        None => r.algo.name().to_string(),
    }
}

/// Builds the table from a vanilla reference record and candidate records.
/// Candidates of the same method are treated as different task orders:
/// per-task values average over the orders in which the task is not first
/// (all orders when it always is), overall transfer averages the per-order
/// overall values.
pub fn metric_table(vanilla: &CLRunRecord, candidates: &[CLRunRecord]) -> Result<MetricTable> {
    let mut task_ids: Vec<String> = vanilla.tasks.iter().map(|t| t.task_id.clone()).collect();
    task_ids.sort();
    let reference: BTreeMap<&str, f64> = vanilla
        .tasks
        .iter()
        .map(|t| (t.task_id.as_str(), t.score))
        .collect();
    let mut groups: BTreeMap<String, Vec<&CLRunRecord>> = BTreeMap::new();
    for c in candidates {
        let mut ids: Vec<String> = c.tasks.iter().map(|t| t.task_id.clone()).collect();
        ids.sort();
        if ids != task_ids {
            return invalid(format!(
                "candidate {} covers tasks {ids:?}, vanilla covers {task_ids:?}",
                method_label(c)
            ));
        }
        groups.entry(method_label(c)).or_default().push(c);
    }
    let mut rows = Vec::new();
    for (method, records) in groups {
        let mut overall = Vec::new();
        let mut gains = Vec::new();
        let mut per_task: BTreeMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> =
            BTreeMap::new();
        for r in &records {
            let mut later = Vec::new();
            let mut pairs = Vec::new();
            for (pos, t) in r.tasks.iter().enumerate() {
                let tr = knowledge_transfer(t.score, reference[t.task_id.as_str()])?;
                let e = per_task.entry(t.task_id.as_str()).or_default();
                if pos > 0 {
                    later.push(tr);
                    e.0.push(tr);
                    e.1.push(t.score);
                } else {
                    e.2.push(tr);
                    e.3.push(t.score);
                }
                if let (Some(f), Some(p)) = (
                    t.phases.score(Phase::Improvise),
                    t.phases.score(Phase::Initialize),
                ) {
                    if let Ok(d) = distillation_decay(f, p) {
                        e.4.push(d);
                    }
                }
                if pos > 0 {
                    if let (Some(a2), Some(a3)) = (
                        t.phases.score(Phase::Initialize),
                        t.phases.score(Phase::Train),
                    ) {
                        pairs.push((a2, a3));
                    }
                }
            }
            if !later.is_empty() {
                overall.push(overall_transfer(&later)?);
            }
            // Undefined (a zero phase-two score) for this order: leave it out, as the record does.
            if let Ok(g) = phase3_gain(&pairs) {
                gains.push(g);
            }
        }
        let cells = task_ids
            .iter()
            .map(|id| {
                let (tl, sl, tf, sf, dec) = &per_task[id.as_str()];
                let (t, s) = if tl.is_empty() { (tf, sf) } else { (tl, sl) };
                TaskCell {
                    transfer: mean(t).unwrap_or(0.0),
                    score: mean(s).unwrap_or(0.0),
                    decay: mean(dec),
                }
            })
            .collect();
        rows.push(MetricRow {
            method,
            cells,
            overall: mean(&overall).unwrap_or(0.0),
            phase3_gain: mean(&gains),
            orders: records.len(),
        });
    }
    Ok(MetricTable { task_ids, rows })
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for id in &self.task_ids {
            out.push_str(&format!(",{id} T,{id} S,{id} decay"));
        }
        out.push_str(",overall T,phase3 gain,orders\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&r.method);
            for c in &r.cells {
                out.push_str(&format!(
                    ",{:.2},{:.2},{}",
                    c.transfer,
                    c.score,
                    opt(c.decay)
                ));
            }
            out.push_str(&format!(
                ",{:.2},{},{}\n",
                r.overall,
                opt(r.phase3_gain),
                r.orders
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty metric table".into()))?
            .split(',')
            .collect();
        let n = header.len();
        if n < 4
            || header[0] != "method"
            || (n - 4) % 3 != 0
            || header[n - 3..] != ["overall T", "phase3 gain", "orders"]
        {
            return Err(Error::Format("not a metric table header".into()));
        }
        let mut task_ids = Vec::new();
        for chunk in header[1..n - 3].chunks(3) {
            let id = chunk[0]
                .strip_suffix(" T")
                .ok_or_else(|| Error::Format(format!("bad column {:?}", chunk[0])))?;
            if chunk[1] != format!("{id} S") || chunk[2] != format!("{id} decay") {
                return Err(Error::Format(format!("bad columns for task {id}")));
            }
            task_ids.push(id.to_string());
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        let opt = |s: &str| {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let mut rows = Vec::new();
        for line in lines {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != n {
                return Err(Error::Format(format!(
                    "row {:?} has {} cells, expected {n}",
                    c[0],
                    c.len()
                )));
            }
            let cells = c[1..n - 3]
                .chunks(3)
                .map(|t| {
                    Ok(TaskCell {
                        transfer: num(t[0])?,
                        score: num(t[1])?,
                        decay: opt(t[2])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(MetricRow {
                method: c[0].to_string(),
                cells,
                overall: num(c[n - 3])?,
                phase3_gain: opt(c[n - 2])?,
                orders: c[n - 1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad order count {:?}", c[n - 1])))?,
            });
        }
        Ok(MetricTable { task_ids, rows })
    }
}
