//! Synthetic scene question answering.
//!
//! A scene is a fixed number of object slots, each with a colour, a shape
//! and a size. Slots are rendered to continuous feature vectors through a
//! seeded codebook plus bounded noise, so the discrete scene can always be
//! recovered by nearest-codebook decoding. Each task asks one kind of
//! question about the scene; every answer is computed exactly from the slots.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{sha256_hex, Rng64, Seed};

/// Closed token vocabulary shared by every task.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const Q_COUNT: usize = 3;
    pub const Q_EXIST: usize = 4;
    pub const Q_MAX_SIZE_COLOR: usize = 5;
    pub const Q_PARITY: usize = 6;
    pub const Q_COMPARE: usize = 7;
    pub const COLOR_BASE: usize = 8;
    pub const SHAPE_BASE: usize = 16;
    pub const NUMBER_BASE: usize = 22;
    pub const YES: usize = 31;
    pub const NO: usize = 32;
    pub const EVEN: usize = 33;
    pub const ODD: usize = 34;
    pub const MORE: usize = 35;
    pub const SAME: usize = 36;
    /// Number of token ids in use; the backbone vocabulary must cover it.
    pub const SIZE: usize = 37;

    pub fn color(c: usize) -> usize {
        COLOR_BASE + c
    }

    pub fn shape(s: usize) -> usize {
        SHAPE_BASE + s
    }

    pub fn number(n: usize) -> usize {
        NUMBER_BASE + n
    }
}

pub const N_COLORS: usize = 8;
pub const N_SHAPES: usize = 6;
pub const N_SIZES: usize = 4;
pub const QUESTION_LEN: usize = 3;

pub const COLOR_NAMES: [&str; N_COLORS] = [
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPE_NAMES: [&str; N_SHAPES] =
    ["circle", "square", "triangle", "star", "hexagon", "cross"];

/// Arguments reserved for pretraining; CL tasks never use them.
pub const PRETRAIN_COLORS: [usize; 5] = [3, 4, 5, 6, 7];
pub const PRETRAIN_SHAPES: [usize; 3] = [3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
}

/// The question a task asks, with its arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Query {
    /// How many objects have this colour?
    Count { color: usize },
    /// Is there an object of this shape?
    Exist { shape: usize },
    /// Colour of the largest object of this shape (unique maximum).
    MaxSizeColor { shape: usize },
    /// Is the number of objects of this shape even or odd?
    Parity { shape: usize },
    /// Which of two colours occurs more often?
    Compare { a: usize, b: usize },
}

impl Query {
    pub fn kind(&self) -> &'static str {
        match self {
            Query::Count { .. } => "count",
            Query::Exist { .. } => "exist",
            Query::MaxSizeColor { .. } => "max_size_color",
            Query::Parity { .. } => "parity",
            Query::Compare { .. } => "compare",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Query::Count { color } => color < N_COLORS,
            Query::Exist { shape } | Query::MaxSizeColor { shape } | Query::Parity { shape } => {
                shape < N_SHAPES
            }
            Query::Compare { a, b } => a < N_COLORS && b < N_COLORS && a != b,
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("bad query arguments {self:?}"))
        }
    }

    pub fn question_tokens(&self) -> Vec<usize> {
        use vocab::*;
        match *self {
            Query::Count { color: c } => vec![Q_COUNT, vocab::color(c), PAD],
            Query::Exist { shape: s } => vec![Q_EXIST, vocab::shape(s), PAD],
            Query::MaxSizeColor { shape: s } => vec![Q_MAX_SIZE_COLOR, vocab::shape(s), PAD],
            Query::Parity { shape: s } => vec![Q_PARITY, vocab::shape(s), PAD],
            Query::Compare { a, b } => vec![Q_COMPARE, vocab::color(a), vocab::color(b)],
        }
    }

    /// Colour and shape arguments mentioned by the query.
    pub fn arguments(&self) -> (Vec<usize>, Vec<usize>) {
        match *self {
            Query::Count { color } => (vec![color], vec![]),
            Query::Exist { shape } | Query::MaxSizeColor { shape } | Query::Parity { shape } => {
                (vec![], vec![shape])
            }
            Query::Compare { a, b } => (vec![a, b], vec![]),
        }
    }

    /// Brute-force evaluation over discrete slots. `None` when the question
    /// has no well-defined answer for this scene.
    pub fn answer(&self, slots: &[Slot]) -> Option<Vec<usize>> {
        let count_color = |c: usize| slots.iter().filter(|s| s.color == c).count();
        let count_shape = |sh: usize| slots.iter().filter(|s| s.shape == sh).count();
        match *self {
            Query::Count { color } => Some(vec![vocab::number(count_color(color))]),
            Query::Exist { shape } => Some(vec![if count_shape(shape) > 0 {
                vocab::YES
            } else {
                vocab::NO
            }]),
            Query::MaxSizeColor { shape } => {
                let max = slots
                    .iter()
                    .filter(|s| s.shape == shape)
                    .map(|s| s.size)
                    .max()?;
                let mut top = slots.iter().filter(|s| s.shape == shape && s.size == max);
                let first = top.next()?;
                if top.next().is_some() {
                    return None;
                }
                Some(vec![vocab::color(first.color)])
            }
            Query::Parity { shape } => Some(vec![if count_shape(shape) % 2 == 0 {
                vocab::EVEN
            } else {
                vocab::ODD
            }]),
            Query::Compare { a, b } => {
                let (na, nb) = (count_color(a), count_color(b));
                Some(match na.cmp(&nb) {
                    std::cmp::Ordering::Greater => vec![vocab::MORE, vocab::color(a)],
                    std::cmp::Ordering::Less => vec![vocab::MORE, vocab::color(b)],
                    std::cmp::Ordering::Equal => vec![vocab::SAME],
                })
            }
        }
    }

    /// The balanced answer set used by default for this query.
    pub fn default_answers(&self) -> Vec<Vec<usize>> {
        match *self {
            Query::Count { .. } => (0..4).map(|n| vec![vocab::number(n)]).collect(),
            Query::Exist { .. } => vec![vec![vocab::YES], vec![vocab::NO]],
            Query::MaxSizeColor { .. } => (0..N_COLORS).map(|c| vec![vocab::color(c)]).collect(),
            Query::Parity { .. } => vec![vec![vocab::EVEN], vec![vocab::ODD]],
            Query::Compare { a, b } => vec![
                vec![vocab::MORE, vocab::color(a)],
                vec![vocab::MORE, vocab::color(b)],
                vec![vocab::SAME],
            ],
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Query::Count { color } => write!(f, "count({})", COLOR_NAMES[color]),
            Query::Exist { shape } => write!(f, "exist({})", SHAPE_NAMES[shape]),
            Query::MaxSizeColor { shape } => write!(f, "max_size_color({})", SHAPE_NAMES[shape]),
            Query::Parity { shape } => write!(f, "parity({})", SHAPE_NAMES[shape]),
            Query::Compare { a, b } => write!(f, "compare({},{})", COLOR_NAMES[a], COLOR_NAMES[b]),
        }
    }
}

/// One continual-learning task definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QATask {
    pub id: String,
    pub query: Query,
    /// Answer sequences the generator balances over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<Vec<usize>>>,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: Seed,
}

impl QATask {
    pub fn answer_space(&self) -> Vec<Vec<usize>> {
        self.answers
            .clone()
            .unwrap_or_else(|| self.query.default_answers())
    }
}

/// The five default tasks, one per query kind.
pub fn default_suite(train_size: usize, val_size: usize, seed: Seed) -> Vec<QATask> {
    let queries = [
        ("count_red", Query::Count { color: 0 }),
        ("exist_circle", Query::Exist { shape: 0 }),
        ("max_size_color_triangle", Query::MaxSizeColor { shape: 2 }),
        ("parity_square", Query::Parity { shape: 1 }),
        ("compare_blue_green", Query::Compare { a: 1, b: 2 }),
    ];
    queries
        .iter()
        .map(|(id, q)| QATask {
            id: id.to_string(),
            query: *q,
            answers: None,
            train_size,
            val_size,
            seed: seed.child(id),
        })
        .collect()
}

/// Three fixed task orders over `n` tasks, with distinct first tasks.
pub fn task_orders(n: usize) -> Vec<Vec<usize>> {
    let mut rng = Seed(0x5eed_0de5).child("task-orders").rng();
    let mut orders: Vec<Vec<usize>> = Vec::new();
    while orders.len() < 3 {
        let mut p: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut p);
        let fresh_first = n < 3 || orders.iter().all(|o| o[0] != p[0]);
        if fresh_first && !orders.contains(&p) {
            orders.push(p);
        }
    }
    orders
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `n_slots × feature_dim`, row-major.
    pub features: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Seeded codebook turning discrete slots into feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub feature_dim: usize,
    pub n_slots: usize,
    colors: Vec<Vec<f64>>,
    shapes: Vec<Vec<f64>>,
    sizes: Vec<Vec<f64>>,
    /// Upper bound on the Euclidean norm of per-slot noise.
    noise_radius: f64,
    min_distance: f64,
}

impl World {
    pub fn new(feature_dim: usize, n_slots: usize, seed: Seed) -> Result<World> {
        if feature_dim == 0 || n_slots == 0 {
            return invalid("world needs positive feature_dim and n_slots");
        }
        let mut rng = seed.child("codebook").rng();
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..feature_dim).map(|_| rng.normal()).collect())
                .collect()
        };
        let colors = table(N_COLORS);
        let shapes = table(N_SHAPES);
        let sizes = table(N_SIZES);
        let mut world = World {
            feature_dim,
            n_slots,
            colors,
            shapes,
            sizes,
            noise_radius: 0.0,
            min_distance: 0.0,
        };
        let codes: Vec<Vec<f64>> = world.all_slots().iter().map(|s| world.code(s)).collect();
        let mut dmin = f64::INFINITY;
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                dmin = dmin.min(dist(&codes[i], &codes[j]));
            }
        }
        if dmin <= 0.0 {
            return invalid("degenerate codebook");
        }
        world.min_distance = dmin;
        world.noise_radius = 0.25 * dmin;
        Ok(world)
    }

    fn all_slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(N_COLORS * N_SHAPES * N_SIZES);
        for color in 0..N_COLORS {
            for shape in 0..N_SHAPES {
                for size in 0..N_SIZES {
                    out.push(Slot { color, shape, size });
                }
            }
        }
        out
    }

    fn code(&self, s: &Slot) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|j| self.colors[s.color][j] + self.shapes[s.shape][j] + self.sizes[s.size][j])
            .collect()
    }

    pub fn noise_radius(&self) -> f64 {
        self.noise_radius
    }

    pub fn min_codebook_distance(&self) -> f64 {
        self.min_distance
    }

    /// Codebook vector plus noise drawn uniformly from the ball of radius
    /// `noise_radius`.
    pub fn render_slot(&self, s: &Slot, rng: &mut Rng64) -> Vec<f64> {
        let mut dir: Vec<f64> = (0..self.feature_dim).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let r = self.noise_radius * rng.uniform().powf(1.0 / self.feature_dim as f64);
        dir.iter_mut().for_each(|x| *x *= r / norm);
        self.code(s).iter().zip(&dir).map(|(c, n)| c + n).collect()
    }

    /// Nearest-codebook decoding of one example's features.
    pub fn decode(&self, features: &[f64]) -> Result<Vec<Slot>> {
        if features.len() % self.feature_dim != 0 {
            return invalid("feature length is not a multiple of feature_dim");
        }
        let all = self.all_slots();
        let codes: Vec<Vec<f64>> = all.iter().map(|s| self.code(s)).collect();
        Ok(features
            .chunks(self.feature_dim)
            .map(|f| {
                let mut best = (f64::INFINITY, 0);
                for (i, c) in codes.iter().enumerate() {
                    let d = dist(f, c);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                all[best.1]
            })
            .collect())
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for row in self.colors.iter().chain(&self.shapes).chain(&self.sizes) {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&self.noise_radius.to_le_bytes());
        bytes.extend_from_slice(&(self.n_slots as u64).to_le_bytes());
        sha256_hex(&bytes)
    }

    fn random_scene(&self, rng: &mut Rng64) -> Vec<Slot> {
        (0..self.n_slots)
            .map(|_| Slot {
                color: rng.below(N_COLORS),
                shape: rng.below(N_SHAPES),
                size: rng.below(N_SIZES),
            })
            .collect()
    }

    fn render(&self, slots: &[Slot], rng: &mut Rng64) -> Vec<f64> {
        slots
            .iter()
            .flat_map(|s| self.render_slot(s, rng))
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const MAX_TRIES: usize = 20_000;

/// Draws a scene whose answer to `query` is `target`.
fn sample_for(
    world: &World,
    query: &Query,
    target: &[usize],
    rng: &mut Rng64,
    reject: impl Fn(&[Slot]) -> bool,
) -> Result<Vec<Slot>> {
    for _ in 0..MAX_TRIES {
        let scene = world.random_scene(rng);
        if query.answer(&scene).as_deref() == Some(target) && !reject(&scene) {
            return Ok(scene);
        }
    }
    Err(Error::InvalidArgument(format!(
        "infeasible balance: answer {target:?} for {query} not reachable within {MAX_TRIES} draws"
    )))
}

/// Generates the train and validation splits of one task. Answers cycle
/// through the task's answer space before shuffling, so classes are exactly
/// balanced up to one example. No discrete scene appears in both splits.
pub fn generate_task(world: &World, task: &QATask) -> Result<Dataset> {
    task.query.validate()?;
    let answers = task.answer_space();
    if answers.is_empty() {
        return invalid("empty answer space");
    }
    if task.train_size == 0 || task.val_size == 0 {
        return invalid("train and val sizes must be positive");
    }
    let question = task.query.question_tokens();
    let mut rng = task.seed.child("scenes").rng();
    let mut render_rng = task.seed.child("noise").rng();
    let mut seen: HashSet<Vec<Slot>> = HashSet::new();
    let mut make = |n: usize,
                    offset: usize,
                    is_val: bool,
                    seen: &mut HashSet<Vec<Slot>>|
     -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let target = &answers[(offset + i) % answers.len()];
            let scene = sample_for(world, &task.query, target, &mut rng, |s| {
                is_val && seen.contains(s)
            })?;
            if !is_val {
                seen.insert(scene.clone());
            }
            out.push(Example {
                features: world.render(&scene, &mut render_rng),
                question: question.clone(),
                answer: target.clone(),
            });
        }
        Ok(out)
    };
    let mut train = make(task.train_size, 0, false, &mut seen)?;
    let mut val = make(task.val_size, task.train_size, true, &mut seen)?;
    let mut order_rng = task.seed.child("order").rng();
    order_rng.shuffle(&mut train);
    order_rng.shuffle(&mut val);
    Ok(Dataset {
        task_id: task.id.clone(),
        train,
        val,
    })
}

/// Generic scene-QA mixture over all five query kinds, using only the
/// reserved pretraining arguments. Kinds alternate, so their counts differ by
/// at most one.
pub fn pretrain_corpus(world: &World, size: usize, seed: Seed) -> Result<Vec<Example>> {
    let mut rng = seed.child("pretrain-queries").rng();
    let mut scene_rng = seed.child("pretrain-scenes").rng();
    let mut render_rng = seed.child("pretrain-noise").rng();
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let pick_color = |rng: &mut Rng64| PRETRAIN_COLORS[rng.below(PRETRAIN_COLORS.len())];
        let pick_shape = |rng: &mut Rng64| PRETRAIN_SHAPES[rng.below(PRETRAIN_SHAPES.len())];
        let query = match i % 5 {
            0 => Query::Count {
                color: pick_color(&mut rng),
            },
            1 => Query::Exist {
                shape: pick_shape(&mut rng),
            },
            2 => Query::MaxSizeColor {
                shape: pick_shape(&mut rng),
            },
            3 => Query::Parity {
                shape: pick_shape(&mut rng),
            },
            _ => {
                let a = pick_color(&mut rng);
                let mut b = pick_color(&mut rng);
                while b == a {
                    b = pick_color(&mut rng);
                }
                Query::Compare { a, b }
            }
        };
        let answers = query.default_answers();
        let target = answers[rng.below(answers.len())].clone();
        let scene = sample_for(world, &query, &target, &mut scene_rng, |_| false)?;
        out.push(Example {
            features: world.render(&scene, &mut render_rng),
            question: query.question_tokens(),
            answer: target,
        });
    }
    Ok(out)
}

/// Percentage of predictions that equal their reference exactly.
pub fn score_exact_match(predictions: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return invalid(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        ));
    }
    if predictions.is_empty() {
        return invalid("exact match over an empty set");
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p == r)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Share of the most frequent answer, in percent.
pub fn majority_baseline(examples: &[Example]) -> f64 {
    let mut counts: std::collections::BTreeMap<&[usize], usize> = Default::default();
    for e in examples {
        *counts.entry(e.answer.as_slice()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    100.0 * top as f64 / examples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(color: usize, shape: usize, size: usize) -> Slot {
        Slot { color, shape, size }
    }

    #[test]
    fn count_red_over_slots() {
        let scene = [slot(0, 0, 0), slot(1, 2, 1), slot(0, 3, 2)];
        assert_eq!(
            Query::Count { color: 0 }.answer(&scene),
            Some(vec![vocab::number(2)])
        );
    }

    #[test]
    fn exist_without_match_is_no() {
        let scene = [slot(0, 1, 0), slot(1, 2, 1)];
        assert_eq!(
            Query::Exist { shape: 0 }.answer(&scene),
            Some(vec![vocab::NO])
        );
    }

    #[test]
    fn max_size_needs_unique_winner() {
        let q = Query::MaxSizeColor { shape: 2 };
        assert_eq!(q.answer(&[slot(0, 1, 3)]), None);
        assert_eq!(q.answer(&[slot(0, 2, 3), slot(1, 2, 3)]), None);
        assert_eq!(
            q.answer(&[slot(0, 2, 1), slot(5, 2, 3), slot(1, 1, 3)]),
            Some(vec![vocab::color(5)])
        );
    }

    #[test]
    fn compare_and_parity() {
        let scene = [slot(1, 1, 0), slot(2, 1, 0), slot(2, 0, 0)];
        assert_eq!(
            Query::Compare { a: 1, b: 2 }.answer(&scene),
            Some(vec![vocab::MORE, vocab::color(2)])
        );
        assert_eq!(
            Query::Compare { a: 3, b: 4 }.answer(&scene),
            Some(vec![vocab::SAME])
        );
        assert_eq!(
            Query::Parity { shape: 1 }.answer(&scene),
            Some(vec![vocab::EVEN])
        );
        assert_eq!(
            Query::Parity { shape: 0 }.answer(&scene),
            Some(vec![vocab::ODD])
        );
    }

    #[test]
    fn exact_match_arithmetic() {
        let r = vec![vec![1], vec![2], vec![3], vec![4]];
        assert_eq!(score_exact_match(&r, &r).unwrap(), 100.0);
        let none = vec![vec![9]; 4];
        assert_eq!(score_exact_match(&none, &r).unwrap(), 0.0);
        let three = vec![vec![1], vec![2], vec![3], vec![5]];
        assert_eq!(score_exact_match(&three, &r).unwrap(), 75.0);
        assert!(score_exact_match(&three[..2], &r).is_err());
    }

    #[test]
    fn noise_stays_inside_decodable_radius() {
        let w = World::new(16, 8, Seed(1)).unwrap();
        assert!(w.noise_radius() < 0.5 * w.min_codebook_distance());
    }

    #[test]
    fn orders_are_fixed_permutations() {
        let o = task_orders(5);
        assert_eq!(o, task_orders(5));
        assert_eq!(o.len(), 3);
        for p in &o {
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
        assert!(o[0][0] != o[1][0] && o[1][0] != o[2][0] && o[0][0] != o[2][0]);
    }

    #[test]
    fn infeasible_answer_space_is_reported() {
        let w = World::new(16, 8, Seed(1)).unwrap();
        let task = QATask {
            id: "t".into(),
            query: Query::Count { color: 0 },
            answers: Some(vec![vec![vocab::number(8)]]),
            train_size: 2,
            val_size: 1,
            seed: Seed(0),
        };
        assert!(matches!(
            generate_task(&w, &task),
            Err(Error::InvalidArgument(_))
        ));
    }
}
