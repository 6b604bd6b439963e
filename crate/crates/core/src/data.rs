//! Synthetic multi-task classification suites.
//!
//! Each task is a Gaussian-cluster problem over its own slice of one unified
//! label space of size `n_tasks * classes_per_task` (minus any configured
//! overlap), so every model in a bank emits logits of the same length and
//! concatenated model outputs are well-defined.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Example;
use crate::num::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Standard deviation of each class cluster around its center.
    pub cluster_spread: f64,
    /// Number of classes adjacent tasks share. 0 (the default) keeps class
    /// ranges disjoint; nonzero values are exploratory.
    #[serde(default)]
    pub class_overlap: usize,
    pub seed: u64,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(Error::Config("n_tasks must be >= 2".into()));
        }
        if self.classes_per_task < 2 {
            return Err(Error::Config("classes_per_task must be >= 2".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("samples per split must be >= 1".into()));
        }
        if self.cluster_spread <= 0.0 || !self.cluster_spread.is_finite() {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        if self.class_overlap >= self.classes_per_task {
            return Err(Error::Config(
                "class_overlap must be smaller than classes_per_task".into(),
            ));
        }
        Ok(())
    }

    /// Size of the unified label space.
    pub fn total_classes(&self) -> usize {
        let stride = self.classes_per_task - self.class_overlap;
        (self.n_tasks - 1) * stride + self.classes_per_task
    }

    fn class_range(&self, task_id: usize) -> std::ops::Range<usize> {
        let stride = self.classes_per_task - self.class_overlap;
        let start = task_id * stride;
        start..start + self.classes_per_task
    }
}

/// One task's data: labeled train and test splits over its class range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub class_range: std::ops::Range<usize>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Class centers, exposed for the nearest-centroid oracle.
    pub centers: Vec<Vec<f64>>,
}

impl TaskDataset {
    pub fn classes(&self) -> usize {
        self.class_range.len()
    }
}

/// Generate the whole suite. Deterministic given `cfg.seed`: each task draws
/// from its own child stream, so changing one task's data never shifts
/// another's.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_tasks);
    for task_id in 0..cfg.n_tasks {
        let mut rng = Rng::new(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(task_id as u64 + 1));
        let range = cfg.class_range(task_id);
        // one center per class, drawn once so tasks stay distinguishable
        let centers: Vec<Vec<f64>> = (0..cfg.classes_per_task)
            .map(|_| (0..cfg.input_dim).map(|_| rng.next_normal()).collect())
            .collect();
        let draw_split = |n: usize, rng: &mut Rng| -> Vec<Example> {
            (0..n)
                .map(|i| {
                    let local = i % cfg.classes_per_task;
                    let x = centers[local]
                        .iter()
                        .map(|c| c + cfg.cluster_spread * rng.next_normal())
                        .collect();
                    Example {
                        x,
                        y: range.start + local,
                    }
                })
                .collect()
        };
        let train = draw_split(cfg.train_per_task, &mut rng);
        let test = draw_split(cfg.test_per_task, &mut rng);
        out.push(TaskDataset {
            task_id,
            class_range: range,
            train,
            test,
            centers,
        });
    }
    Ok(out)
}

/// Uniform subsample without replacement of both splits. Selected examples
/// keep their original order, so `fraction = 1.0` is the identity.
pub fn subsample(ds: &TaskDataset, fraction: f64, seed: u64) -> Result<TaskDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let pick = |examples: &[Example], rng: &mut Rng| -> Result<Vec<Example>> {
        let n = ((fraction * examples.len() as f64).floor() as usize).max(1);
        if examples.is_empty() {
            return Err(Error::Empty("cannot subsample an empty split"));
        }
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        rng.shuffle(&mut idx);
        let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
        chosen.sort_unstable();
        Ok(chosen.into_iter().map(|i| examples[i].clone()).collect())
    };
    let mut rng = Rng::new(seed.wrapping_add(ds.task_id as u64));
    Ok(TaskDataset {
        task_id: ds.task_id,
        class_range: ds.class_range.clone(),
        train: pick(&ds.train, &mut rng)?,
        test: pick(&ds.test, &mut rng)?,
        centers: ds.centers.clone(),
    })
}

// ── JSON-lines export/import ─────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    task_id: usize,
    x: Vec<f64>,
    y: usize,
    split: String,
}

/// One record per example: `{task_id, x, y, split}`.
pub fn export_jsonl<W: Write>(datasets: &[TaskDataset], mut w: W) -> Result<()> {
    for ds in datasets {
        for (split, examples) in [("train", &ds.train), ("test", &ds.test)] {
            for ex in examples {
                let rec = JsonlRecord {
                    task_id: ds.task_id,
                    x: ex.x.clone(),
                    y: ex.y,
                    split: split.into(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
    }
    Ok(())
}

/// Rebuild datasets from a JSONL stream. Class ranges and centers are
/// reconstructed from the observed labels (centers as per-class means).
pub fn import_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskDataset>> {
    let mut tasks: std::collections::BTreeMap<usize, (Vec<Example>, Vec<Example>)> =
        std::collections::BTreeMap::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        let entry = tasks.entry(rec.task_id).or_default();
        let ex = Example { x: rec.x, y: rec.y };
        match rec.split.as_str() {
            "train" => entry.0.push(ex),
            "test" => entry.1.push(ex),
            other => {
                return Err(Error::InvalidValue(format!("unknown split tag {other:?}")));
            }
        }
    }
    let mut out = Vec::new();
    for (task_id, (train, test)) in tasks {
        let ys: Vec<usize> = train.iter().chain(&test).map(|e| e.y).collect();
        if ys.is_empty() {
            continue;
        }
        let (lo, hi) = (
            *ys.iter().min().unwrap(),
            *ys.iter().max().unwrap(),
        );
        let dim = train.first().or(test.first()).map(|e| e.x.len()).unwrap_or(0);
        let mut centers = vec![vec![0.0; dim]; hi - lo + 1];
        let mut counts = vec![0usize; hi - lo + 1];
        for ex in train.iter().chain(&test) {
            let c = ex.y - lo;
            counts[c] += 1;
            for (acc, v) in centers[c].iter_mut().zip(&ex.x) {
                *acc += v;
            }
        }
        for (center, n) in centers.iter_mut().zip(&counts) {
            if *n > 0 {
                center.iter_mut().for_each(|v| *v /= *n as f64);
            }
        }
        out.push(TaskDataset {
            task_id,
            class_range: lo..hi + 1,
            train,
            test,
            centers,
        });
    }
    Ok(out)
}

/// Nearest-centroid classifier over a task's own centers; used as the
/// degenerate-spread oracle.
pub fn nearest_centroid_accuracy(ds: &TaskDataset) -> f64 {
    let hits = ds
        .test
        .iter()
        .filter(|ex| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in ds.centers.iter().enumerate() {
                let d: f64 = center
                    .iter()
                    .zip(&ex.x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            ds.class_range.start + best == ex.y
        })
        .count();
    hits as f64 / ds.test.len() as f64
}
