//! Instance weighting by cross-task prototype scores, prediction entropy,
//! and assembly of the de-biased training loss.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// sim(a, b) = exp(cos(a, b) / T). A zero vector has cosine 0 with anything.
pub fn similarity(a: &[f64], b: &[f64], temperature: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    (cos / temperature).exp()
}

/// How the cross-task term treats tasks whose label set lacks the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTaskPolicy {
    /// Every other task must carry the label (shared label space).
    Strict,
    /// Average over the other tasks that carry the label; none means the
    /// within-task ratio alone.
    SharedLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    /// Per task, label set order and one centroid per label.
    pub centroids: BTreeMap<TaskId, Vec<(String, Vec<f64>)>>,
    pub zeta: f64,
    pub temperature: f64,
}

/// Class centroids c_m(y) from embedded training instances, given per task
/// as `(label, E(x))` pairs.
pub fn compute_centroids(
    tasks: &[TaskSpec],
    embedded: &BTreeMap<TaskId, Vec<(String, Vec<f64>)>>,
    zeta: f64,
    temperature: f64,
) -> Result<PrototypeStore> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::InvalidConfig(format!("balance factor {zeta} outside [0, 1]")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("similarity temperature {temperature} must be positive")));
    }
    let mut centroids = BTreeMap::new();
    for task in tasks {
        let rows = embedded.get(&task.task_id).map(Vec::as_slice).unwrap_or(&[]);
        let mut per_label = Vec::with_capacity(task.label_set.len());
        for label in &task.label_set {
            let members: Vec<&Vec<f64>> = rows.iter().filter(|(l, _)| l == label).map(|(_, e)| e).collect();
            let Some(first) = members.first() else {
                return Err(Error::EmptyClassCell {
                    task: task.task_id.to_string(),
                    label: label.clone(),
                });
            };
            let mut mean = vec![0.0; first.len()];
            for e in &members {
                if e.len() != mean.len() {
                    return Err(Error::Shape(format!("embedding widths {} and {}", e.len(), mean.len())));
                }
                for (m, v) in mean.iter_mut().zip(e.iter()) {
                    *m += v;
                }
            }
            let n = members.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("non-finite centroid for {}/{label}", task.task_id)));
            }
            per_label.push((label.clone(), mean));
        }
        centroids.insert(task.task_id.clone(), per_label);
    }
    Ok(PrototypeStore {
        centroids,
        zeta,
        temperature,
    })
}

impl PrototypeStore {
    /// sim(E(x), c_m(y)) / Σ_ỹ sim(E(x), c_m(ỹ)), or `None` when task `m`
    /// has no label `y`.
    fn ratio(&self, task: &TaskId, label: &str, embedding: &[f64]) -> Result<Option<f64>> {
        let cells = self
            .centroids
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let mut own = None;
        let mut total = 0.0;
        for (l, c) in cells {
            let s = similarity(embedding, c, self.temperature);
            total += s;
            if l == label {
                own = Some(s);
            }
        }
        Ok(own.map(|s| s / total))
    }

    /// Cross-task prototype score s(x) of an instance of `task` with `label`.
    pub fn score(&self, task: &TaskId, label: &str, embedding: &[f64], policy: CrossTaskPolicy) -> Result<f64> {
        let own = self.ratio(task, label, embedding)?.ok_or_else(|| Error::LabelMissing {
            task: task.to_string(),
            label: label.to_owned(),
            other: task.to_string(),
        })?;
        let mut others = Vec::new();
        for other in self.centroids.keys().filter(|t| *t != task) {
            match (self.ratio(other, label, embedding)?, policy) {
                (Some(r), _) => others.push(r),
                (None, CrossTaskPolicy::SharedLabels) => {}
                (None, CrossTaskPolicy::Strict) => {
                    return Err(Error::LabelMissing {
                        task: task.to_string(),
                        label: label.to_owned(),
                        other: other.to_string(),
                    })
                }
            }
        }
        if others.is_empty() {
            return Ok(own);
        }
        let cross: f64 = others.iter().sum::<f64>() / others.len() as f64;
        Ok(self.zeta * own + (1.0 - self.zeta) * cross)
    }
}

/// Per-uid instance weights with the epoch of their last recompute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: BTreeMap<String, f64>,
    pub epoch: usize,
}

impl ScoreTable {
    pub fn uniform<'a>(uids: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            scores: uids.into_iter().map(|u| (u.to_owned(), 1.0)).collect(),
            epoch: 0,
        }
    }

    pub fn get(&self, uid: &str) -> Option<f64> {
        self.scores.get(uid).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.epoch.hash(&mut h);
        for (uid, s) in &self.scores {
            uid.hash(&mut h);
            s.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// TSV of `uid`, `score`, `epoch`.
    pub fn export_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "uid\tscore\tepoch")?;
        for (uid, s) in &self.scores {
            writeln!(out, "{uid}\t{s}\t{}", self.epoch)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn import_tsv(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut scores = BTreeMap::new();
        let mut epoch = 0;
        for (i, line) in content.lines().enumerate().skip(1) {
            let malformed = |reason: &str| Error::MalformedRow {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_owned(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(malformed("expected uid, score, epoch"));
            }
            let s: f64 = cols[1].parse().map_err(|_| malformed("bad score"))?;
            epoch = cols[2].parse().map_err(|_| malformed("bad epoch"))?;
            scores.insert(cols[0].to_owned(), s);
        }
        Ok(Self { scores, epoch })
    }
}

/// H(D) = −(1/|D|) Σ_x Σ_y ŷ log ŷ with 0·log 0 = 0.
pub fn dataset_entropy(predictions: &[Vec<f64>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let total: f64 = predictions
        .iter()
        .map(|p| -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
        .sum();
    Ok(total / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// Add +λ2·H: the loss as written, which sharpens predictions.
    #[default]
    Literal,
    /// Add −λ2·H, which flattens predictions.
    Maximize,
}

impl EntropySign {
    pub fn factor(self) -> f64 {
        match self {
            EntropySign::Literal => 1.0,
            EntropySign::Maximize => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub entropy_sign: EntropySign,
}

/// One instance in a batch: class distribution node, gold class, its score
/// s(x) and the size of its task's training set.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub y_hat: Var,
    pub target: usize,
    pub score: f64,
    pub task_size: usize,
}

/// Per-instance contribution s·CE + sign·(λ2/|D_m|)·H(ŷ). The score is a
/// constant.
pub fn instance_loss(g: &mut Graph, term: &LossTerm, weights: &LossWeights) -> Var {
    let p = g.gather_cols(term.y_hat, &[term.target]);
    let log_p = g.ln(p);
    let ce = g.scale(log_p, -term.score);
    if weights.lambda2 == 0.0 {
        return ce;
    }
    let plogp = g.xlogx(term.y_hat);
    let neg_h = g.sum(plogp);
    let w = -weights.entropy_sign.factor() * weights.lambda2 / term.task_size as f64;
    let ent = g.scale(neg_h, w);
    g.add(ce, ent)
}

/// The data part of L′: the sum of [`instance_loss`] over the batch. Adds a
/// 1×1 node holding zero for an empty batch.
pub fn debiased_loss(g: &mut Graph, terms: &[LossTerm], weights: &LossWeights) -> Result<Var> {
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
    }
    let parts: Vec<Var> = terms.iter().map(|t| instance_loss(g, t, weights)).collect();
    if parts.is_empty() {
        return Ok(g.constant(crate::autograd::Mat::scalar(0.0)));
    }
    let column = g.concat_rows(&parts);
    Ok(g.sum(column))
}

/// λ1‖Θ‖² over `ids`; its gradient is applied through
/// [`crate::params::ParamGrads::add_l2`].
pub fn regularizer(store: &ParamStore, ids: &[ParamId], lambda1: f64) -> f64 {
    lambda1 * store.norm_sq(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn task(id: &str, labels: &[&str]) -> TaskSpec {
        TaskSpec {
            task_id: id.into(),
            name: id.into(),
            group_id: "g".into(),
            label_set: labels.iter().map(|l| (*l).to_owned()).collect(),
            verbalizer: crate::backbone::Verbalizer::new((0..labels.len()).map(|i| vec![i + 3]).collect()),
            template: Default::default(),
        }
    }

    #[test]
    fn centroid_cases() {
        let tasks = [task("a", &["0", "1"])];
        let mut emb = BTreeMap::new();
        emb.insert(
            TaskId::from("a"),
            vec![
                ("0".to_owned(), vec![1.0, 2.0]),
                ("1".to_owned(), vec![0.5, -1.0]),
                ("1".to_owned(), vec![-0.5, 1.0]),
            ],
        );
        let store = compute_centroids(&tasks, &emb, 0.5, 1.0).unwrap();
        let cells = &store.centroids[&TaskId::from("a")];
        assert_eq!(cells[0].1, vec![1.0, 2.0]);
        assert_eq!(cells[1].1, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_cell_names_task_and_label() {
        let tasks = [task("a", &["0", "1"])];
        let mut emb = BTreeMap::new();
        emb.insert(TaskId::from("a"), vec![("0".to_owned(), vec![1.0])]);
        let err = compute_centroids(&tasks, &emb, 0.5, 1.0).unwrap_err().to_string();
        assert!(err.contains('a') && err.contains('1'), "{err}");
    }

    #[test]
    fn centroid_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tasks = [task("a", &["0", "1"])];
        let rows: Vec<(String, Vec<f64>)> = (0..32)
            .map(|i| ((i % 2).to_string(), (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let mut emb = BTreeMap::new();
        emb.insert(TaskId::from("a"), rows.clone());
        let store = compute_centroids(&tasks, &emb, 0.5, 1.0).unwrap();
        for (c, label) in ["0", "1"].iter().enumerate() {
            for j in 0..5 {
                let mut s = 0.0;
                let mut n = 0;
                for (l, e) in &rows {
                    if l == label {
                        s += e[j];
                        n += 1;
                    }
                }
                assert!((store.centroids[&TaskId::from("a")][c].1[j] - s / n as f64).abs() < 1e-10);
            }
        }
    }

    fn store_of(cells: Vec<(&str, Vec<Vec<f64>>)>, labels: &[&str], zeta: f64) -> PrototypeStore {
        PrototypeStore {
            centroids: cells
                .into_iter()
                .map(|(t, cs)| {
                    (
                        TaskId::from(t),
                        labels.iter().map(|l| (*l).to_owned()).zip(cs).collect(),
                    )
                })
                .collect(),
            zeta,
            temperature: 1.0,
        }
    }

    #[test]
    fn equidistant_embedding_scores_one_over_classes() {
        let store = store_of(
            vec![
                ("a", vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
                ("b", vec![vec![2.0, 0.0], vec![-3.0, 0.0]]),
            ],
            &["0", "1"],
            0.5,
        );
        let s = store.score(&"a".into(), "1", &[0.0, 1.0], CrossTaskPolicy::Strict).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_task_and_zeta_one_use_own_ratio() {
        let cells = vec![vec![1.0, 0.2], vec![-0.3, 1.0]];
        let single = store_of(vec![("a", cells.clone())], &["0", "1"], 0.5);
        let e = [0.4, 0.9];
        let own = similarity(&e, &cells[1], 1.0) / (similarity(&e, &cells[0], 1.0) + similarity(&e, &cells[1], 1.0));
        let s = single.score(&"a".into(), "1", &e, CrossTaskPolicy::Strict).unwrap();
        assert!((s - own).abs() < 1e-12);
        let two = store_of(vec![("a", cells.clone()), ("b", vec![vec![0.0, 1.0], vec![1.0, 0.0]])], &["0", "1"], 1.0);
        let s = two.score(&"a".into(), "1", &e, CrossTaskPolicy::Strict).unwrap();
        assert!((s - own).abs() < 1e-12);
    }

    #[test]
    fn strict_policy_rejects_missing_label() {
        let mut store = store_of(vec![("a", vec![vec![1.0], vec![-1.0]])], &["0", "1"], 0.5);
        store.centroids.insert("b".into(), vec![("x".into(), vec![1.0]), ("y".into(), vec![2.0])]);
        assert!(store.score(&"a".into(), "0", &[1.0], CrossTaskPolicy::Strict).is_err());
        let s = store.score(&"a".into(), "0", &[1.0], CrossTaskPolicy::SharedLabels).unwrap();
        assert!(s > 0.5 && s < 1.0);
    }

    #[test]
    fn entropy_cases() {
        let h = dataset_entropy(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
        assert_eq!(dataset_entropy(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        let h = dataset_entropy(&[vec![0.7, 0.3]]).unwrap();
        assert!((h - 0.6109).abs() < 1e-4);
        assert!(dataset_entropy(&[]).is_err());
    }

    fn loss_of(probs: &[Vec<f64>], targets: &[usize], scores: &[f64], sizes: &[usize], w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let terms: Vec<LossTerm> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| LossTerm {
                y_hat: g.constant(Mat::row_vector(p.clone())),
                target: targets[i],
                score: scores[i],
                task_size: sizes[i],
            })
            .collect();
        let l = debiased_loss(&mut g, &terms, w).unwrap();
        g.value(l).item()
    }

    #[test]
    fn loss_reductions() {
        let plain = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            entropy_sign: EntropySign::Literal,
        };
        let probs = vec![vec![0.8, 0.2], vec![0.4, 0.6]];
        let ce = -(0.8f64.ln() + 0.6f64.ln());
        let l = loss_of(&probs, &[0, 1], &[1.0, 1.0], &[4, 4], &plain);
        assert!((l - ce).abs() < 1e-12);
        let half = loss_of(&probs[..1], &[0], &[0.5], &[4], &plain);
        assert!((half - 0.5 * -(0.8f64.ln())).abs() < 1e-12);
        let with_entropy = LossWeights { lambda2: 0.3, ..plain };
        let one_hot = loss_of(&[vec![1.0, 0.0]], &[0], &[1.0], &[2], &with_entropy);
        assert_eq!(one_hot, 0.0);
    }

    #[test]
    fn entropy_sign_flips_the_regularizer() {
        let base = LossWeights {
            lambda1: 0.0,
            lambda2: 0.5,
            entropy_sign: EntropySign::Literal,
        };
        let p = vec![vec![0.7, 0.3]];
        let h = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        let ce = -(0.7f64.ln());
        let lit = loss_of(&p, &[0], &[1.0], &[5], &base);
        let max = loss_of(&p, &[0], &[1.0], &[5], &LossWeights { entropy_sign: EntropySign::Maximize, ..base });
        assert!((lit - (ce + 0.1 * h)).abs() < 1e-12);
        assert!((max - (ce - 0.1 * h)).abs() < 1e-12);
    }

    #[test]
    fn score_table_round_trip() {
        let mut t = ScoreTable::uniform(["b", "a"]);
        assert_eq!(t.get("a"), Some(1.0));
        let before = t.checksum();
        t.scores.insert("a".into(), 0.25);
        t.epoch = 3;
        assert_ne!(before, t.checksum());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        t.export_tsv(&path).unwrap();
        assert_eq!(ScoreTable::import_tsv(&path).unwrap(), t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn score_is_invariant_to_embedding_scale(
                cells in prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2), 1..4),
                e in prop::collection::vec(-1.0f64..1.0, 3),
                scale in 0.01f64..100.0,
                zeta in 0.0f64..1.0,
            ) {
                prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
                let labels = ["0", "1"];
                let ids = ["a", "b", "c"];
                let store = store_of(ids.iter().copied().zip(cells).collect(), &labels, zeta);
                let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
                for l in labels {
                    let a = store.score(&"a".into(), l, &e, CrossTaskPolicy::Strict).unwrap();
                    let b = store.score(&"a".into(), l, &scaled, CrossTaskPolicy::Strict).unwrap();
                    prop_assert!((a - b).abs() < 1e-9);
                    prop_assert!(a > 0.0 && a < 1.0);
                }
            }

            #[test]
            fn entropy_ignores_order_and_stays_bounded(
                rows in prop::collection::vec(simplex(3), 1..12),
                rot in 0usize..12,
            ) {
                let h = dataset_entropy(&rows).unwrap();
                let mut shuffled = rows.clone();
                let len = shuffled.len();
                shuffled.rotate_left(rot % len);
                prop_assert!((h - dataset_entropy(&shuffled).unwrap()).abs() < 1e-12);
                prop_assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12);
            }

            #[test]
            fn zero_scores_remove_cross_entropy(p in simplex(2), target in 0usize..2, size in 1usize..50) {
                let w = LossWeights { lambda1: 0.0, lambda2: 0.0, entropy_sign: EntropySign::Literal };
                prop_assert_eq!(loss_of(&[p], &[target], &[0.0], &[size], &w), 0.0);
            }
        }
    }
}
