//! Downstream fine-tuning of a logistic ranking head on top of user and pin
//! tables, with optional table freezing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, Matrix, SparseGrad};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::scorer::{HeadKind, Layout, LogisticHead, Scores, TableSlot, UpperModel};
use crate::tables::{row_for, EmbeddingTable, EntityId};

pub const USER_TABLE: &str = "user";
pub const PIN_TABLE: &str = "pin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user_id: EntityId,
    pub pin_id: EntityId,
    pub dense: Vec<f32>,
    /// Click label, or the click-through conversion label for CVR heads.
    pub label: u8,
    /// View-through conversion label, required by CVR heads.
    #[serde(default)]
    pub view_label: Option<u8>,
}

impl LabeledExample {
    fn labels(&self, kind: HeadKind) -> Result<[u8; 2]> {
        let check = |l: u8| {
            if l > 1 {
                Err(Error::Data(format!("label {l} is not 0 or 1")))
            } else {
                Ok(l)
            }
        };
        let first = check(self.label)?;
        match kind {
            HeadKind::Ctr => Ok([first, 0]),
            HeadKind::Cvr => {
                let v = self
                    .view_label
                    .ok_or_else(|| Error::Data("cvr example without view_label".into()))?;
                Ok([first, check(v)?])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Table shape used when training from scratch.
    pub dim: usize,
    pub num_rows: usize,
    pub learning_rate: f64,
    /// Step size for table rows when they are not frozen.
    pub table_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub head_kind: HeadKind,
    pub version_id: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_rows: 1 << 16,
            learning_rate: 0.1,
            table_learning_rate: 0.1,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            head_kind: HeadKind::Ctr,
            version_id: "finetuned".into(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_rows == 0 || self.batch_size == 0 {
            return Err(Error::invalid("dim, num_rows and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.table_learning_rate >= 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.version_id.is_empty() {
            return Err(Error::invalid("version_id must be non-empty"));
        }
        Ok(())
    }
}

/// Logistic head(s) over `[user ‖ pin ‖ dense]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    pub upper: UpperModel,
    pub freeze_tables: bool,
}

pub fn downstream_layout(dim: usize, dense_dim: usize) -> Layout {
    Layout {
        tables: vec![
            TableSlot {
                name: USER_TABLE.into(),
                dim,
            },
            TableSlot {
                name: PIN_TABLE.into(),
                dim,
            },
        ],
        dense_dim,
    }
}

impl DownstreamModel {
    pub fn predict(&self, user: &[f32], pin: &[f32], dense: &[f32]) -> Result<Scores> {
        let x = self
            .upper
            .layout
            .features(
                |name| match name {
                    USER_TABLE => Some(user),
                    PIN_TABLE => Some(pin),
                    _ => None,
                },
                dense,
            )
            .map_err(Error::InvalidArgument)?;
        Ok(self.upper.score_features(&x))
    }
}

fn features(u: &[f64], p: &[f64], dense: &[f32], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(u);
    out.extend_from_slice(p);
    out.extend(dense.iter().map(|&d| f64::from(d)));
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains the head, and unless `freeze_tables` also the touched table rows,
/// with logistic-loss minibatch SGD. Without `pretrained` tables the pair is
/// initialized from the seeded uniform(-1/sqrt(dim), 1/sqrt(dim)) scheme.
/// Frozen tables are returned as exact clones of the input.
pub fn finetune(
    train: &[LabeledExample],
    pretrained: Option<(&EmbeddingTable, &EmbeddingTable)>,
    freeze_tables: bool,
    config: &FinetuneConfig,
) -> Result<(DownstreamModel, EmbeddingTable, EmbeddingTable)> {
    config.validate()?;
    let first = train.first().ok_or_else(|| Error::invalid("no training examples"))?;
    let dense_dim = first.dense.len();
    let mut labels = Vec::with_capacity(train.len());
    for ex in train {
        if ex.dense.len() != dense_dim {
            return Err(Error::Data(format!(
                "example has {} dense features, expected {dense_dim}",
                ex.dense.len()
            )));
        }
        labels.push(ex.labels(config.head_kind)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut users, mut pins) = match pretrained {
        Some((u, p)) => {
            if u.dim() != p.dim() {
                return Err(Error::invalid("user and pin tables differ in dim"));
            }
            (Matrix::from_table(u), Matrix::from_table(p))
        }
        None => {
            let u = Matrix::uniform(config.num_rows, config.dim, &mut rng);
            let p = Matrix::uniform(config.num_rows, config.dim, &mut rng);
            (u, p)
        }
    };
    let dim = users.dim;
    let n_features = 2 * dim + dense_dim;
    let n_heads = config.head_kind.num_heads();
    let mut weights = vec![vec![0.0f64; n_features]; n_heads];
    let mut biases = vec![0.0f64; n_heads];

    let rows: Vec<(usize, usize)> = train
        .iter()
        .map(|ex| (row_for(ex.user_id, users.rows), row_for(ex.pin_id, pins.rows)))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut x = Vec::with_capacity(n_features);
    let mut gu = vec![0.0; dim];
    let mut gp = vec![0.0; dim];

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut gw = vec![vec![0.0f64; n_features]; n_heads];
            let mut gb = vec![0.0f64; n_heads];
            let mut user_grad = SparseGrad::default();
            let mut pin_grad = SparseGrad::default();
            for &i in batch {
                let (ur, pr) = rows[i];
                let (u, p) = (users.row(ur), pins.row(pr));
                features(u, p, &train[i].dense, &mut x);
                gu.iter_mut().for_each(|g| *g = 0.0);
                gp.iter_mut().for_each(|g| *g = 0.0);
                for h in 0..n_heads {
                    let w = &weights[h];
                    let e = sigmoid(dot(w, &x) + biases[h]) - f64::from(labels[i][h]);
                    axpy(e * scale, &x, &mut gw[h]);
                    gb[h] += e * scale;
                    if !freeze_tables {
                        axpy(e, &w[..dim], &mut gu);
                        axpy(e, &w[dim..2 * dim], &mut gp);
                    }
                }
                if !freeze_tables {
                    user_grad.add(ur, scale, &gu);
                    pin_grad.add(pr, scale, &gp);
                }
            }
            for h in 0..n_heads {
                axpy(-config.learning_rate, &gw[h], &mut weights[h]);
                biases[h] -= config.learning_rate * gb[h];
            }
            if !freeze_tables {
                user_grad.apply(&mut users, config.table_learning_rate);
                pin_grad.apply(&mut pins, config.table_learning_rate);
            }
        }
    }

    let upper = UpperModel {
        version_id: config.version_id.clone(),
        head_kind: config.head_kind,
        layout: downstream_layout(dim, dense_dim),
        heads: weights
            .iter()
            .zip(&biases)
            .map(|(w, &b)| LogisticHead {
                weights: w.iter().map(|&v| v as f32).collect(),
                bias: b as f32,
            })
            .collect(),
    };
    let (user_table, pin_table) = match (pretrained, freeze_tables) {
        (Some((u, p)), true) => (u.clone(), p.clone()),
        (Some((u, p)), false) => (
            users.to_table(u.table_id(), u.version_id())?,
            pins.to_table(p.table_id(), p.version_id())?,
        ),
        (None, _) => (
            users.to_table(USER_TABLE, &config.version_id)?,
            pins.to_table(PIN_TABLE, &config.version_id)?,
        ),
    };
    Ok((DownstreamModel { upper, freeze_tables }, user_table, pin_table))
}

/// Scores every example through the f32 serving path and returns the ROC
/// AUC of the first head against `label`.
pub fn evaluate_auc(
    model: &DownstreamModel,
    users: &EmbeddingTable,
    pins: &EmbeddingTable,
    examples: &[LabeledExample],
) -> Result<f64> {
    let mut u = vec![0.0f32; users.dim()];
    let mut p = vec![0.0f32; pins.dim()];
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        users.read_row_into(users.row_of(ex.user_id), &mut u);
        pins.read_row_into(pins.row_of(ex.pin_id), &mut p);
        let s = match model.predict(&u, &p, &ex.dense)? {
            Scores::Ctr(s) => s,
            Scores::Cvr { ccvr, .. } => ccvr,
        };
        scores.push(f64::from(s));
        labels.push(ex.label);
    }
    roc_auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn example(user: u64, pin: u64, d: f32, label: u8) -> LabeledExample {
        LabeledExample {
            user_id: EntityId(user),
            pin_id: EntityId(pin),
            dense: vec![d],
            label,
            view_label: None,
        }
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig {
            dim: 4,
            num_rows: 64,
            epochs: 20,
            batch_size: 8,
            ..Default::default()
        }
    }

    fn separable() -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..200)
            .map(|i| {
                let d: f32 = rng.random_range(-1.0..1.0);
                example(i % 7, i % 5, d, u8::from(d > 0.0))
            })
            .collect()
    }

    #[test]
    fn separable_data_reaches_auc_one() {
        let data = separable();
        let (m, u, p) = finetune(&data, None, false, &cfg()).unwrap();
        assert_eq!(evaluate_auc(&m, &u, &p, &data).unwrap(), 1.0);
    }

    #[test]
    fn freeze_leaves_tables_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Matrix::uniform(64, 4, &mut rng).to_table("user", "pre").unwrap();
        let p = Matrix::uniform(64, 4, &mut rng).to_table("pin", "pre").unwrap();
        let (m, u2, p2) = finetune(&separable(), Some((&u, &p)), true, &cfg()).unwrap();
        assert!(m.freeze_tables);
        assert_eq!(u2, u);
        assert_eq!(p2, p);
        let (_, u3, _) = finetune(&separable(), Some((&u, &p)), false, &cfg()).unwrap();
        assert_ne!(u3, u);
        assert_eq!(u3.table_id(), "user");
    }

    #[test]
    fn label_and_shape_errors() {
        let mut bad = separable();
        bad[3].label = 2;
        assert!(matches!(finetune(&bad, None, false, &cfg()), Err(Error::Data(_))));
        let mut bad = separable();
        bad[4].dense.push(0.0);
        assert!(finetune(&bad, None, false, &cfg()).is_err());
        assert!(finetune(&[], None, false, &cfg()).is_err());
        let cvr = FinetuneConfig {
            head_kind: HeadKind::Cvr,
            ..cfg()
        };
        assert!(finetune(&separable(), None, false, &cvr).is_err());
    }

    #[test]
    fn cvr_heads_train_independently() {
        let data: Vec<LabeledExample> = separable()
            .into_iter()
            .map(|mut e| {
                e.view_label = Some(1 - e.label);
                e
            })
            .collect();
        let c = FinetuneConfig {
            head_kind: HeadKind::Cvr,
            ..cfg()
        };
        let (m, _, _) = finetune(&data, None, false, &c).unwrap();
        m.upper.validate().unwrap();
        match m.predict(&[0.0; 4], &[0.0; 4], &[0.8]).unwrap() {
            Scores::Cvr { ccvr, vtcvr } => assert!(ccvr > 0.5 && vtcvr < 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let a = finetune(&separable(), None, false, &cfg()).unwrap();
        let b = finetune(&separable(), None, false, &cfg()).unwrap();
        assert_eq!(a, b);
    }
}
