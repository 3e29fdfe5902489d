//! Knowledge-graph embedding pretraining with TransE.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Entity, EntityType, KgTriple, Matrix, Relation, SparseGrad, TrainConfig};
use crate::error::{Error, Result};
use crate::tables::{row_for, EmbeddingTable, EntityId};

fn translation(h: &[f64], r: &[f64], t: &[f64]) -> Vec<f64> {
    h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `-||h + r - t||_2`; higher is more plausible.
pub fn transe_score(head: &[f64], relation: &[f64], tail: &[f64]) -> Result<f64> {
    if relation.len() != head.len() || tail.len() != head.len() {
        return Err(Error::invalid("transe inputs differ in dimension"));
    }
    Ok(-norm(&translation(head, relation, tail)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginRanking {
    pub loss: f64,
    pub grad_head: Vec<f64>,
    pub grad_relation: Vec<f64>,
    pub grad_tail: Vec<f64>,
    pub grad_neg_head: Vec<f64>,
    pub grad_neg_tail: Vec<f64>,
}

/// `max(0, margin + ||h + r - t|| - ||h' + r - t'||)` and its gradients.
/// At a zero distance the norm's subgradient 0 is used.
pub fn margin_ranking_loss(
    head: &[f64],
    relation: &[f64],
    tail: &[f64],
    neg_head: &[f64],
    neg_tail: &[f64],
    margin: f64,
) -> Result<MarginRanking> {
    let d = head.len();
    if [relation, tail, neg_head, neg_tail].iter().any(|v| v.len() != d) {
        return Err(Error::invalid("margin ranking inputs differ in dimension"));
    }
    let pos = translation(head, relation, tail);
    let neg = translation(neg_head, relation, neg_tail);
    let (dp, dn) = (norm(&pos), norm(&neg));
    let loss = margin + dp - dn;
    if loss <= 0.0 {
        let z = vec![0.0; d];
        return Ok(MarginRanking {
            loss: 0.0,
            grad_head: z.clone(),
            grad_relation: z.clone(),
            grad_tail: z.clone(),
            grad_neg_head: z.clone(),
            grad_neg_tail: z,
        });
    }
    let unit = |v: &[f64], n: f64| -> Vec<f64> {
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let gp = unit(&pos, dp);
    let gn = unit(&neg, dn);
    Ok(MarginRanking {
        loss,
        grad_relation: gp.iter().zip(&gn).map(|(a, b)| a - b).collect(),
        grad_tail: gp.iter().map(|x| -x).collect(),
        grad_neg_head: gn.iter().map(|x| -x).collect(),
        grad_neg_tail: gn,
        grad_head: gp,
    })
}

/// Trained entity tables (one per entity type seen), the relation table
/// (one row per [`Relation`]) and the entity vocabulary per type.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    pub entity_tables: BTreeMap<EntityType, EmbeddingTable>,
    pub relation_table: EmbeddingTable,
    pub vocab: BTreeMap<EntityType, Vec<EntityId>>,
    pub epoch_losses: Vec<f64>,
}

pub fn entity_table_id(kind: EntityType) -> String {
    format!("kge_{}", kind.name())
}

impl KgeModel {
    fn entity_row(&self, e: Entity) -> Result<Vec<f64>> {
        let table = self
            .entity_tables
            .get(&e.kind)
            .ok_or_else(|| Error::Data(format!("no table for entity type {}", e.kind)))?;
        Ok(table.row(table.row_of(e.id))?.into_iter().map(f64::from).collect())
    }

    fn relation_row(&self, r: Relation) -> Result<Vec<f64>> {
        Ok(self.relation_table.row(r.index())?.into_iter().map(f64::from).collect())
    }

    pub fn score(&self, head: Entity, relation: Relation, tail: Entity) -> Result<f64> {
        transe_score(&self.entity_row(head)?, &self.relation_row(relation)?, &self.entity_row(tail)?)
    }
}

struct Encoded {
    head: (usize, usize),
    relation: usize,
    tail: (usize, usize),
}

/// Margin-ranking TransE training. Each positive is paired with one
/// corruption of its head or tail (fair coin) by a uniformly drawn row of
/// the same entity type. Entity rows start and stay unit-norm: all rows are
/// normalized at initialization and touched rows after every batch.
pub fn kge_pretrain(triples: &[KgTriple], config: &TrainConfig) -> Result<KgeModel> {
    if triples.is_empty() {
        return Err(Error::invalid("no triples to train on"));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, dim) = (config.num_rows, config.dim);

    let types: Vec<EntityType> = triples
        .iter()
        .flat_map(|t| [t.head.kind, t.tail.kind])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let type_index = |k: EntityType| types.iter().position(|&t| t == k).expect("type collected");

    let mut entities: Vec<Matrix> = types
        .iter()
        .map(|_| {
            let mut m = Matrix::uniform(n, dim, &mut rng);
            (0..n).for_each(|r| m.normalize_row(r));
            m
        })
        .collect();
    let mut relations = Matrix::uniform(Relation::ALL.len(), dim, &mut rng);
    (0..relations.rows).for_each(|r| relations.normalize_row(r));

    let encoded: Vec<Encoded> = triples
        .iter()
        .map(|t| Encoded {
            head: (type_index(t.head.kind), row_for(t.head.id, n)),
            relation: t.relation.index(),
            tail: (type_index(t.tail.kind), row_for(t.tail.id, n)),
        })
        .collect();

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut ent_grads: Vec<SparseGrad> = types.iter().map(|_| SparseGrad::default()).collect();
            let mut rel_grad = SparseGrad::default();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let e = &encoded[i];
                let corrupt_head = rng.random_bool(0.5);
                let (kind, keep) = if corrupt_head { e.head } else { e.tail };
                let mut replacement = rng.random_range(0..n);
                while n > 1 && replacement == keep {
                    replacement = rng.random_range(0..n);
                }
                let (nh, nt) = if corrupt_head {
                    ((kind, replacement), e.tail)
                } else {
                    (e.head, (kind, replacement))
                };
                let row = |(k, r): (usize, usize)| entities[k].row(r);
                let term = margin_ranking_loss(
                    row(e.head),
                    relations.row(e.relation),
                    row(e.tail),
                    row(nh),
                    row(nt),
                    config.margin,
                )?;
                loss_sum += term.loss;
                if term.loss > 0.0 {
                    ent_grads[e.head.0].add(e.head.1, scale, &term.grad_head);
                    ent_grads[e.tail.0].add(e.tail.1, scale, &term.grad_tail);
                    ent_grads[nh.0].add(nh.1, scale, &term.grad_neg_head);
                    ent_grads[nt.0].add(nt.1, scale, &term.grad_neg_tail);
                    rel_grad.add(e.relation, scale, &term.grad_relation);
                }
            }
            for (m, g) in entities.iter_mut().zip(ent_grads) {
                for r in g.apply(m, config.learning_rate) {
                    m.normalize_row(r);
                }
            }
            rel_grad.apply(&mut relations, config.learning_rate);
        }
        epoch_losses.push(loss_sum / encoded.len() as f64);
    }

    let mut vocab: BTreeMap<EntityType, BTreeSet<EntityId>> = BTreeMap::new();
    for t in triples {
        vocab.entry(t.head.kind).or_default().insert(t.head.id);
        vocab.entry(t.tail.kind).or_default().insert(t.tail.id);
    }
    let entity_tables = types
        .iter()
        .zip(&entities)
        .map(|(&k, m)| Ok((k, m.to_table(&entity_table_id(k), &config.version_id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(KgeModel {
        entity_tables,
        relation_table: relations.to_table("relation", &config.version_id)?,
        vocab: vocab.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkPredOptions {
    pub seed: u64,
    /// When false (the default) sampled candidates are distinct and never
    /// equal to the true tail.
    pub allow_duplicates: bool,
}

impl Default for LinkPredOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            allow_duplicates: false,
        }
    }
}

/// Mean reciprocal rank of each true tail among `num_candidates - 1`
/// random same-type entities from the model vocabulary plus itself. Ties
/// are broken by ascending entity id.
pub fn link_prediction_eval(
    model: &KgeModel,
    held_out: &[KgTriple],
    num_candidates: usize,
    options: &LinkPredOptions,
) -> Result<f64> {
    if num_candidates < 2 {
        return Err(Error::invalid("num_candidates must be at least 2"));
    }
    if held_out.is_empty() {
        return Err(Error::invalid("no held-out triples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut total = 0.0;
    for t in held_out {
        let pool = model
            .vocab
            .get(&t.tail.kind)
            .ok_or_else(|| Error::Data(format!("no vocabulary for {}", t.tail.kind)))?;
        let candidates: Vec<EntityId> = if options.allow_duplicates {
            (1..num_candidates).map(|_| *pool.choose(&mut rng).expect("non-empty vocab")).collect()
        } else {
            let others: Vec<EntityId> = pool.iter().copied().filter(|&id| id != t.tail.id).collect();
            if others.len() < num_candidates - 1 {
                return Err(Error::invalid(format!(
                    "only {} distinct {} entities for {} negatives",
                    others.len(),
                    t.tail.kind,
                    num_candidates - 1
                )));
            }
            others.choose_multiple(&mut rng, num_candidates - 1).copied().collect()
        };

        let h = model.entity_row(t.head)?;
        let r = model.relation_row(t.relation)?;
        let true_score = transe_score(&h, &r, &model.entity_row(t.tail)?)?;
        let mut rank = 1usize;
        for c in candidates {
            let s = transe_score(&h, &r, &model.entity_row(Entity { kind: t.tail.kind, id: c })?)?;
            if s > true_score || (s == true_score && c < t.tail.id) {
                rank += 1;
            }
        }
        total += 1.0 / rank as f64;
    }
    Ok(total / held_out.len() as f64)
}
