//! Residual k-means semantic IDs.
//!
//! Each item is mapped to `levels` tokens. Levels `1..levels-1` are residual
//! k-means codes: level 1 clusters the raw embeddings, every later level
//! clusters what is left after subtracting the centroids already chosen. The
//! final level is a disambiguation index that enumerates items sharing the
//! same semantic prefix, so the full mapping is injective. With `levels == 1`
//! the single level is a k-means code and must already be injective.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Token = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Item id → embedding vector, kept in ascending id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddingTable {
    dim: usize,
    items: Vec<(ItemId, Vec<f64>)>,
}

impl ItemEmbeddingTable {
    pub fn new(mut items: Vec<(ItemId, Vec<f64>)>) -> Result<Self> {
        items.sort_by_key(|(id, _)| *id);
        if items.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Input("duplicate item id in embedding table".into()));
        }
        let dim = items.first().map_or(0, |(_, v)| v.len());
        for (id, v) in &items {
            if v.len() != dim {
                return Err(Error::Input(format!("item {id} has dimension {} instead of {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("item {id} has a non-finite embedding")));
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(ItemId, Vec<f64>)] {
        &self.items
    }
}

/// Fitted residual codebooks plus the injective item ↔ token-sequence map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCodebooks {
    levels: usize,
    /// Centroids per semantic level: `codebooks[l][c]` is a vector of the
    /// embedding dimension.
    codebooks: Vec<Vec<Vec<f64>>>,
    /// Vocabulary size of the final disambiguation level (0 when `levels == 1`).
    disambiguation_size: usize,
    assignments: Vec<(ItemId, Vec<Token>)>,
    #[serde(skip)]
    by_item: HashMap<ItemId, usize>,
    #[serde(skip)]
    by_tokens: HashMap<Vec<Token>, ItemId>,
}

const CODEBOOK_FORMAT: &str = "rclrec-codebooks";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    version: u32,
    codebooks: SemanticCodebooks,
}

pub const KMEANS_ITERS: usize = 25;

impl SemanticCodebooks {
    /// Fits `levels` levels with `codebook_size` centroids per semantic level.
    pub fn fit(
        embeddings: &ItemEmbeddingTable,
        levels: usize,
        codebook_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Input("cannot fit codebooks on an empty embedding table".into()));
        }
        if levels == 0 {
            return Err(Error::Parameter("levels must be at least 1".into()));
        }
        if codebook_size == 0 || codebook_size > embeddings.len() {
            return Err(Error::Parameter(format!(
                "codebook size {codebook_size} must be in 1..={}",
                embeddings.len()
            )));
        }
        let semantic_levels = if levels == 1 { 1 } else { levels - 1 };
        let mut residuals: Vec<Vec<f64>> = embeddings.items().iter().map(|(_, v)| v.clone()).collect();
        let mut codes: Vec<Vec<Token>> = vec![Vec::with_capacity(levels); residuals.len()];
        let mut codebooks = Vec::with_capacity(semantic_levels);
        let mut rng = rng::named_rng(seed, "tokenizer");
        for _ in 0..semantic_levels {
            let centroids = kmeans(&residuals, codebook_size, KMEANS_ITERS, &mut rng);
            for (r, code) in residuals.iter_mut().zip(codes.iter_mut()) {
                let c = nearest(&centroids, r);
                for (x, m) in r.iter_mut().zip(&centroids[c]) {
                    *x -= *m;
                }
                code.push(c);
            }
            codebooks.push(centroids);
        }

        let mut disambiguation_size = 0;
        if levels > 1 {
            let mut seen: HashMap<Vec<Token>, usize> = HashMap::new();
            for code in codes.iter_mut() {
                let n = seen.entry(code.clone()).or_insert(0);
                code.push(*n);
                *n += 1;
            }
            disambiguation_size = seen.values().copied().max().unwrap_or(1);
        }

        let assignments = embeddings.items().iter().map(|(id, _)| *id).zip(codes).collect();
        Self::from_parts(levels, codebooks, disambiguation_size, assignments)
    }

    fn from_parts(
        levels: usize,
        codebooks: Vec<Vec<Vec<f64>>>,
        disambiguation_size: usize,
        assignments: Vec<(ItemId, Vec<Token>)>,
    ) -> Result<Self> {
        let mut cb = Self {
            levels,
            codebooks,
            disambiguation_size,
            assignments,
            by_item: HashMap::new(),
            by_tokens: HashMap::new(),
        };
        cb.rebuild_index()?;
        Ok(cb)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        let expected_semantic = if self.levels == 1 { 1 } else { self.levels - 1 };
        if self.levels == 0 || self.codebooks.len() != expected_semantic {
            return Err(Error::Format("codebook level count is inconsistent".into()));
        }
        if self.codebooks.iter().any(|c| c.is_empty()) {
            return Err(Error::Format("empty codebook level".into()));
        }
        self.by_item.clear();
        self.by_tokens.clear();
        let vocab = self.vocab_sizes();
        for (i, (id, tokens)) in self.assignments.iter().enumerate() {
            if tokens.len() != self.levels || tokens.iter().zip(&vocab).any(|(t, v)| t >= v) {
                return Err(Error::Format(format!("item {id} has an invalid token sequence {tokens:?}")));
            }
            if self.by_item.insert(*id, i).is_some() {
                return Err(Error::Format(format!("item {id} assigned twice")));
            }
            if let Some(other) = self.by_tokens.insert(tokens.clone(), *id) {
                return Err(Error::Input(format!(
                    "items {other} and {id} share token sequence {tokens:?}; \
                     a single level cannot disambiguate collisions"
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Vocabulary size of every level, in level order.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.codebooks.iter().map(|c| c.len()).collect();
        if self.levels > 1 {
            v.push(self.disambiguation_size.max(1));
        }
        v
    }

    pub fn codebooks(&self) -> &[Vec<Vec<f64>>] {
        &self.codebooks
    }

    pub fn assignments(&self) -> &[(ItemId, Vec<Token>)] {
        &self.assignments
    }

    pub fn num_items(&self) -> usize {
        self.assignments.len()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.by_item.contains_key(&item)
    }

    pub fn encode(&self, item: ItemId) -> Result<&[Token]> {
        self.by_item
            .get(&item)
            .map(|&i| self.assignments[i].1.as_slice())
            .ok_or_else(|| Error::Lookup(format!("item {item} was not present when the codebooks were fit")))
    }

    /// The item assigned to `tokens`, or `None` for an unassigned sequence.
    pub fn decode(&self, tokens: &[Token]) -> Result<Option<ItemId>> {
        if tokens.len() != self.levels {
            return Err(Error::shape(
                "decode",
                format!("expected {} tokens, got {}", self.levels, tokens.len()),
            ));
        }
        for (l, (t, v)) in tokens.iter().zip(self.vocab_sizes()).enumerate() {
            if *t >= v {
                return Err(Error::Index(format!("token {t} at level {} outside vocabulary of {v}", l + 1)));
            }
        }
        Ok(self.by_tokens.get(tokens).copied())
    }

    /// Sum of the chosen centroids over the first `depth` semantic levels.
    pub fn reconstruct(&self, item: ItemId, depth: usize) -> Result<Vec<f64>> {
        let tokens = self.encode(item)?;
        let dim = self.codebooks[0][0].len();
        let mut out = vec![0.0; dim];
        for (level, &t) in tokens.iter().enumerate().take(depth.min(self.codebooks.len())) {
            for (o, c) in out.iter_mut().zip(&self.codebooks[level][t]) {
                *o += *c;
            }
        }
        Ok(out)
    }

    /// Mean squared reconstruction error after each level. The disambiguation
    /// level adds no centroid, so its entry repeats the previous one.
    pub fn residual_mse(&self, embeddings: &ItemEmbeddingTable) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.levels);
        for depth in 1..=self.levels {
            let mut total = 0.0;
            for (id, v) in embeddings.items() {
                let rec = self.reconstruct(*id, depth)?;
                total += v.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            out.push(total / embeddings.len() as f64);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CodebookFile {
            format: CODEBOOK_FORMAT.into(),
            version: CODEBOOK_VERSION,
            codebooks: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(text)?;
        if file.format != CODEBOOK_FORMAT || file.version != CODEBOOK_VERSION {
            return Err(Error::Format(format!(
                "expected {CODEBOOK_FORMAT} v{CODEBOOK_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        let mut cb = file.codebooks;
        cb.rebuild_index()?;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the closest chosen centre.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total <= 0.0 {
            // All remaining points coincide with a centre.
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[idx].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. An emptied cluster takes over
/// the point of the currently largest cluster that is farthest from its
/// centre.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(&centroids, p);
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("k >= 1");
            if counts[largest] <= 1 {
                break;
            }
            let far = (0..points.len())
                .filter(|&i| assign[i] == largest)
                .max_by(|&i, &j| {
                    sq_dist(&points[i], &centroids[largest])
                        .total_cmp(&sq_dist(&points[j], &centroids[largest]))
                        .then(j.cmp(&i))
                })
                .expect("largest cluster is non-empty");
            assign[far] = empty;
            counts[largest] -= 1;
            counts[empty] = 1;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (a, p) in assign.iter().zip(points) {
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += *x;
            }
        }
        for (c, (s, n)) in centroids.iter_mut().zip(sums.into_iter().zip(&counts)) {
            if *n > 0 {
                *c = s.into_iter().map(|v| v / *n as f64).collect();
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn table(vectors: Vec<Vec<f64>>) -> ItemEmbeddingTable {
        ItemEmbeddingTable::new(
            vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| (ItemId(i as u32), v))
                .collect(),
        )
        .unwrap()
    }

    fn random_table(n: usize, dim: usize, seed: u64) -> ItemEmbeddingTable {
        let mut r = rng::rng(seed);
        table(
            (0..n)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
                .collect(),
        )
    }

    #[test]
    fn square_corners_get_their_own_token() {
        let t = table(vec![vec![0., 0.], vec![0., 1.], vec![1., 0.], vec![1., 1.]]);
        let cb = SemanticCodebooks::fit(&t, 1, 4, 3).unwrap();
        let mut tokens: Vec<Token> = (0..4).map(|i| cb.encode(ItemId(i)).unwrap()[0]).collect();
        tokens.sort();
        assert_eq!(tokens, vec![0, 1, 2, 3]);
        assert_eq!(cb.residual_mse(&t).unwrap(), vec![0.0]);
    }

    #[test]
    fn identical_embeddings_are_disambiguated() {
        let t = table(vec![vec![1., 2.], vec![1., 2.]]);
        let cb = SemanticCodebooks::fit(&t, 2, 1, 0).unwrap();
        let a = cb.encode(ItemId(0)).unwrap();
        let b = cb.encode(ItemId(1)).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], 0);
        assert_eq!(b[1], 1);
        assert_eq!(cb.vocab_sizes(), vec![1, 2]);
    }

    #[test]
    fn single_item_encodes_to_zeros() {
        let t = table(vec![vec![0.3, -0.2, 1.0]]);
        let cb = SemanticCodebooks::fit(&t, 4, 1, 0).unwrap();
        assert_eq!(cb.encode(ItemId(0)).unwrap(), &[0, 0, 0, 0]);
    }

    #[test]
    fn residual_error_non_increasing() {
        let t = random_table(64, 8, 11);
        let cb = SemanticCodebooks::fit(&t, 3, 8, 5).unwrap();
        let mse = cb.residual_mse(&t).unwrap();
        assert_eq!(mse.len(), 3);
        for w in mse.windows(2) {
            assert!(w[1] <= w[0], "{mse:?}");
        }
        // The first level must actually explain some variance.
        let raw: f64 = t.items().iter().map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / 64.0;
        assert!(mse[0] < raw);
    }

    #[test]
    fn decode_inverts_encode_over_the_catalog() {
        let t = random_table(200, 6, 2);
        let cb = SemanticCodebooks::fit(&t, 4, 4, 9).unwrap();
        for (id, _) in t.items() {
            assert_eq!(cb.decode(cb.encode(*id).unwrap()).unwrap(), Some(*id));
        }
        let max: Vec<Token> = cb.vocab_sizes().iter().map(|v| v - 1).collect();
        // All-max sequences are unassigned unless the last group happens to be full.
        let found = cb.decode(&max).unwrap();
        assert!(found.is_none() || cb.encode(found.unwrap()).unwrap() == max.as_slice());
    }

    #[test]
    fn unassigned_sequence_decodes_to_none() {
        let t = table(vec![vec![0.], vec![10.], vec![10.]]);
        let cb = SemanticCodebooks::fit(&t, 2, 2, 1).unwrap();
        assert_eq!(cb.vocab_sizes(), vec![2, 2]);
        let lone = cb.encode(ItemId(0)).unwrap()[0];
        assert_eq!(cb.decode(&[lone, 1]).unwrap(), None);
    }

    #[test]
    fn errors() {
        let empty = ItemEmbeddingTable::new(vec![]).unwrap();
        assert!(matches!(SemanticCodebooks::fit(&empty, 2, 1, 0), Err(Error::Input(_))));
        let t = random_table(4, 2, 0);
        assert!(matches!(SemanticCodebooks::fit(&t, 2, 5, 0), Err(Error::Parameter(_))));
        assert!(matches!(SemanticCodebooks::fit(&t, 0, 2, 0), Err(Error::Parameter(_))));
        let cb = SemanticCodebooks::fit(&t, 2, 2, 0).unwrap();
        assert!(matches!(cb.encode(ItemId(99)), Err(Error::Lookup(_))));
        assert!(matches!(cb.decode(&[7, 0]), Err(Error::Index(_))));
        assert!(cb.decode(&[0]).is_err());
    }

    #[test]
    fn deterministic_and_round_trips_bit_exactly() {
        let t = random_table(50, 5, 4);
        let a = SemanticCodebooks::fit(&t, 4, 3, 77).unwrap();
        let b = SemanticCodebooks::fit(&t, 4, 3, 77).unwrap();
        assert_eq!(a, b);
        let back = SemanticCodebooks::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
        for (x, y) in a.codebooks().iter().flatten().flatten().zip(back.codebooks().iter().flatten().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let t = random_table(5, 2, 4);
        let json = SemanticCodebooks::fit(&t, 2, 2, 0).unwrap().to_json().unwrap();
        let tampered = json.replace("\"version\":1", "\"version\":9");
        assert!(matches!(SemanticCodebooks::from_json(&tampered), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mapping_is_injective(seed in 0u64..500, n in 2usize..60, levels in 2usize..5) {
            let t = random_table(n, 3, seed);
            let cb = SemanticCodebooks::fit(&t, levels, 2.min(n), seed).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (id, _) in t.items() {
                prop_assert!(seen.insert(cb.encode(*id).unwrap().to_vec()));
            }
            let mse = cb.residual_mse(&t).unwrap();
            for w in mse.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
