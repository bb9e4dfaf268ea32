//! Repeated Plackett-Luce draws from one fixed score vector.
//!
//! [`PlSampler`] keeps the weights `exp(s - max)` twice: in an alias table
//! and in a sum tree. While the items placed so far hold less than half of
//! the total weight, the next item is drawn from the alias table and
//! redrawn if already placed, which gives the same conditional law at
//! `O(1)` expected cost. After that the draw continues on the sum tree at
//! `O(log n)` per slot. Touched tree leaves are restored afterwards, which
//! reproduces the original tree bit for bit because every internal node is
//! recomputed from its children rather than patched by subtraction.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct PlSampler {
    shift: f64,
    n: usize,
    size: usize,
    tree: Vec<f64>,
    scores: Vec<f64>,
    weights: Vec<f64>,
    total: f64,
    alias_prob: Vec<f64>,
    alias: Vec<u32>,
    placed: Vec<bool>,
}

/// Vose's alias table for `w` (not necessarily normalized, positive sum).
fn alias_table(w: &[f64], total: f64) -> (Vec<f64>, Vec<u32>) {
    let n = w.len();
    let mut prob: Vec<f64> = w.iter().map(|x| x * n as f64 / total).collect();
    let mut alias: Vec<u32> = (0..n as u32).collect();
    let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| prob[i] < 1.0);
    while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
        small.pop();
        alias[s] = l as u32;
        prob[l] -= 1.0 - prob[s];
        if prob[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    for i in small.into_iter().chain(large) {
        prob[i] = 1.0;
    }
    (prob, alias)
}

impl PlSampler {
    pub fn new(scores: &[f64]) -> Self {
        let n = scores.len();
        let size = n.next_power_of_two().max(1);
        let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        let mut tree = vec![0.0; 2 * size];
        for (i, s) in scores.iter().enumerate() {
            tree[size + i] = (s - shift).exp();
        }
        for node in (1..size).rev() {
            tree[node] = tree[2 * node] + tree[2 * node + 1];
        }
        let total = tree[1];
        let (alias_prob, alias) = if total > 0.0 {
            alias_table(&tree[size..size + n], total)
        } else {
            (Vec::new(), Vec::new())
        };
        let weights = tree[size..size + n].to_vec();
        Self {
            shift,
            n,
            size,
            tree,
            scores: scores.to_vec(),
            weights,
            total,
            alias_prob,
            alias,
            placed: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// `exp(score - shift)` of item `i`.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    fn set_leaf(&mut self, i: usize, w: f64) {
        let mut node = self.size + i;
        self.tree[node] = w;
        while node > 1 {
            node /= 2;
            self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1];
        }
    }

    fn descend(&self, mut u: f64) -> usize {
        let mut node = 1;
        while node < self.size {
            let (left, right) = (self.tree[2 * node], self.tree[2 * node + 1]);
            if (u < left && left > 0.0) || right <= 0.0 {
                node *= 2;
            } else {
                u -= left;
                node = 2 * node + 1;
            }
        }
        node - self.size
    }

    fn alias_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        // one uniform: the integer part picks the column, the fraction the side
        let u = rng.random::<f64>() * self.n as f64;
        let i = (u as usize).min(self.n - 1);
        if u - (i as f64) < self.alias_prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }

    /// Draw an `l`-prefix into `order` (cleared first). Returns the log of
    /// the total `exp(score)` mass left unplaced, `-inf` when nothing is left.
    pub fn sample<R: Rng + ?Sized>(&mut self, l: usize, rng: &mut R, order: &mut Vec<usize>) -> f64 {
        assert!(l <= self.n, "prefix of {l} from {} items", self.n);
        order.clear();
        let mut removed = 0.0;
        let mut on_tree = false;
        for _ in 0..l {
            if !on_tree && !(self.total > 0.0 && removed < 0.5 * self.total) {
                on_tree = true;
                for j in 0..order.len() {
                    self.set_leaf(order[j], 0.0);
                }
            }
            let i = if !on_tree {
                loop {
                    let i = self.alias_draw(rng);
                    if !self.placed[i] {
                        break i;
                    }
                }
            } else if self.tree[1] > 0.0 {
                let i = self.descend(rng.random::<f64>() * self.tree[1]);
                self.set_leaf(i, 0.0);
                i
            } else {
                // Remaining weights underflowed: fall back to best remaining score.
                let i = (0..self.n)
                    .filter(|&i| !self.placed[i])
                    .max_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(b.cmp(&a)))
                    .expect("l <= n");
                self.set_leaf(i, 0.0);
                i
            };
            self.placed[i] = true;
            removed += self.weights[i];
            order.push(i);
        }
        let tail = if on_tree {
            let t = self.tree[1];
            for &i in order.iter() {
                self.set_leaf(i, self.weights[i]);
            }
            t
        } else {
            self.total - removed
        };
        for &i in order.iter() {
            self.placed[i] = false;
        }
        if tail > 0.0 {
            tail.ln() + self.shift
        } else {
            f64::NEG_INFINITY
        }
    }

}

/// Sequential draw of an `l`-prefix from a short weight vector.
/// `weights[i]` is `exp(score_i - shift)` for any fixed shift. Like
/// [`PlSampler`], draws are made with replacement and redrawn while the
/// placed mass is below half the total (binary search over prefix sums kept
/// in `cum`), then by linear scans over what is left. Placed entries of
/// `weights` are set to zero. Returns the unplaced weight mass (same shift).
pub fn sample_small<R: Rng + ?Sized>(
    w: &mut [f64],
    cum: &mut Vec<f64>,
    l: usize,
    rng: &mut R,
    order: &mut Vec<usize>,
) -> f64 {
    assert!(l <= w.len());
    order.clear();
    cum.clear();
    let mut full = 0.0;
    for &x in w.iter() {
        full += x;
        cum.push(full);
    }
    let mut removed = 0.0;
    while order.len() < l && full > 0.0 && removed < 0.5 * full {
        let u = rng.random::<f64>() * full;
        let i = cum.partition_point(|&c| c <= u).min(w.len() - 1);
        if w[i] > 0.0 {
            removed += w[i];
            w[i] = 0.0;
            order.push(i);
        }
    }
    if order.len() == l {
        return full - removed;
    }
    let full: f64 = w.iter().sum();
    let mut total = full;
    while order.len() < l {
        let mut pick = None;
        if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    pick = Some(i);
                    if u < wi {
                        break;
                    }
                    u -= wi;
                }
            }
        }
        let i = pick.unwrap_or_else(|| {
            (0..w.len())
                .find(|i| !order.contains(i))
                .expect("l <= n")
        });
        order.push(i);
        total -= w[i];
        w[i] = 0.0;
        if !(total > 1e-6 * full) {
            // running difference lost its precision
            total = w.iter().sum();
        }
    }
    w.iter().sum()
}
