//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for back-propagation.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    BroadcastRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<T>,
        count: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Array2<T>,
        probs: Array2<T>,
        epsilon: T,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter, reusing the node if it is already in the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    /// Adds a constant matrix (e.g. an attention mask); no gradient flows to it.
    pub fn add_const(&mut self, x: Var, constant: &Array2<T>) -> Var {
        let value = self.value(x) + constant;
        self.push(value, Op::AddConst(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(T::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = T::of(1e-5);
        let input = self.value(x);
        let width = T::of(input.ncols() as f64);
        let mut normed = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / width;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &normed * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), indices);
        self.push(value, Op::Gather(table, indices.to_vec()))
    }

    /// Column-wise maximum over all rows, giving a `1×n` row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let mut arg = vec![0usize; input.ncols()];
        let mut value = Array2::zeros((1, input.ncols()));
        for (c, col) in input.columns().into_iter().enumerate() {
            let mut best = 0;
            for r in 1..col.len() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            arg[c] = best;
            value[[0, c]] = col[best];
        }
        self.push(value, Op::MaxRows(x, arg))
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let value = self
            .value(x)
            .broadcast((rows, self.shape(x).1))
            .expect("broadcast_rows expects a single row")
            .to_owned();
        self.push(value, Op::BroadcastRows(x))
    }

    /// Mean token cross-entropy over rows that carry a target; `None` rows
    /// are ignored. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.nrows(), targets.len(), "cross_entropy: target count");
        let mut total = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= probs[[r, t]].max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean over rows of `−Σ_l target_l · log(max(p_l, ε))` with
    /// `p = softmax(logits)`. Returns a 1×1 node.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Array2<T>, epsilon: T) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.dim(), targets.dim(), "soft_cross_entropy: target shape");
        let mut total = T::zero();
        for (p_row, t_row) in probs.rows().into_iter().zip(targets.rows()) {
            for (&p, &t) in p_row.iter().zip(t_row.iter()) {
                total -= t * p.max(epsilon).ln();
            }
        }
        let loss = total / T::of(probs.nrows() as f64);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
                epsilon,
            },
        )
    }

    /// Back-propagates from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(upstream);
                continue;
            }
            let mut send = |v: Var, g: Array2<T>| accumulate(&mut grads[v.0], g);
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    send(*a, upstream.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&upstream));
                }
                Op::MatMulNt(a, b) => {
                    send(*a, upstream.dot(self.value(*b)));
                    send(*b, upstream.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    send(*a, upstream.clone());
                    send(*b, upstream.clone());
                }
                Op::AddRow(x, row) => {
                    send(*row, upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, upstream.clone());
                }
                Op::Mul(a, b) => {
                    send(*a, &upstream * self.value(*b));
                    send(*b, &upstream * self.value(*a));
                }
                Op::Scale(x, factor) => send(*x, &upstream * *factor),
                Op::AddConst(x) => send(*x, upstream.clone()),
                Op::Tanh(x) => {
                    let mut g = upstream.clone();
                    g.zip_mut_with(&node.value, |g, &y| *g *= T::one() - y * y);
                    send(*x, g);
                }
                Op::Relu(x) => {
                    let mut g = upstream.clone();
                    g.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    send(*x, g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut g = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: T = (0..y.ncols()).map(|c| upstream[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            g[[r, c]] = y[[r, c]] * (upstream[[r, c]] - dot);
                        }
                    }
                    send(*x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    send(*bias, upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(
                        *gain,
                        (&upstream * normed).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dn = &upstream * self.value(*gain);
                    let width = T::of(normed.ncols() as f64);
                    let mut g = Array2::zeros(normed.raw_dim());
                    for r in 0..normed.nrows() {
                        let sum_dn: T = dn.row(r).sum();
                        let sum_dn_n: T = dn.row(r).iter().zip(normed.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..normed.ncols() {
                            g[[r, c]] = inv_std[r] / width
                                * (width * dn[[r, c]] - sum_dn - normed[[r, c]] * sum_dn_n);
                        }
                    }
                    send(*x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        send(p, upstream.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut g = Array2::zeros(self.value(*x).raw_dim());
                    let w = upstream.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&upstream);
                    send(*x, g);
                }
                Op::SliceRows(x, start) => {
                    let mut g = Array2::zeros(self.value(*x).raw_dim());
                    let h = upstream.nrows();
                    g.slice_mut(s![*start..*start + h, ..]).assign(&upstream);
                    send(*x, g);
                }
                Op::Gather(table, indices) => {
                    let mut g = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut dst = g.row_mut(i);
                        dst += &upstream.row(r);
                    }
                    send(*table, g);
                }
                Op::MaxRows(x, arg) => {
                    let mut g = Array2::zeros(self.value(*x).raw_dim());
                    for (c, &r) in arg.iter().enumerate() {
                        g[[r, c]] += upstream[[0, c]];
                    }
                    send(*x, g);
                }
                Op::BroadcastRows(x) => {
                    send(*x, upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut g = Array2::zeros(probs.raw_dim());
                    if *count > 0 {
                        let scale = upstream[[0, 0]] / T::of(*count as f64);
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                for c in 0..probs.ncols() {
                                    g[[r, c]] = probs[[r, c]] * scale;
                                }
                                g[[r, t]] -= scale;
                            }
                        }
                    }
                    send(*logits, g);
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                    epsilon,
                } => {
                    let scale = upstream[[0, 0]] / T::of(probs.nrows() as f64);
                    let mut g = Array2::zeros(probs.raw_dim());
                    for r in 0..probs.nrows() {
                        let row = soft_cross_entropy_grad_row(
                            probs.row(r).as_slice().expect("contiguous"),
                            targets.row(r).iter().copied().collect::<Vec<_>>().as_slice(),
                            *epsilon,
                        );
                        for (c, v) in row.into_iter().enumerate() {
                            g[[r, c]] = v * scale;
                        }
                    }
                    send(*logits, g);
                }
            }
        }

        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        let mut params: Vec<(ParamId, Array2<T>)> = params;
        params.sort_by_key(|(id, _)| *id);
        Gradients {
            params,
            leaves: grads,
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

/// Gradient of `−Σ_l t_l · log(max(p_l, ε))` w.r.t. the logits that produced
/// `p`. Clamped components contribute no gradient.
pub fn soft_cross_entropy_grad_row<T: Scalar>(probs: &[T], targets: &[T], epsilon: T) -> Vec<T> {
    let active_mass: T = probs
        .iter()
        .zip(targets)
        .filter(|(&p, _)| p >= epsilon)
        .map(|(_, &t)| t)
        .sum();
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let own = if p >= epsilon { t } else { T::zero() };
            p * active_mass - own
        })
        .collect()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<(ParamId, Array2<T>)>,
    leaves: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &[(ParamId, Array2<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient reaching an input node created with [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Array2<T>> {
        self.leaves[v.0].as_ref()
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate(*id, g);
        }
    }

    pub fn accumulate_scaled(&self, store: &mut ParamStore<T>, factor: T) {
        for (id, g) in &self.params {
            store.accumulate(*id, &(g * factor));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    /// Checks every input gradient of `f` against central differences.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.input(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|x| g.input(x)).collect();
                    let out = f(&mut g, &vars);
                    g.scalar(out)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let tol = 1e-6 + 1e-5 * a.abs().max(numeric.abs());
                assert!(
                    (a - numeric).abs() <= tol,
                    "input {k} entry {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Reduces a matrix to a scalar through a fixed random projection so
    /// every entry receives a distinct gradient.
    fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let (r, c) = g.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(random(r, c, &mut rng));
        let prod = g.mul(x, w);
        let ones_r = g.input(Array2::ones((1, r)));
        let ones_c = g.input(Array2::ones((c, 1)));
        let col = g.matmul(ones_r, prod);
        g.matmul(col, ones_c)
    }

    #[test]
    fn matmul_and_transposed_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng)], |g, v| {
            let y = g.matmul(v[0], v[1]);
            project(g, y, 9)
        });
        check(vec![random(3, 4, &mut rng), random(5, 4, &mut rng)], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            project(g, y, 9)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(3, 4, &mut rng), random(3, 4, &mut rng), random(1, 4, &mut rng)],
            |g, v| {
                let a = g.add(v[0], v[1]);
                let b = g.mul(a, v[0]);
                let c = g.add_row(b, v[2]);
                let d = g.tanh(c);
                let e = g.relu(d);
                let f = g.scale(e, 1.7);
                let mask = Array2::from_elem((3, 4), 0.25);
                let h = g.add_const(f, &mask);
                project(g, h, 4)
            },
        );
    }

    #[test]
    fn softmax_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng)],
            |g, v| {
                let s = g.softmax_rows(v[0]);
                let n = g.layer_norm(v[0], v[1], v[2]);
                let both = g.add(s, n);
                project(g, both, 5)
            },
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(4, 3, &mut rng), random(4, 2, &mut rng), random(6, 3, &mut rng)], |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]]);
            let sc = g.slice_cols(cat, 1, 3);
            let sr = g.slice_rows(sc, 1, 2);
            let gathered = g.gather(v[2], &[0, 3, 3, 5]);
            let mx = g.max_rows(gathered);
            let bc = g.broadcast_rows(mx, 2);
            let out = g.add(sr, bc);
            project(g, out, 6)
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(4, 3, &mut rng)], |g, v| {
            g.cross_entropy(v[0], &[Some(0), None, Some(2), Some(1)])
        });
        let targets = {
            let mut t = random(4, 3, &mut rng).mapv(f64::abs);
            for mut row in t.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            t
        };
        check(vec![random(4, 3, &mut rng)], move |g, v| {
            g.soft_cross_entropy(v[0], &targets, 1e-12)
        });
    }

    #[test]
    fn parameters_are_deduplicated_and_reported() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Array2::from_elem((2, 2), 0.5));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let prod = g.matmul(a, b);
        let ones = g.input(Array2::ones((1, 2)));
        let row = g.matmul(ones, prod);
        let col = g.input(Array2::ones((2, 1)));
        let out = g.matmul(row, col);
        let grads = g.backward(out);
        // d/dW sum(W·W) = 1·Wᵀ-ish; each entry is 2·0.5·2 = 2
        assert_eq!(grads.param(id).unwrap(), &Array2::from_elem((2, 2), 2.0));
    }
}
