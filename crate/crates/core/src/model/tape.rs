//! Reverse-mode differentiation over 2-D matrices.
//!
//! The forward pass appends nodes; [`Tape::backward`] walks them in
//! reverse and returns one gradient per parameter. Sequences of different
//! lengths are packed row-wise and attention works per [`Segment`].

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ParamStore;

pub(crate) type Var = usize;

/// Row range of one sequence inside a packed matrix.
pub(crate) type Segment = Range<usize>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_segs: Vec<Segment>,
    k_segs: Vec<Segment>,
    /// Softmax weights, indexed `[segment * heads + head]`.
    probs: Vec<Array2<f64>>,
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout { x: Var, mask: Array2<f64> },
    Attention(Box<AttentionRecord>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, grad: Array2<f64>) {
    match &mut grads[var] {
        Some(existing) => *existing += &grad,
        slot @ None => *slot = Some(grad),
    }
}

impl Tape {
    pub(crate) fn new(num_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: vec![None; num_params],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub(crate) fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var].value
    }

    pub(crate) fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Parameter `index` of `store`; recorded once per tape.
    pub(crate) fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        if let Some(var) = self.param_vars[index] {
            return var;
        }
        let var = self.push(store.get(index).clone(), Op::Param(index));
        self.param_vars[index] = Some(var);
        var
    }

    pub(crate) fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `x` plus a 1×n row broadcast over every row.
    pub(crate) fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    pub(crate) fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub(crate) fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let n = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub(crate) fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Multiply by a fixed mask (entries 0 or 1/(1-p)).
    pub(crate) fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let value = self.value(x) * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention. `q` rows in `q_segs[b]`
    /// attend to `k`/`v` rows in `k_segs[b]`; with `causal`, query `i`
    /// only sees keys `0..=i` of its own segment.
    pub(crate) fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &[Segment],
        k_segs: &[Segment],
        causal: bool,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qm.nrows(), d));
        let mut probs = Vec::with_capacity(q_segs.len() * heads);
        for (qs, ks) in q_segs.iter().zip(k_segs) {
            debug_assert!(!causal || qs.len() == ks.len());
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                if ks.is_empty() {
                    probs.push(Array2::zeros((qs.len(), 0)));
                    continue;
                }
                let qh = qm.slice(s![qs.clone(), cols.clone()]);
                let kh = km.slice(s![ks.clone(), cols.clone()]);
                let vh = vm.slice(s![ks.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                if causal {
                    for i in 0..scores.nrows() {
                        for j in (i + 1)..scores.ncols() {
                            scores[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![qs.clone(), cols]).assign(&scores.dot(&vh));
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                q_segs: q_segs.to_vec(),
                k_segs: k_segs.to_vec(),
                probs,
            })),
        )
    }

    /// Gradients of `Σ seed ⊙ output` for every parameter in `store`'s
    /// order; parameters the output does not depend on get zeros.
    pub(crate) fn backward(&self, output: Var, seed: Array2<f64>, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed);
        let mut param_grads = store.zeros_like();

        for i in (0..=output).rev() {
            let Some(grad) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(index) => param_grads[*index] += &grad,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = grad.dot(&bv.t());
                    let gb = av.t().dot(&grad);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, grad.clone());
                    accumulate(&mut grads, *a, grad);
                }
                Op::AddRow(x, row) => {
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, summed);
                    accumulate(&mut grads, *x, grad);
                }
                Op::Gather { table, ids } => {
                    let mut g = Array2::zeros(self.value(*table).raw_dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut target = g.row_mut(id);
                        target += &grad.row(row);
                    }
                    accumulate(&mut grads, *table, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    let dgamma = (&grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &grad * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let inv = inv_std[r];
                        Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = inv * (d - sum_d / n - h * sum_dx / n);
                        });
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut g = grad;
                    Zip::from(&mut g)
                        .and(self.value(*x))
                        .for_each(|g, &v| *g *= gelu_grad(v));
                    accumulate(&mut grads, *x, g);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, grad * mask),
                Op::Attention(rec) => self.attention_backward(rec, &grad, &mut grads),
            }
        }
        param_grads
    }

    fn attention_backward(&self, rec: &AttentionRecord, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let (qm, km, vm) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let d = qm.ncols();
        let dh = d / rec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(qm.raw_dim());
        let mut dk = Array2::zeros(km.raw_dim());
        let mut dv = Array2::zeros(vm.raw_dim());
        for (b, (qs, ks)) in rec.q_segs.iter().zip(&rec.k_segs).enumerate() {
            if ks.is_empty() {
                continue;
            }
            for h in 0..rec.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &rec.probs[b * rec.heads + h];
                let go: ArrayView2<f64> = grad.slice(s![qs.clone(), cols.clone()]);
                let qh = qm.slice(s![qs.clone(), cols.clone()]);
                let kh = km.slice(s![ks.clone(), cols.clone()]);
                let vh = vm.slice(s![ks.clone(), cols.clone()]);

                let mut dvh = dv.slice_mut(s![ks.clone(), cols.clone()]);
                dvh += &p.t().dot(&go);

                let dp = go.dot(&vh.t());
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|r, &pv| *r -= pv * dot);
                }
                ds.mapv_inplace(|x| x * scale);
                let mut dqh = dq.slice_mut(s![qs.clone(), cols.clone()]);
                dqh += &ds.dot(&kh);
                let mut dkh = dk.slice_mut(s![ks.clone(), cols]);
                dkh += &ds.t().dot(&qh);
            }
        }
        accumulate(grads, rec.q, dq);
        accumulate(grads, rec.k, dk);
        accumulate(grads, rec.v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// A graph touching every op.
    fn scalar_graph(store: &ParamStore) -> (Tape, Var) {
        let mut tape = Tape::new(store.len());
        let table = tape.param(store, 0);
        let w = tape.param(store, 1);
        let b = tape.param(store, 2);
        let gamma = tape.param(store, 3);
        let beta = tape.param(store, 4);
        let x = tape.gather(table, &[0, 2, 1, 2, 3]);
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let h = tape.layer_norm(h, gamma, beta);
        let g = tape.gelu(h);
        let segs = vec![0..2, 2..5];
        let self_attn = tape.attention(g, h, g, 2, &segs, &segs, true);
        let cross_q = vec![0..3, 3..5];
        let cross = tape.attention(self_attn, x, h, 2, &cross_q, &[0..2, 2..5], false);
        let mask = Array2::from_shape_fn((5, 4), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.25 });
        let dropped = tape.dropout(cross, mask);
        let out = tape.add(dropped, x);
        (tape, out)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add("table", random(&mut rng, 4, 4));
        store.add("w", random(&mut rng, 4, 4));
        store.add("b", random(&mut rng, 1, 4));
        store.add("gamma", random(&mut rng, 1, 4));
        store.add("beta", random(&mut rng, 1, 4));
        let weights = random(&mut rng, 5, 4);

        // reduce with a fixed random projection
        let objective = |store: &ParamStore| {
            let (tape, out) = scalar_graph(store);
            (tape.value(out) * &weights).sum()
        };
        let (tape, out) = scalar_graph(&store);
        let grads = tape.backward(out, weights.clone(), &store);

        let h = 1e-6;
        for p in 0..store.len() {
            for idx in 0..store.get(p).len() {
                let (r, c) = (idx / store.get(p).ncols(), idx % store.get(p).ncols());
                let mut up = store.clone();
                up.get_mut(p)[[r, c]] += h;
                let mut down = store.clone();
                down.get_mut(p)[[r, c]] -= h;
                let fd = (objective(&up) - objective(&down)) / (2.0 * h);
                let an = grads[p][[r, c]];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / denom < 1e-5, "param {} [{r},{c}]: {an} vs {fd}", store.name(p));
            }
        }
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let q = random(&mut rng, 4, 4);
        let mut k = random(&mut rng, 4, 4);
        let v = random(&mut rng, 4, 4);
        let run = |k: &Array2<f64>| {
            let mut tape = Tape::new(store.len());
            let (qv, kv, vv) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
            let o = tape.attention(qv, kv, vv, 2, &[0..4], &[0..4], true);
            tape.value(o).clone()
        };
        let before = run(&k);
        k.row_mut(3).fill(9.0);
        let after = run(&k);
        for r in 0..3 {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_ne!(before.row(3), after.row(3));
    }

    #[test]
    fn empty_key_segment_gives_zeros() {
        let store = ParamStore::new();
        let mut tape = Tape::new(store.len());
        let q = tape.input(Array2::ones((2, 2)));
        let k = tape.input(Array2::zeros((0, 2)));
        let o = tape.attention(q, k, k, 1, &[0..2], &[0..0], false);
        assert!(tape.value(o).iter().all(|&x| x == 0.0));
    }
}
