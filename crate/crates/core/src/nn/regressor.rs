//! A small sequence regressor: two LSTM layers, an optional scalar side
//! input joined after the recurrent stack, two tanh dense layers, and a
//! linear head (scalar for outcome regression, 2-vector for action values).
//!
//! Reverse-mode gradients are hand-written and verified against central
//! finite differences (see [`SequenceRegressor::gradient_check`]). All math
//! is `f64`, single-threaded, and allocation-predictable: per-step slices
//! index into `(seq_len·batch, ·)` buffers so every matrix product runs
//! through one GEMM call on contiguous memory.
//!
//! Conventions: the four LSTM gate blocks are ordered `[input, forget, cell,
//! output]` along the `4H` axis; batch row `t·N + i` holds step `t` of sample
//! `i`; the label loss is mean absolute error, the action-masked loss (one
//! output column per sample — the taken action) is mean squared error.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fastmath::{self, gemm, gemm_into, sigmoid_slice, tanh_slice};
use super::{EncodedPrefix, TensorBlob};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter registry order; also the storage, initialization-draw, and
/// checkpoint order.
const PARAM_NAMES: [&str; 12] = [
    "lstm1.w", "lstm1.u", "lstm1.b", "lstm2.w", "lstm2.u", "lstm2.b", "dense1.w", "dense1.b",
    "dense2.w", "dense2.b", "head.w", "head.b",
];

const W1: usize = 0;
const U1: usize = 1;
const B1: usize = 2;
const W2: usize = 3;
const U2: usize = 4;
const B2: usize = 5;
const WD1: usize = 6;
const BD1: usize = 7;
const WD2: usize = 8;
const BD2: usize = 9;
const WO: usize = 10;
const BO: usize = 11;

fn param_shapes(input_dim: usize, hidden: usize, side_dim: usize, out_dim: usize) -> [(usize, usize); 12] {
    let h = hidden;
    [
        (input_dim, 4 * h),
        (h, 4 * h),
        (1, 4 * h),
        (h, 4 * h),
        (h, 4 * h),
        (1, 4 * h),
        (h + side_dim, h),
        (1, h),
        (h, h),
        (1, h),
        (h, out_dim),
        (1, out_dim),
    ]
}

/// Serializable snapshot of a model, including optimizer state;
/// `from_state(state())` reproduces the model bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorState {
    pub input_dim: usize,
    pub hidden: usize,
    pub side_dim: usize,
    pub out_dim: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub step_count: u64,
    pub tensors: Vec<TensorBlob>,
    pub adam_m: Vec<TensorBlob>,
    pub adam_v: Vec<TensorBlob>,
}

pub struct SequenceRegressor {
    pub input_dim: usize,
    pub hidden: usize,
    pub side_dim: usize,
    pub out_dim: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    adam_m: Vec<Array2<f64>>,
    adam_v: Vec<Array2<f64>>,
    step_count: u64,
    scratch: RefCell<BufferPool>,
}

/// Recycled workspace buffers, bucketed by element count. The batch-sized
/// intermediates (gates, cell states, their gradients) are several MB each;
/// allocating them fresh every forward/backward pass costs more in page
/// faults than the arithmetic they hold, so passes check buffers out of this
/// pool and return them when the pass is done. Checked-out buffers carry
/// stale contents — every consumer fully overwrites (or explicitly zeroes)
/// before reading.
#[derive(Debug, Default)]
struct BufferPool {
    buckets: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// At most this many spare buffers are kept per size class (enough for the
/// maximum simultaneously-live set in one training step).
const POOL_BUCKET_CAP: usize = 8;

impl BufferPool {
    fn take(pool: &RefCell<Self>, rows: usize, cols: usize) -> Array2<f64> {
        let len = rows * cols;
        let buf = pool
            .borrow_mut()
            .buckets
            .get_mut(&len)
            .and_then(Vec::pop)
            .unwrap_or_else(|| vec![0.0; len]);
        Array2::from_shape_vec((rows, cols), buf).expect("pool buffer length")
    }

    fn put(pool: &RefCell<Self>, arr: Array2<f64>) {
        let (buf, _) = arr.into_raw_vec_and_offset();
        if buf.is_empty() {
            return;
        }
        let mut p = pool.borrow_mut();
        let bucket = p.buckets.entry(buf.len()).or_default();
        if bucket.len() < POOL_BUCKET_CAP {
            bucket.push(buf);
        }
    }
}

struct LayerCache {
    /// Post-activation gates `(T·N, 4H)`.
    gates: Array2<f64>,
    /// Cell states `(T·N, H)`.
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    /// Hidden states `(T·N, H)`; block `T−1` feeds the dense stack.
    h: Array2<f64>,
}

struct ForwardCache {
    x: Array2<f64>,
    l1: LayerCache,
    l2: LayerCache,
    d_in: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    preds: Array2<f64>,
    n: usize,
}

impl SequenceRegressor {
    /// Fresh model. Weights draw from U(−1/√fan_in, +1/√fan_in) in registry
    /// order (row-major within each tensor); biases start at zero except the
    /// LSTM forget-gate block, which starts at +1.
    pub fn new(
        input_dim: usize,
        hidden: usize,
        side_dim: usize,
        out_dim: usize,
        seq_len: usize,
        learning_rate: f64,
        rng: &mut impl Rng,
    ) -> SequenceRegressor {
        let shapes = param_shapes(input_dim, hidden, side_dim, out_dim);
        let mut values = Vec::with_capacity(12);
        for (k, &(rows, cols)) in shapes.iter().enumerate() {
            let mut tensor = Array2::zeros((rows, cols));
            let is_bias = rows == 1 && matches!(k, B1 | B2 | BD1 | BD2 | BO);
            if is_bias {
                if k == B1 || k == B2 {
                    tensor.slice_mut(s![0, hidden..2 * hidden]).fill(1.0);
                }
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                for r in 0..rows {
                    for c in 0..cols {
                        tensor[[r, c]] = rng.random_range(-bound..bound);
                    }
                }
            }
            values.push(tensor);
        }
        let zeros: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        SequenceRegressor {
            input_dim,
            hidden,
            side_dim,
            out_dim,
            seq_len,
            learning_rate,
            grads: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            values,
            step_count: 0,
            scratch: RefCell::new(BufferPool::default()),
        }
    }

    /// Assemble a batch into the `(T·N, F)` step matrix and the `(N, S)`
    /// side-input matrix; row `t·N + i` is step `t` of sample `i`.
    fn stack(&self, batch: &[&EncodedPrefix]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        // Pool buffers hold stale values; the loop below writes every row of
        // both matrices (or errors out, in which case they are just dropped).
        let mut x = BufferPool::take(&self.scratch, self.seq_len * n, self.input_dim);
        let mut side = BufferPool::take(&self.scratch, n, self.side_dim);
        for (i, ep) in batch.iter().enumerate() {
            if ep.steps.dim() != (self.seq_len, self.input_dim) {
                return Err(Error::Config(format!(
                    "encoded prefix is {:?}, model expects {:?}",
                    ep.steps.dim(),
                    (self.seq_len, self.input_dim)
                )));
            }
            for t in 0..self.seq_len {
                x.row_mut(t * n + i).assign(&ep.steps.row(t));
            }
            match (self.side_dim, ep.side_input) {
                (0, None) => {}
                (1, Some(v)) => side[[i, 0]] = v,
                _ => {
                    return Err(Error::Config(
                        "side-input presence does not match the model".into(),
                    ))
                }
            }
        }
        Ok((x, side))
    }

    fn lstm_forward(&self, w: usize, u: usize, b: usize, x_all: &Array2<f64>, n: usize) -> LayerCache {
        let (t_len, h) = (self.seq_len, self.hidden);
        // All four buffers are fully written below — `gates` by the replacing
        // GEMM, the rest row-by-row in the cell loop — so stale pool contents
        // never survive into the cache.
        let mut gates = BufferPool::take(&self.scratch, t_len * n, 4 * h);
        gemm_into(&mut gates, false, x_all, false, &self.values[w], false);
        gates += &self.values[b];
        let mut c = BufferPool::take(&self.scratch, t_len * n, h);
        let mut tanh_c = BufferPool::take(&self.scratch, t_len * n, h);
        let mut h_arr = BufferPool::take(&self.scratch, t_len * n, h);
        for t in 0..t_len {
            if t > 0 {
                gemm(
                    gates.slice_mut(s![t * n..(t + 1) * n, ..]),
                    true,
                    h_arr.slice(s![(t - 1) * n..t * n, ..]),
                    false,
                    self.values[u].view(),
                    false,
                );
            }
            // Contiguous per-row sub-slices of exact length, so the inner
            // loops compile without bounds checks.
            let g_flat = gates.as_slice_mut().expect("contiguous");
            let c_flat = c.as_slice_mut().expect("contiguous");
            let tc_flat = tanh_c.as_slice_mut().expect("contiguous");
            let h_flat = h_arr.as_slice_mut().expect("contiguous");
            let (c_done, c_rest) = c_flat.split_at_mut(t * n * h);
            let cell = |g: &mut [f64], c_prev: &[f64], c_row: &mut [f64], tc_row: &mut [f64], h_row: &mut [f64]| {
                let (gi, rest) = g.split_at_mut(h);
                let (gf, rest) = rest.split_at_mut(h);
                let (gg, go) = rest.split_at_mut(h);
                sigmoid_slice(gi);
                sigmoid_slice(gf);
                tanh_slice(gg);
                sigmoid_slice(go);
                for j in 0..h {
                    let cv = gi[j] * gg[j] + if c_prev.is_empty() { 0.0 } else { gf[j] * c_prev[j] };
                    let tc = fastmath::tanh(cv);
                    c_row[j] = cv;
                    tc_row[j] = tc;
                    h_row[j] = go[j] * tc;
                }
            };
            let g_rows = g_flat[t * n * 4 * h..][..n * 4 * h].chunks_exact_mut(4 * h);
            let c_rows = c_rest[..n * h].chunks_exact_mut(h);
            let tc_rows = tc_flat[t * n * h..][..n * h].chunks_exact_mut(h);
            let h_rows = h_flat[t * n * h..][..n * h].chunks_exact_mut(h);
            if t == 0 {
                for (((g, c_row), tc_row), h_row) in g_rows.zip(c_rows).zip(tc_rows).zip(h_rows) {
                    cell(g, &[], c_row, tc_row, h_row);
                }
            } else {
                let cp_rows = c_done[(t - 1) * n * h..][..n * h].chunks_exact(h);
                for ((((g, cp), c_row), tc_row), h_row) in
                    g_rows.zip(cp_rows).zip(c_rows).zip(tc_rows).zip(h_rows)
                {
                    cell(g, cp, c_row, tc_row, h_row);
                }
            }
        }
        LayerCache { gates, c, tanh_c, h: h_arr }
    }

    fn forward_cached(&self, x: Array2<f64>, side: Array2<f64>) -> ForwardCache {
        let n = x.nrows() / self.seq_len;
        let h = self.hidden;
        let l1 = self.lstm_forward(W1, U1, B1, &x, n);
        let l2 = self.lstm_forward(W2, U2, B2, &l1.h, n);
        let mut d_in = BufferPool::take(&self.scratch, n, h + self.side_dim);
        d_in.slice_mut(s![.., 0..h])
            .assign(&l2.h.slice(s![(self.seq_len - 1) * n.., ..]));
        if self.side_dim > 0 {
            d_in.slice_mut(s![.., h..]).assign(&side);
        }
        BufferPool::put(&self.scratch, side);
        let mut a1 = BufferPool::take(&self.scratch, n, h);
        gemm_into(&mut a1, false, &d_in, false, &self.values[WD1], false);
        a1 += &self.values[BD1];
        tanh_slice(a1.as_slice_mut().expect("contiguous"));
        let mut a2 = BufferPool::take(&self.scratch, n, h);
        gemm_into(&mut a2, false, &a1, false, &self.values[WD2], false);
        a2 += &self.values[BD2];
        tanh_slice(a2.as_slice_mut().expect("contiguous"));
        let mut preds = BufferPool::take(&self.scratch, n, self.out_dim);
        gemm_into(&mut preds, false, &a2, false, &self.values[WO], false);
        preds += &self.values[BO];
        ForwardCache { x, l1, l2, d_in, a1, a2, preds, n }
    }

    /// Return a spent forward pass's buffers to the pool.
    fn recycle_cache(&self, cache: ForwardCache) {
        let ForwardCache { x, l1, l2, d_in, a1, a2, preds, n: _ } = cache;
        for layer in [l1, l2] {
            let LayerCache { gates, c, tanh_c, h } = layer;
            for arr in [gates, c, tanh_c, h] {
                BufferPool::put(&self.scratch, arr);
            }
        }
        for arr in [x, d_in, a1, a2, preds] {
            BufferPool::put(&self.scratch, arr);
        }
    }

    /// Predictions for a batch: `(N, out_dim)`.
    pub fn forward_refs(&self, batch: &[&EncodedPrefix]) -> Result<Array2<f64>> {
        let (x, side) = self.stack(batch)?;
        let mut cache = self.forward_cached(x, side);
        let preds = std::mem::replace(&mut cache.preds, Array2::zeros((0, 0)));
        self.recycle_cache(cache);
        Ok(preds)
    }

    /// Convenience wrapper over [`SequenceRegressor::forward_refs`].
    pub fn forward_batch(&self, batch: &[EncodedPrefix]) -> Result<Array2<f64>> {
        self.forward_refs(&batch.iter().collect::<Vec<_>>())
    }

    /// Backward pass through one LSTM layer. `extern_dh` is `(T·N, H)` —
    /// the loss gradient arriving at each step's hidden state from outside
    /// the layer. Returns the gradient w.r.t. the layer input if requested.
    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        pool: &RefCell<BufferPool>,
        seq_len: usize,
        hidden: usize,
        n: usize,
        w_value: &Array2<f64>,
        u_value: &Array2<f64>,
        grad_w: &mut Array2<f64>,
        grad_u: &mut Array2<f64>,
        grad_b: &mut Array2<f64>,
        x_all: &Array2<f64>,
        cache: &LayerCache,
        extern_dh: &Array2<f64>,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let (t_len, h) = (seq_len, hidden);
        // `dgates` is fully written by the step loop; the carries accumulate
        // and must start from zero.
        let mut dgates = BufferPool::take(pool, t_len * n, 4 * h);
        let mut dh_carry = BufferPool::take(pool, n, h);
        dh_carry.fill(0.0);
        let mut dc_carry = BufferPool::take(pool, n, h);
        dc_carry.fill(0.0);
        for t in (0..t_len).rev() {
            {
                let g_flat = cache.gates.as_slice().expect("contiguous");
                let c_flat = cache.c.as_slice().expect("contiguous");
                let tc_flat = cache.tanh_c.as_slice().expect("contiguous");
                let edh_flat = extern_dh.as_slice().expect("contiguous");
                let dg_flat = dgates.as_slice_mut().expect("contiguous");
                let dhc_flat = dh_carry.as_slice().expect("contiguous");
                let dcc_flat = dc_carry.as_slice_mut().expect("contiguous");
                let step = |g: &[f64],
                            dg: &mut [f64],
                            c_prev: &[f64],
                            tc_row: &[f64],
                            edh: &[f64],
                            dhc: &[f64],
                            dcc: &mut [f64]| {
                    let (gi, rest) = g.split_at(h);
                    let (gf, rest) = rest.split_at(h);
                    let (gg, go) = rest.split_at(h);
                    let (dgi, rest) = dg.split_at_mut(h);
                    let (dgf, rest) = rest.split_at_mut(h);
                    let (dgg, dgo) = rest.split_at_mut(h);
                    for j in 0..h {
                        let dh = edh[j] + dhc[j];
                        let tc = tc_row[j];
                        let dc = dcc[j] + dh * go[j] * (1.0 - tc * tc);
                        dgo[j] = dh * tc * go[j] * (1.0 - go[j]);
                        dgi[j] = dc * gg[j] * gi[j] * (1.0 - gi[j]);
                        dgf[j] = if c_prev.is_empty() {
                            0.0
                        } else {
                            dc * c_prev[j] * gf[j] * (1.0 - gf[j])
                        };
                        dgg[j] = dc * gi[j] * (1.0 - gg[j] * gg[j]);
                        dcc[j] = dc * gf[j];
                    }
                };
                let g_rows = g_flat[t * n * 4 * h..][..n * 4 * h].chunks_exact(4 * h);
                let dg_rows = dg_flat[t * n * 4 * h..][..n * 4 * h].chunks_exact_mut(4 * h);
                let tc_rows = tc_flat[t * n * h..][..n * h].chunks_exact(h);
                let edh_rows = edh_flat[t * n * h..][..n * h].chunks_exact(h);
                let dhc_rows = dhc_flat.chunks_exact(h);
                let dcc_rows = dcc_flat.chunks_exact_mut(h);
                if t == 0 {
                    for (((((g, dg), tc_row), edh), dhc), dcc) in g_rows
                        .zip(dg_rows)
                        .zip(tc_rows)
                        .zip(edh_rows)
                        .zip(dhc_rows)
                        .zip(dcc_rows)
                    {
                        step(g, dg, &[], tc_row, edh, dhc, dcc);
                    }
                } else {
                    let cp_rows = c_flat[(t - 1) * n * h..][..n * h].chunks_exact(h);
                    for ((((((g, dg), cp), tc_row), edh), dhc), dcc) in g_rows
                        .zip(dg_rows)
                        .zip(cp_rows)
                        .zip(tc_rows)
                        .zip(edh_rows)
                        .zip(dhc_rows)
                        .zip(dcc_rows)
                    {
                        step(g, dg, cp, tc_row, edh, dhc, dcc);
                    }
                }
            }
            if t > 0 {
                // Gradient reaching the previous step's hidden state.
                gemm(
                    dh_carry.view_mut(),
                    false,
                    dgates.slice(s![t * n..(t + 1) * n, ..]),
                    false,
                    u_value.view(),
                    true,
                );
            }
        }
        gemm(grad_w.view_mut(), true, x_all.view(), true, dgates.view(), false);
        if t_len > 1 {
            gemm(
                grad_u.view_mut(),
                true,
                cache.h.slice(s![0..(t_len - 1) * n, ..]),
                true,
                dgates.slice(s![n.., ..]),
                false,
            );
        }
        {
            let sums = dgates.sum_axis(Axis(0));
            let mut b_row = grad_b.row_mut(0);
            b_row += &sums;
        }
        let dx = if need_dx {
            let mut dx = BufferPool::take(pool, t_len * n, w_value.nrows());
            gemm_into(&mut dx, false, &dgates, false, w_value, true);
            Some(dx)
        } else {
            None
        };
        for arr in [dgates, dh_carry, dc_carry] {
            BufferPool::put(pool, arr);
        }
        dx
    }

    /// Accumulate gradients for a batch given `∂loss/∂preds`.
    fn backward(&mut self, cache: &ForwardCache, dpred: &Array2<f64>) {
        let n = cache.n;
        let h = self.hidden;
        let values = &self.values;
        let grads = &mut self.grads;
        let pool = &self.scratch;

        // Head and dense stack.
        gemm(grads[WO].view_mut(), true, cache.a2.view(), true, dpred.view(), false);
        {
            let sums = dpred.sum_axis(Axis(0));
            let mut row = grads[BO].row_mut(0);
            row += &sums;
        }
        let mut dz2 = BufferPool::take(pool, n, h);
        gemm_into(&mut dz2, false, dpred, false, &values[WO], true);
        dz2.zip_mut_with(&cache.a2, |d, &a| *d *= 1.0 - a * a);
        gemm(grads[WD2].view_mut(), true, cache.a1.view(), true, dz2.view(), false);
        {
            let sums = dz2.sum_axis(Axis(0));
            let mut row = grads[BD2].row_mut(0);
            row += &sums;
        }
        let mut dz1 = BufferPool::take(pool, n, h);
        gemm_into(&mut dz1, false, &dz2, false, &values[WD2], true);
        dz1.zip_mut_with(&cache.a1, |d, &a| *d *= 1.0 - a * a);
        gemm(grads[WD1].view_mut(), true, cache.d_in.view(), true, dz1.view(), false);
        {
            let sums = dz1.sum_axis(Axis(0));
            let mut row = grads[BD1].row_mut(0);
            row += &sums;
        }
        let mut dd_in = BufferPool::take(pool, n, h + self.side_dim);
        gemm_into(&mut dd_in, false, &dz1, false, &values[WD1], true);

        // Route the dense gradient to the top LSTM's final step (the side
        // input is data, so its gradient column is dropped). Earlier steps
        // receive no external gradient — zero them explicitly since the pool
        // buffer is stale.
        let mut extern_dh2 = BufferPool::take(pool, self.seq_len * n, h);
        extern_dh2.slice_mut(s![0..(self.seq_len - 1) * n, ..]).fill(0.0);
        extern_dh2
            .slice_mut(s![(self.seq_len - 1) * n.., ..])
            .assign(&dd_in.slice(s![.., 0..h]));

        let [gw2, gu2, gb2] = grads.get_disjoint_mut([W2, U2, B2]).expect("distinct");
        let dx2 = Self::lstm_backward(
            pool,
            self.seq_len,
            h,
            n,
            &values[W2],
            &values[U2],
            gw2,
            gu2,
            gb2,
            &cache.l1.h,
            &cache.l2,
            &extern_dh2,
            true,
        )
        .expect("dx requested");

        let [gw1, gu1, gb1] = grads.get_disjoint_mut([W1, U1, B1]).expect("distinct");
        Self::lstm_backward(
            pool,
            self.seq_len,
            h,
            n,
            &values[W1],
            &values[U1],
            gw1,
            gu1,
            gb1,
            &cache.x,
            &cache.l1,
            &dx2,
            false,
        );
        for arr in [dz2, dz1, dd_in, extern_dh2, dx2] {
            BufferPool::put(pool, arr);
        }
    }

    fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    fn apply_adam(&mut self) {
        self.step_count += 1;
        let bc1 = 1.0 - BETA1.powi(self.step_count as i32);
        let bc2 = 1.0 - BETA2.powi(self.step_count as i32);
        let lr = self.learning_rate;
        for k in 0..PARAM_NAMES.len() {
            let g = &self.grads[k];
            let m = &mut self.adam_m[k];
            let v = &mut self.adam_v[k];
            let w = &mut self.values[k];
            ndarray::Zip::from(w)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                });
        }
    }

    /// One optimization step against scalar labels (outcome regression).
    pub fn train_step_labels(&mut self, batch: &[&EncodedPrefix], labels: &[f64]) -> Result<f64> {
        self.train_step(batch, None, labels)
    }

    /// One optimization step against per-sample targets on the taken
    /// action's output only (`actions[i]` indexes the output column; the
    /// untaken column contributes no loss or gradient). The loss is squared
    /// error, so fitted values estimate the mean of each state-action's
    /// target distribution.
    pub fn train_step_q(
        &mut self,
        batch: &[&EncodedPrefix],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<f64> {
        self.train_step(batch, Some(actions), targets)
    }

    fn train_step(
        &mut self,
        batch: &[&EncodedPrefix],
        actions: Option<&[usize]>,
        targets: &[f64],
    ) -> Result<f64> {
        let (x, side) = self.stack(batch)?;
        let cache = self.forward_cached(x, side);
        let (loss, dpred) = loss_and_dpred(&cache.preds, actions, targets)?;
        if !loss.is_finite() {
            self.recycle_cache(cache);
            return Err(Error::Diverged(format!("non-finite training loss {loss}")));
        }
        self.zero_grads();
        self.backward(&cache, &dpred);
        self.recycle_cache(cache);
        self.apply_adam();
        Ok(loss)
    }

    /// Loss on a batch without touching parameters.
    pub fn evaluate_loss(
        &self,
        batch: &[&EncodedPrefix],
        actions: Option<&[usize]>,
        targets: &[f64],
    ) -> Result<f64> {
        let (x, side) = self.stack(batch)?;
        let cache = self.forward_cached(x, side);
        let loss = loss_and_dpred(&cache.preds, actions, targets).map(|(l, _)| l);
        self.recycle_cache(cache);
        loss
    }

    /// Compare analytic gradients with central finite differences over every
    /// element of every parameter tensor; returns the worst relative error.
    pub fn gradient_check(
        &mut self,
        batch: &[&EncodedPrefix],
        actions: Option<&[usize]>,
        targets: &[f64],
        step: f64,
    ) -> Result<f64> {
        let (x, side) = self.stack(batch)?;
        let cache = self.forward_cached(x.clone(), side.clone());
        let (_, dpred) = loss_and_dpred(&cache.preds, actions, targets)?;
        self.zero_grads();
        self.backward(&cache, &dpred);
        let analytic = self.grads.clone();

        let mut worst = 0.0f64;
        for k in 0..PARAM_NAMES.len() {
            let (rows, cols) = self.values[k].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = self.values[k][[r, c]];
                    self.values[k][[r, c]] = orig + step;
                    let up = {
                        let cache = self.forward_cached(x.clone(), side.clone());
                        loss_and_dpred(&cache.preds, actions, targets)?.0
                    };
                    self.values[k][[r, c]] = orig - step;
                    let down = {
                        let cache = self.forward_cached(x.clone(), side.clone());
                        loss_and_dpred(&cache.preds, actions, targets)?.0
                    };
                    self.values[k][[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let exact = analytic[k][[r, c]];
                    // Central differences carry ~eps·loss/step ≈ 1e-11 of
                    // rounding noise; the floor keeps that noise from being
                    // read as relative error on near-zero gradients while
                    // still flagging any genuine mismatch of that size.
                    let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        Ok(worst)
    }

    /// Snapshot parameters (for best-model tracking).
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.values.clone()
    }

    /// Restore parameters from [`SequenceRegressor::snapshot`].
    pub fn restore(&mut self, snapshot: &[Array2<f64>]) {
        assert_eq!(snapshot.len(), self.values.len());
        for (dst, src) in self.values.iter_mut().zip(snapshot) {
            dst.assign(src);
        }
    }

    pub fn state(&self) -> RegressorState {
        let blobs = |arrs: &[Array2<f64>]| {
            arrs.iter()
                .enumerate()
                .map(|(k, a)| TensorBlob::from_array(PARAM_NAMES[k], a))
                .collect()
        };
        RegressorState {
            input_dim: self.input_dim,
            hidden: self.hidden,
            side_dim: self.side_dim,
            out_dim: self.out_dim,
            seq_len: self.seq_len,
            learning_rate: self.learning_rate,
            step_count: self.step_count,
            tensors: blobs(&self.values),
            adam_m: blobs(&self.adam_m),
            adam_v: blobs(&self.adam_v),
        }
    }

    pub fn from_state(state: &RegressorState) -> Result<SequenceRegressor> {
        let shapes = param_shapes(state.input_dim, state.hidden, state.side_dim, state.out_dim);
        let restore = |blobs: &[TensorBlob]| -> Result<Vec<Array2<f64>>> {
            if blobs.len() != shapes.len() {
                return Err(Error::Config(format!(
                    "checkpoint holds {} tensors, expected {}",
                    blobs.len(),
                    shapes.len()
                )));
            }
            blobs
                .iter()
                .zip(shapes.iter())
                .map(|(blob, &(r, c))| {
                    let a = blob.to_array()?;
                    if a.dim() != (r, c) {
                        return Err(Error::Config(format!(
                            "tensor {} is {:?}, expected {:?}",
                            blob.name,
                            a.dim(),
                            (r, c)
                        )));
                    }
                    Ok(a)
                })
                .collect()
        };
        Ok(SequenceRegressor {
            input_dim: state.input_dim,
            hidden: state.hidden,
            side_dim: state.side_dim,
            out_dim: state.out_dim,
            seq_len: state.seq_len,
            learning_rate: state.learning_rate,
            values: restore(&state.tensors)?,
            grads: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            adam_m: restore(&state.adam_m)?,
            adam_v: restore(&state.adam_v)?,
            step_count: state.step_count,
            scratch: RefCell::new(BufferPool::default()),
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Training loss and its gradient w.r.t. predictions. Without `actions` the
/// model must have one output and the loss is mean absolute error (outcome
/// regression). With `actions`, only the taken column of each sample enters
/// the loss, and the loss is mean squared error: Q-targets are bootstrapped
/// samples of a next-state distribution, and only a mean-seeking loss makes
/// the fitted value converge to the expectation those samples are drawn
/// from — an absolute loss would converge to their median, which orders
/// actions wrongly wherever the future-outcome distribution is skewed.
fn loss_and_dpred(
    preds: &Array2<f64>,
    actions: Option<&[usize]>,
    targets: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = preds.nrows();
    if targets.len() != n {
        return Err(Error::Config(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let mut dpred = Array2::zeros(preds.dim());
    let mut loss = 0.0;
    match actions {
        None => {
            if preds.ncols() != 1 {
                return Err(Error::Config("label loss requires a scalar head".into()));
            }
            for i in 0..n {
                let diff = preds[[i, 0]] - targets[i];
                loss += diff.abs();
                dpred[[i, 0]] = sign(diff) / n as f64;
            }
        }
        Some(actions) => {
            if actions.len() != n {
                return Err(Error::Config(format!(
                    "{} actions for a batch of {n}",
                    actions.len()
                )));
            }
            for i in 0..n {
                let a = actions[i];
                let diff = preds[[i, a]] - targets[i];
                loss += diff * diff;
                dpred[[i, a]] = 2.0 * diff / n as f64;
            }
        }
    }
    Ok((loss / n as f64, dpred))
}
