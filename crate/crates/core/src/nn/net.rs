use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::digest_f64;
use super::{LayerKind, LayerSpec, Mat, ParamLayout, ParamVector, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::seeded;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// A layer stack with its trainable parameters and frozen weights.
///
/// Every mutation of the parameters bumps an internal generation counter; a
/// [`Tape`] recorded under an older generation is rejected by `backward`.
#[derive(Debug)]
pub struct Network {
    id: u64,
    generation: u64,
    specs: Vec<LayerSpec>,
    params: ParamVector,
    frozen: Vec<Option<Arc<[f64]>>>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            id: next_id(),
            generation: self.generation,
            specs: self.specs.clone(),
            params: self.params.clone(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug)]
pub struct Tape {
    net_id: u64,
    generation: u64,
    batch: usize,
    records: Vec<Record>,
}

#[derive(Debug)]
enum Record {
    Input(Mat),
    Output(Mat),
    L2 { output: Mat, norms: Array1<f64> },
    LayerNorm { xhat: Mat, inv_std: Array1<f64> },
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Builds a network from `specs`, sampling weights deterministically from `seed`.
///
/// Dense and fixed-dense weights are drawn from N(0, 1/in_dim) in layer order,
/// biases start at zero, layer-norm gains at one.
pub fn init_net(specs: &[LayerSpec], seed: u64) -> Result<Network> {
    if specs.is_empty() {
        return Err(Error::shape("network needs at least one layer"));
    }
    for s in specs {
        s.validate()?;
    }
    for pair in specs.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::shape(format!(
                "{:?} outputs {} values but {:?} expects {}",
                pair[0].kind, pair[0].out_dim, pair[1].kind, pair[1].in_dim
            )));
        }
    }

    let layout = Arc::new(ParamLayout::from_specs(specs));
    let mut params = ParamVector::zeros(layout);
    let mut frozen = vec![None; specs.len()];
    let mut rng = seeded(seed);

    for (i, spec) in specs.iter().enumerate() {
        let std = 1.0 / (spec.in_dim as f64).sqrt();
        match spec.kind {
            LayerKind::Dense => {
                let seg = params.layer_mut(i).expect("dense segment");
                let n_w = spec.in_dim * spec.out_dim;
                for w in &mut seg[..n_w] {
                    *w = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            LayerKind::FixedDense => {
                let w: Vec<f64> = (0..spec.in_dim * spec.out_dim)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                frozen[i] = Some(Arc::from(w));
            }
            LayerKind::LayerNorm => {
                let seg = params.layer_mut(i).expect("layer_norm segment");
                seg[..spec.out_dim].fill(1.0);
            }
            _ => {}
        }
    }

    Ok(Network { id: next_id(), generation: 0, specs: specs.to_vec(), params, frozen })
}

impl Network {
    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn trainable_count(&self) -> usize {
        self.params.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().flatten().map(|w| w.len()).sum()
    }

    /// Overwrites all trainable parameters.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.as_mut_slice().copy_from_slice(values);
        self.generation += 1;
        Ok(())
    }

    /// Mutable access to the flat parameters. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        self.generation += 1;
        &mut self.params
    }

    pub fn sgd_step(&mut self, grads: &ParamVector, lr: f64, weight_decay: f64) -> Result<()> {
        super::sgd_step(&mut self.params, grads, lr, weight_decay)?;
        self.generation += 1;
        Ok(())
    }

    /// Digest of the frozen fixed-dense weights (identical across networks
    /// built from the same specs and seed).
    pub fn frozen_digest(&self) -> [u8; 32] {
        let all: Vec<f64> = self.frozen.iter().flatten().flat_map(|w| w.iter().copied()).collect();
        digest_f64(&all)
    }

    pub fn param_digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    pub fn ends_with_l2_normalize(&self) -> bool {
        matches!(self.specs.last().map(|s| s.kind), Some(LayerKind::L2Normalize))
    }

    /// Weight matrix of a dense layer as `out × in`. Frozen weights are kept
    /// as `in × out` so the wide forward product runs over contiguous rows;
    /// the returned view is transposed accordingly.
    fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let spec = self.specs[layer];
        match spec.kind {
            LayerKind::Dense => {
                let data = &self.params.layer(layer).expect("dense segment")[..spec.in_dim * spec.out_dim];
                ArrayView2::from_shape((spec.out_dim, spec.in_dim), data).expect("weight shape")
            }
            LayerKind::FixedDense => {
                let data = &self.frozen[layer].as_ref().expect("frozen weights")[..];
                ArrayView2::from_shape((spec.in_dim, spec.out_dim), data).expect("weight shape").reversed_axes()
            }
            _ => unreachable!("layer {layer} has no weight matrix"),
        }
    }

    /// Runs the stack on a batch (one sample per row) and records a tape.
    pub fn forward(&self, x: &Mat) -> Result<(Mat, Tape)> {
        self.run(x, true).map(|(y, t)| (y, t.expect("tape requested")))
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: &Mat) -> Result<Mat> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (y, tape) = self.forward(&super::row(x))?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    fn run(&self, x: &Mat, record: bool) -> Result<(Mat, Option<Tape>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut records = Vec::with_capacity(if record { self.specs.len() } else { 0 });
        let mut cur = x.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            cur = match spec.kind {
                LayerKind::Dense | LayerKind::FixedDense => {
                    let mut y = cur.dot(&self.weights(i).t());
                    if spec.kind == LayerKind::Dense {
                        let seg = self.params.layer(i).expect("dense segment");
                        let bias = ndarray::ArrayView1::from(&seg[spec.in_dim * spec.out_dim..]);
                        y += &bias;
                    }
                    if record {
                        records.push(Record::Input(cur));
                    }
                    y
                }
                LayerKind::LeakyRelu { slope } => {
                    let y = cur.mapv(|v| if v > 0.0 { v } else { slope * v });
                    if record {
                        records.push(Record::Input(cur));
                    }
                    y
                }
                LayerKind::Tanh => {
                    let y = cur.mapv(f64::tanh);
                    if record {
                        records.push(Record::Output(y.clone()));
                    }
                    y
                }
                LayerKind::L2Normalize => {
                    let mut norms = Array1::zeros(cur.nrows());
                    for (r, mut row) in cur.axis_iter_mut(Axis(0)).enumerate() {
                        let n = stable_norm(row.as_slice().expect("contiguous row"));
                        if n == 0.0 || !n.is_finite() {
                            return Err(Error::DegenerateInput(format!(
                                "l2_normalize at layer {i} received a {} vector (row {r})",
                                if n == 0.0 { "zero" } else { "non-finite" }
                            )));
                        }
                        row.mapv_inplace(|v| v / n);
                        norms[r] = n;
                    }
                    if record {
                        records.push(Record::L2 { output: cur.clone(), norms });
                    }
                    cur
                }
                LayerKind::LayerNorm => {
                    let d = spec.out_dim;
                    let seg = self.params.layer(i).expect("layer_norm segment");
                    let (gain, bias) = seg.split_at(d);
                    let mut inv_std = Array1::zeros(cur.nrows());
                    for (r, mut row) in cur.axis_iter_mut(Axis(0)).enumerate() {
                        let mean = row.sum() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        row.mapv_inplace(|v| (v - mean) * is);
                        inv_std[r] = is;
                    }
                    let mut y = cur.clone();
                    Zip::from(y.rows_mut()).for_each(|mut row| {
                        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
                            *v = *v * g + b;
                        }
                    });
                    if record {
                        records.push(Record::LayerNorm { xhat: cur, inv_std });
                    }
                    y
                }
            };
        }
        let tape = record.then(|| Tape {
            net_id: self.id,
            generation: self.generation,
            batch: x.nrows(),
            records,
        });
        Ok((cur, tape))
    }

    fn check_tape(&self, tape: &Tape, grad_y: &Mat) -> Result<()> {
        if tape.net_id != self.id || tape.generation != self.generation || tape.records.len() != self.specs.len() {
            return Err(Error::contract("tape does not match the current network state"));
        }
        if grad_y.dim() != (tape.batch, self.output_dim()) {
            return Err(Error::shape(format!(
                "output gradient has shape {:?}, expected ({}, {})",
                grad_y.dim(),
                tape.batch,
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Gradients of `sum(grad_y * y)` w.r.t. the trainable parameters (summed
    /// over the batch) and w.r.t. the input.
    pub fn backward(&self, tape: &Tape, grad_y: &Mat) -> Result<(ParamVector, Mat)> {
        self.check_tape(tape, grad_y)?;
        let mut grads = ParamVector::zeros(self.params.layout().clone());
        let gx = self.backprop(tape, grad_y, Some(&mut grads));
        Ok((grads, gx))
    }

    /// Input gradient only; skips parameter-gradient accumulation.
    pub fn backward_input(&self, tape: &Tape, grad_y: &Mat) -> Result<Mat> {
        self.check_tape(tape, grad_y)?;
        Ok(self.backprop(tape, grad_y, None))
    }

    fn backprop(&self, tape: &Tape, grad_y: &Mat, mut grads: Option<&mut ParamVector>) -> Mat {
        let mut g = grad_y.clone();
        for (i, spec) in self.specs.iter().enumerate().rev() {
            g = match (&spec.kind, &tape.records[i]) {
                (LayerKind::Dense, Record::Input(x)) => {
                    if let Some(grads) = grads.as_deref_mut() {
                        let seg = grads.layer_mut(i).expect("dense segment");
                        let n_w = spec.in_dim * spec.out_dim;
                        let gw = g.t().dot(x);
                        let (w_part, b_part) = seg.split_at_mut(n_w);
                        for (dst, src) in w_part.iter_mut().zip(gw.iter()) {
                            *dst += src;
                        }
                        for (dst, src) in b_part.iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
                            *dst += src;
                        }
                    }
                    g.dot(&self.weights(i))
                }
                (LayerKind::FixedDense, Record::Input(_)) => g.dot(&self.weights(i)),
                (LayerKind::LeakyRelu { slope }, Record::Input(x)) => {
                    let mut out = g;
                    Zip::from(&mut out).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    out
                }
                (LayerKind::Tanh, Record::Output(y)) => {
                    let mut out = g;
                    Zip::from(&mut out).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                    out
                }
                (LayerKind::L2Normalize, Record::L2 { output, norms }) => {
                    // (I - y y^T) g / |x|
                    let mut out = g;
                    for ((mut grow, yrow), &n) in out.rows_mut().into_iter().zip(output.rows()).zip(norms) {
                        let proj = grow.dot(&yrow);
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv = (*gv - yv * proj) / n);
                    }
                    out
                }
                (LayerKind::LayerNorm, Record::LayerNorm { xhat, inv_std }) => {
                    let d = spec.out_dim;
                    let seg = self.params.layer(i).expect("layer_norm segment");
                    let gain = &seg[..d];
                    if let Some(grads) = grads.as_deref_mut() {
                        let gs = grads.layer_mut(i).expect("layer_norm segment");
                        let (g_gain, g_bias) = gs.split_at_mut(d);
                        for (grow, xrow) in g.rows().into_iter().zip(xhat.rows()) {
                            let (gr, xr) = (grow.to_slice().expect("contiguous"), xrow.to_slice().expect("contiguous"));
                            for (((gg, gb), &gv), &xv) in g_gain.iter_mut().zip(g_bias.iter_mut()).zip(gr).zip(xr) {
                                *gg += gv * xv;
                                *gb += gv;
                            }
                        }
                    }
                    let mut out = Mat::zeros(g.dim());
                    let df = d as f64;
                    for (((mut orow, grow), xrow), &is) in
                        out.rows_mut().into_iter().zip(g.rows()).zip(xhat.rows()).zip(inv_std)
                    {
                        let (gr, xr) = (grow.to_slice().expect("contiguous"), xrow.to_slice().expect("contiguous"));
                        let or = orow.as_slice_mut().expect("contiguous");
                        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                        for ((&gv, &a), &xv) in gr.iter().zip(gain).zip(xr) {
                            let dh = gv * a;
                            sum_d += dh;
                            sum_dx += dh * xv;
                        }
                        let c = is / df;
                        for (((o, &gv), &a), &xv) in or.iter_mut().zip(gr).zip(gain).zip(xr) {
                            *o = c * (df * gv * a - sum_d - xv * sum_dx);
                        }
                    }
                    out
                }
                _ => unreachable!("tape record does not match layer {i}"),
            };
        }
        g
    }
}

/// Euclidean norm computed with max-abs scaling so tiny and huge inputs
/// neither underflow nor overflow.
pub(crate) fn stable_norm(x: &[f64]) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    if s.is_finite() && s > 1e-250 && s < 1e250 {
        return s.sqrt();
    }
    let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * x.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}
