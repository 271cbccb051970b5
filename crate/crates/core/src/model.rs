//! Vertically split model: per-party embedding networks feeding a server head.
//!
//! Parameters are stored as flat row-major vectors so that local optimizers
//! can treat every coordinate partition as a plain `&[f64]`. Participant
//! index 0 is the server head; party `k` (0-based in `GlobalModel::parties`)
//! is participant `k + 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::VerticalDataset;
use crate::error::{ensure_finite, Error, Result};
use crate::rng::SplitMix64;

/// Embedding architecture of a party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// `h = W x`, no bias.
    Linear,
    /// `h = W2 tanh(W1 x + b1) + b2`.
    Mlp { hidden: usize },
}

/// Architecture and widths of one party's embedding function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyShape {
    pub arch: Arch,
    pub feature_width: usize,
    pub embed_width: usize,
}

impl PartyShape {
    pub fn param_count(&self) -> usize {
        let (d, o) = (self.feature_width, self.embed_width);
        match self.arch {
            Arch::Linear => o * d,
            Arch::Mlp { hidden } => hidden * d + hidden + o * hidden + o,
        }
    }

    fn check(&self, params: &[f64], x: &DMatrix<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "party parameters",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        if x.ncols() != self.feature_width {
            return Err(Error::Dimension {
                context: "party feature columns",
                expected: self.feature_width,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass; also returns the tanh activations for the MLP.
    fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let (d, o) = (self.feature_width, self.embed_width);
        match self.arch {
            Arch::Linear => {
                let w = DMatrix::from_row_slice(o, d, params);
                (x * w.transpose(), None)
            }
            Arch::Mlp { hidden } => {
                let (w1, rest) = params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(o * hidden);
                let w1 = DMatrix::from_row_slice(hidden, d, w1);
                let w2 = DMatrix::from_row_slice(o, hidden, w2);
                let mut z = x * w1.transpose();
                for mut row in z.row_iter_mut() {
                    for (v, b) in row.iter_mut().zip(b1) {
                        *v = (*v + b).tanh();
                    }
                }
                let mut out = &z * w2.transpose();
                add_row_bias(&mut out, b2);
                (out, Some(z))
            }
        }
    }

    pub fn embed(&self, params: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(params, x)?;
        Ok(self.forward(params, x).0)
    }

    /// Pulls `d_out` (gradient w.r.t. the embedding rows) back to the parameters.
    fn backward(&self, params: &[f64], x: &DMatrix<f64>, d_out: &DMatrix<f64>) -> Vec<f64> {
        let (d, o) = (self.feature_width, self.embed_width);
        match self.arch {
            Arch::Linear => row_major(&(d_out.transpose() * x)),
            Arch::Mlp { hidden } => {
                let (_, z) = self.forward(params, x);
                let z = z.expect("mlp forward caches activations");
                let w2 = DMatrix::from_row_slice(o, hidden, &params[hidden * d + hidden..][..o * hidden]);
                let d_w2 = d_out.transpose() * &z;
                let d_b2 = column_sums(d_out);
                let mut d_a = d_out * w2;
                d_a.zip_apply(&z, |g, zv| *g *= 1.0 - zv * zv);
                let d_w1 = d_a.transpose() * x;
                let d_b1 = column_sums(&d_a);
                let mut grad = Vec::with_capacity(self.param_count());
                grad.extend(row_major(&d_w1));
                grad.extend(d_b1);
                grad.extend(row_major(&d_w2));
                grad.extend(d_b2);
                grad
            }
        }
    }

    /// Uniform `[-s, s]` init with `s = fan_in^{-1/2}`, one SplitMix64 stream
    /// per `(seed, participant, layer)`.
    fn init_params(&self, seed: u64, participant: usize) -> Vec<f64> {
        let (d, o) = (self.feature_width, self.embed_width);
        match self.arch {
            Arch::Linear => uniform_layer(seed, participant, 0, d, o * d),
            Arch::Mlp { hidden } => {
                let mut p = uniform_layer(seed, participant, 0, d, hidden * d + hidden);
                p.extend(uniform_layer(seed, participant, 1, hidden, o * hidden + o));
                p
            }
        }
    }
}

fn uniform_layer(seed: u64, participant: usize, layer: usize, fan_in: usize, count: usize) -> Vec<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = SplitMix64::keyed(seed, &[participant as u64, layer as u64]);
    (0..count).map(|_| rng.symmetric(scale)).collect()
}

/// A party's embedding model `h_k(θ_k; ·)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyModel {
    pub shape: PartyShape,
    pub params: Vec<f64>,
}

impl PartyModel {
    pub fn new(shape: PartyShape, params: Vec<f64>) -> Result<Self> {
        if shape.embed_width == 0 || shape.feature_width == 0 {
            return Err(Error::config("party feature and embedding widths must be at least 1"));
        }
        if let Arch::Mlp { hidden: 0 } = shape.arch {
            return Err(Error::config("mlp hidden width must be at least 1"));
        }
        if params.len() != shape.param_count() {
            return Err(Error::Dimension {
                context: "party parameters",
                expected: shape.param_count(),
                actual: params.len(),
            });
        }
        ensure_finite(&params, || "party parameters".into())?;
        Ok(Self { shape, params })
    }

    pub fn embed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.shape.embed(&self.params, x)
    }
}

/// Row `i` of the result is `h_k(θ_k; x_k^i)`.
pub fn embed(party: &PartyModel, x_batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    party.embed(x_batch)
}

/// Server head and loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Squared error on `b + Σ_k Σ_o h_{k,o}`; the only server parameter is `b`.
    /// With linear parties the objective is an exact quadratic in Θ.
    Sum,
    /// Squared error on `wᵀ[h_1; …; h_K] + b`.
    Linear,
    /// Cross-entropy on `softmax(W [h_1; …; h_K] + b)`; labels are class indices.
    Softmax { classes: usize },
}

struct HeadGrad {
    loss: f64,
    d_server: Vec<f64>,
    d_embed: DMatrix<f64>,
}

impl Head {
    pub fn param_count(&self, embed_total: usize) -> usize {
        match *self {
            Head::Sum => 1,
            Head::Linear => embed_total + 1,
            Head::Softmax { classes } => classes * embed_total + classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Head::Softmax { .. })
    }

    fn check(&self, params: &[f64], h: &DMatrix<f64>, labels: &[f64]) -> Result<()> {
        let expected = self.param_count(h.ncols());
        if params.len() != expected {
            return Err(Error::Dimension {
                context: "server parameters",
                expected,
                actual: params.len(),
            });
        }
        if labels.len() != h.nrows() {
            return Err(Error::Dimension {
                context: "batch labels",
                expected: h.nrows(),
                actual: labels.len(),
            });
        }
        if let Head::Softmax { classes } = *self {
            if let Some(bad) = labels
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y >= classes as f64)
            {
                return Err(Error::config(format!(
                    "label {bad} is not a class index below {classes}"
                )));
            }
        }
        Ok(())
    }

    /// Per-sample outputs: predictions (B×1) for regression heads, logits (B×C) otherwise.
    fn outputs(&self, params: &[f64], h: &DMatrix<f64>) -> DMatrix<f64> {
        let e = h.ncols();
        match *self {
            Head::Sum => DMatrix::from_fn(h.nrows(), 1, |i, _| params[0] + h.row(i).sum()),
            Head::Linear => DMatrix::from_fn(h.nrows(), 1, |i, _| {
                params[e] + h.row(i).iter().zip(&params[..e]).map(|(a, b)| a * b).sum::<f64>()
            }),
            Head::Softmax { classes } => {
                let w = DMatrix::from_row_slice(classes, e, &params[..classes * e]);
                let mut logits = h * w.transpose();
                add_row_bias(&mut logits, &params[classes * e..]);
                logits
            }
        }
    }

    fn backward(&self, params: &[f64], h: &DMatrix<f64>, labels: &[f64]) -> Result<HeadGrad> {
        self.check(params, h, labels)?;
        let b = h.nrows();
        let inv_b = 1.0 / b as f64;
        let out = self.outputs(params, h);
        let e = h.ncols();
        let grad = match *self {
            Head::Sum | Head::Linear => {
                let resid: Vec<f64> = (0..b).map(|i| out[(i, 0)] - labels[i]).collect();
                let loss = resid.iter().map(|r| 0.5 * r * r).sum::<f64>() * inv_b;
                let r_mean = resid.iter().sum::<f64>() * inv_b;
                if *self == Head::Sum {
                    HeadGrad {
                        loss,
                        d_server: vec![r_mean],
                        d_embed: DMatrix::from_fn(b, e, |i, _| resid[i] * inv_b),
                    }
                } else {
                    let mut d_server: Vec<f64> = (0..e)
                        .map(|j| (0..b).map(|i| resid[i] * h[(i, j)]).sum::<f64>() * inv_b)
                        .collect();
                    d_server.push(r_mean);
                    HeadGrad {
                        loss,
                        d_server,
                        d_embed: DMatrix::from_fn(b, e, |i, j| resid[i] * params[j] * inv_b),
                    }
                }
            }
            Head::Softmax { classes } => {
                let mut d_logits = DMatrix::zeros(b, classes);
                let mut loss = 0.0;
                for i in 0..b {
                    let row = out.row(i);
                    let max = row.max();
                    let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
                    let y = labels[i] as usize;
                    loss += max + denom.ln() - row[y];
                    for c in 0..classes {
                        let p = (row[c] - max).exp() / denom;
                        d_logits[(i, c)] = (p - if c == y { 1.0 } else { 0.0 }) * inv_b;
                    }
                }
                let w = DMatrix::from_row_slice(classes, e, &params[..classes * e]);
                let mut d_server = row_major(&(d_logits.transpose() * h));
                d_server.extend(column_sums(&d_logits));
                HeadGrad {
                    loss: loss * inv_b,
                    d_server,
                    d_embed: &d_logits * w,
                }
            }
        };
        if !grad.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} over batch of {b}",
                grad.loss
            )));
        }
        Ok(grad)
    }
}

/// Mean-reduced loss `(1/B) Σ_i l_i(θ₀; h_1; …; h_K; y^i)`.
pub fn server_forward(head: &Head, server_params: &[f64], embeddings: &[DMatrix<f64>], labels: &[f64]) -> Result<f64> {
    let h = concat_embeddings(embeddings, None)?;
    head.backward(server_params, &h, labels).map(|g| g.loss)
}

/// Mini-batch indices shared by every participant in a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    ids: Vec<usize>,
}

impl Batch {
    /// Sorts `ids`; fails on duplicates or out-of-range indices.
    pub fn new(mut ids: Vec<usize>, n_samples: usize) -> Result<Self> {
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("batch contains duplicate sample ids".into()));
        }
        if let Some(&last) = ids.last() {
            if last >= n_samples {
                return Err(Error::Contract(format!(
                    "sample id {last} out of range for {n_samples} samples"
                )));
            }
        }
        Ok(Self { ids })
    }

    pub fn full(n_samples: usize) -> Self {
        Self {
            ids: (0..n_samples).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Round-start exchange Φʳ: server parameters plus every party's batch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub head: Head,
    pub server_params: Vec<f64>,
    pub embeddings: Vec<DMatrix<f64>>,
    pub batch: Batch,
    pub labels: Vec<f64>,
}

impl Snapshot {
    pub fn capture(model: &GlobalModel, data: &VerticalDataset, batch: Batch) -> Result<Self> {
        let embeddings = model
            .parties
            .iter()
            .enumerate()
            .map(|(k, p)| p.embed(&data.batch_features(k, &batch)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head: model.head,
            server_params: model.server_params.clone(),
            embeddings,
            labels: data.batch_labels(&batch),
            batch,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch.len()
    }

    /// FNV-1a over the bit patterns of everything a local round may read.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.server_params.iter().for_each(|v| feed(v.to_bits()));
        for m in &self.embeddings {
            m.iter().for_each(|v| feed(v.to_bits()));
        }
        self.batch.ids().iter().for_each(|&i| feed(i as u64));
        self.labels.iter().for_each(|v| feed(v.to_bits()));
        h
    }
}

/// Stochastic partial derivative `g_k(Φ₋ₖ; h_k(θ_k); y^B)` for party `k` (0-based),
/// using the snapshot's embeddings for every other party and a fresh embedding
/// of party `k` at its current parameters.
pub fn party_partial_grad(
    snapshot: &Snapshot,
    k: usize,
    party: &PartyModel,
    x_batch: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    party_grad_at(snapshot, k, &party.shape, &party.params, x_batch)
}

pub(crate) fn party_grad_at(
    snapshot: &Snapshot,
    k: usize,
    shape: &PartyShape,
    params: &[f64],
    x_batch: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if k >= snapshot.embeddings.len() {
        return Err(Error::Contract(format!(
            "party {k} out of range for {} parties",
            snapshot.embeddings.len()
        )));
    }
    shape.check(params, x_batch)?;
    let own = shape.forward(params, x_batch).0;
    let h = concat_embeddings(&snapshot.embeddings, Some((k, &own)))?;
    let head_grad = snapshot.head.backward(&snapshot.server_params, &h, &snapshot.labels)?;
    let offset: usize = snapshot.embeddings[..k].iter().map(|m| m.ncols()).sum();
    let d_own = head_grad.d_embed.columns(offset, shape.embed_width).into_owned();
    let grad = shape.backward(params, x_batch, &d_own);
    ensure_finite(&grad, || format!("gradient of party {k}"))?;
    Ok(grad)
}

/// Server partial derivative `g_0` against the snapshot embeddings.
pub fn server_partial_grad(snapshot: &Snapshot, server_params: &[f64]) -> Result<Vec<f64>> {
    let h = concat_embeddings(&snapshot.embeddings, None)?;
    let grad = snapshot.head.backward(server_params, &h, &snapshot.labels)?.d_server;
    ensure_finite(&grad, || "server gradient".into())?;
    Ok(grad)
}

/// Gradient of participant `participant` (0 = server) at `params`, all other
/// blocks frozen at the snapshot.
pub fn participant_grad(
    snapshot: &Snapshot,
    model: &GlobalModel,
    batch_features: &[DMatrix<f64>],
    participant: usize,
    params: &[f64],
) -> Result<Vec<f64>> {
    if participant == 0 {
        server_partial_grad(snapshot, params)
    } else {
        let k = participant - 1;
        party_grad_at(snapshot, k, &model.parties[k].shape, params, &batch_features[k])
    }
}

fn concat_embeddings(embeddings: &[DMatrix<f64>], replace: Option<(usize, &DMatrix<f64>)>) -> Result<DMatrix<f64>> {
    let pick = |k: usize| match replace {
        Some((r, m)) if r == k => m,
        _ => &embeddings[k],
    };
    let rows = pick(0).nrows();
    let total: usize = (0..embeddings.len()).map(|k| pick(k).ncols()).sum();
    let mut out = DMatrix::zeros(rows, total);
    let mut col = 0;
    for k in 0..embeddings.len() {
        let m = pick(k);
        if m.nrows() != rows {
            return Err(Error::Dimension {
                context: "embedding batch rows",
                expected: rows,
                actual: m.nrows(),
            });
        }
        out.columns_mut(col, m.ncols()).copy_from(m);
        col += m.ncols();
    }
    Ok(out)
}

/// Architecture description used to build a [`GlobalModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub embed_width: usize,
    pub head: Head,
}

/// Θ = [θ₀, θ₁, …, θ_K].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub server_params: Vec<f64>,
    pub parties: Vec<PartyModel>,
    pub head: Head,
}

impl GlobalModel {
    pub fn new(server_params: Vec<f64>, parties: Vec<PartyModel>, head: Head) -> Result<Self> {
        if parties.is_empty() {
            return Err(Error::config("a model needs at least one party"));
        }
        let model = Self {
            server_params,
            parties,
            head,
        };
        let expected = head.param_count(model.total_embed_width());
        if model.server_params.len() != expected {
            return Err(Error::Dimension {
                context: "server parameters",
                expected,
                actual: model.server_params.len(),
            });
        }
        if let Head::Softmax { classes: 0 } = head {
            return Err(Error::config("softmax head needs at least one class"));
        }
        ensure_finite(&model.server_params, || "server parameters".into())?;
        Ok(model)
    }

    /// Seeded initialization for parties with the given feature widths.
    pub fn init(spec: &ModelSpec, feature_widths: &[usize], seed: u64) -> Result<Self> {
        let parties = feature_widths
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let shape = PartyShape {
                    arch: spec.arch,
                    feature_width: d,
                    embed_width: spec.embed_width,
                };
                let params = shape.init_params(seed, k + 1);
                PartyModel::new(shape, params)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = spec.embed_width * feature_widths.len();
        let server_params = uniform_layer(seed, 0, 0, e, spec.head.param_count(e));
        Self::new(server_params, parties, spec.head)
    }

    pub fn num_parties(&self) -> usize {
        self.parties.len()
    }

    pub fn embed_widths(&self) -> Vec<usize> {
        self.parties.iter().map(|p| p.shape.embed_width).collect()
    }

    pub fn total_embed_width(&self) -> usize {
        self.parties.iter().map(|p| p.shape.embed_width).sum()
    }

    /// `[V_0, V_1, …, V_K]`.
    pub fn block_sizes(&self) -> Vec<usize> {
        std::iter::once(self.server_params.len())
            .chain(self.parties.iter().map(|p| p.params.len()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    pub fn block(&self, participant: usize) -> &[f64] {
        if participant == 0 {
            &self.server_params
        } else {
            &self.parties[participant - 1].params
        }
    }

    pub fn block_mut(&mut self, participant: usize) -> &mut Vec<f64> {
        if participant == 0 {
            &mut self.server_params
        } else {
            &mut self.parties[participant - 1].params
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        (0..=self.num_parties()).flat_map(|p| self.block(p).to_vec()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "flattened model",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for p in 0..=self.num_parties() {
            let block = self.block_mut(p);
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_data(&self, data: &VerticalDataset) -> Result<()> {
        if data.num_parties() != self.num_parties() {
            return Err(Error::Dimension {
                context: "dataset parties",
                expected: self.num_parties(),
                actual: data.num_parties(),
            });
        }
        Ok(())
    }

    /// Per-sample head outputs over the whole dataset.
    pub fn outputs(&self, data: &VerticalDataset) -> Result<DMatrix<f64>> {
        self.check_data(data)?;
        let batch = Batch::full(data.n_samples());
        let snap = Snapshot::capture(self, data, batch)?;
        let h = concat_embeddings(&snap.embeddings, None)?;
        Ok(self.head.outputs(&self.server_params, &h))
    }

    /// Full-batch objective F(Θ).
    pub fn loss(&self, data: &VerticalDataset) -> Result<f64> {
        self.check_data(data)?;
        let snap = Snapshot::capture(self, data, Batch::full(data.n_samples()))?;
        server_forward(&self.head, &snap.server_params, &snap.embeddings, &snap.labels)
    }
}

/// Exact full-batch ∇F(Θ), blocks ordered `[θ₀, …, θ_K]`.
pub fn full_gradient(model: &GlobalModel, data: &VerticalDataset) -> Result<Vec<f64>> {
    Ok(block_gradients(model, data)?.concat())
}

/// Full-batch partial derivatives `∇_k F(Θ)` for every participant.
pub fn block_gradients(model: &GlobalModel, data: &VerticalDataset) -> Result<Vec<Vec<f64>>> {
    model.check_data(data)?;
    let batch = Batch::full(data.n_samples());
    let snap = Snapshot::capture(model, data, batch.clone())?;
    let features = data.all_batch_features(&batch);
    (0..=model.num_parties())
        .map(|p| participant_grad(&snap, model, &features, p, model.block(p)))
        .collect()
}

/// Central-difference estimate of ∇F, one coordinate at a time.
pub fn finite_diff_gradient(model: &GlobalModel, data: &VerticalDataset, step: f64) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let base = model.flatten();
    let mut probe = model.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + step;
        probe.set_flat(&x)?;
        let up = probe.loss(data)?;
        x[i] = base[i] - step;
        probe.set_flat(&x)?;
        let down = probe.loss(data)?;
        x[i] = base[i];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

fn add_row_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    for mut row in m.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.sum()).collect()
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, PartitionSpec};
    use crate::rng::SplitMix64;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = SplitMix64::new(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.symmetric(1.0))
    }

    #[test]
    fn linear_identity_and_zero_embeddings() {
        let shape = PartyShape {
            arch: Arch::Linear,
            feature_width: 2,
            embed_width: 2,
        };
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let id = PartyModel::new(shape.clone(), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(embed(&id, &x).unwrap().as_slice(), &[1.0, 2.0]);
        let zero = PartyModel::new(shape, vec![0.0; 4]).unwrap();
        assert!(embed(&zero, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_rejects_wrong_feature_width() {
        let shape = PartyShape {
            arch: Arch::Linear,
            feature_width: 3,
            embed_width: 1,
        };
        let party = PartyModel::new(shape, vec![0.0; 3]).unwrap();
        let err = embed(&party, &DMatrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    /// Independent scalar-loop MLP forward pass.
    fn mlp_reference(params: &[f64], d: usize, hdim: usize, o: usize, x: &[f64]) -> Vec<f64> {
        let w1 = &params[..hdim * d];
        let b1 = &params[hdim * d..hdim * d + hdim];
        let w2 = &params[hdim * d + hdim..hdim * d + hdim + o * hdim];
        let b2 = &params[hdim * d + hdim + o * hdim..];
        let z: Vec<f64> = (0..hdim)
            .map(|j| ((0..d).map(|i| w1[j * d + i] * x[i]).sum::<f64>() + b1[j]).tanh())
            .collect();
        (0..o)
            .map(|c| (0..hdim).map(|j| w2[c * hdim + j] * z[j]).sum::<f64>() + b2[c])
            .collect()
    }

    #[test]
    fn mlp_forward_matches_reference() {
        let shape = PartyShape {
            arch: Arch::Mlp { hidden: 5 },
            feature_width: 3,
            embed_width: 2,
        };
        let params = shape.init_params(11, 1);
        let party = PartyModel::new(shape, params.clone()).unwrap();
        let x = random_matrix(4, 3, 5);
        let out = party.embed(&x).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let expect = mlp_reference(&params, 3, 5, 2, &row);
            for c in 0..2 {
                assert!((out[(i, c)] - expect[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_residual_sum_head_has_zero_loss_and_server_grad() {
        let h = vec![
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 0.5]),
        ];
        let labels = [1.5, 2.5];
        assert_eq!(server_forward(&Head::Sum, &[0.0], &h, &labels).unwrap(), 0.0);
        let snap = Snapshot {
            head: Head::Sum,
            server_params: vec![0.0],
            embeddings: h,
            batch: Batch::full(2),
            labels: labels.to_vec(),
        };
        assert_eq!(server_partial_grad(&snap, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let classes = 5;
        let head = Head::Softmax { classes };
        let h = vec![random_matrix(3, 2, 1)];
        let params = vec![0.0; head.param_count(2)];
        let loss = server_forward(&head, &params, &h, &[0.0, 4.0, 2.0]).unwrap();
        assert!((loss - (classes as f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn softmax_rejects_out_of_range_labels() {
        let head = Head::Softmax { classes: 2 };
        let h = vec![random_matrix(1, 1, 1)];
        let params = vec![0.0; head.param_count(1)];
        assert!(server_forward(&head, &params, &h, &[2.0]).is_err());
        assert!(server_forward(&head, &params, &h, &[0.5]).is_err());
    }

    fn toy_problem(head: Head, arch: Arch, seed: u64) -> (GlobalModel, VerticalDataset) {
        let x = random_matrix(7, 5, seed);
        let labels: Vec<f64> = match head {
            Head::Softmax { classes } => (0..7).map(|i| (i % classes) as f64).collect(),
            _ => (0..7).map(|i| (i as f64 * 0.37).sin()).collect(),
        };
        let data = partition(&x, labels, &PartitionSpec::contiguous(vec![2, 3])).unwrap();
        let spec = ModelSpec {
            arch,
            embed_width: 2,
            head,
        };
        (GlobalModel::init(&spec, &data.widths(), seed).unwrap(), data)
    }

    #[test]
    fn full_gradient_is_mean_of_per_sample_gradients() {
        for head in [Head::Sum, Head::Linear, Head::Softmax { classes: 3 }] {
            let (model, data) = toy_problem(head, Arch::Mlp { hidden: 3 }, 2);
            let full = full_gradient(&model, &data).unwrap();
            let n = data.n_samples();
            let mut mean = vec![0.0; full.len()];
            for i in 0..n {
                let single = data.select(&[i]);
                let g = full_gradient(&model, &single).unwrap();
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v / n as f64;
                }
            }
            for (a, b) in full.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-13, "{head:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_of_one_server_grad_equals_single_sample_gradient() {
        let (model, data) = toy_problem(Head::Linear, Arch::Linear, 4);
        let batch = Batch::new(vec![3], data.n_samples()).unwrap();
        let snap = Snapshot::capture(&model, &data, batch).unwrap();
        let g = server_partial_grad(&snap, &model.server_params).unwrap();
        let single = full_gradient(&model, &data.select(&[3])).unwrap();
        assert_eq!(g, single[..g.len()].to_vec());
    }

    #[test]
    fn shapes_sum_to_model_size() {
        let (model, data) = toy_problem(Head::Softmax { classes: 4 }, Arch::Mlp { hidden: 2 }, 9);
        let blocks = block_gradients(&model, &data).unwrap();
        let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        assert_eq!(sizes, model.block_sizes());
        assert_eq!(sizes.iter().sum::<usize>(), model.param_count());
    }

    #[test]
    fn flatten_round_trips() {
        let (mut model, _) = toy_problem(Head::Linear, Arch::Mlp { hidden: 2 }, 3);
        let flat = model.flatten();
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        model.set_flat(&doubled).unwrap();
        assert_eq!(model.flatten(), doubled);
        assert!(model.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn snapshot_checksum_tracks_content() {
        let (model, data) = toy_problem(Head::Sum, Arch::Linear, 1);
        let snap = Snapshot::capture(&model, &data, Batch::full(7)).unwrap();
        let mut other = snap.clone();
        assert_eq!(snap.checksum(), other.checksum());
        other.embeddings[1][(0, 0)] += 1e-12;
        assert_ne!(snap.checksum(), other.checksum());
    }

    #[test]
    fn batch_rejects_duplicates_and_range() {
        assert!(Batch::new(vec![1, 1], 3).is_err());
        assert!(Batch::new(vec![3], 3).is_err());
        assert_eq!(Batch::new(vec![2, 0], 3).unwrap().ids(), &[0, 2]);
    }
}
