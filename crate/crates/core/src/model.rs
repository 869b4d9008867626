//! Graph transformer for prefix graphs.
//!
//! Node vectors start as class embeddings plus projected positional and
//! structural encodings. Each layer runs GIN-style message passing with edge
//! features and multi-head self-attention in parallel, sums the two and
//! applies a feed-forward block. A mean (or sum) readout followed by a
//! two-layer head gives one normalized remaining time per graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutStream, Tape, Var};
use crate::encodings::{attach_encodings, EncodingConfig, GraphEncodings, RwseMode};
use crate::error::{Error, Result};
use crate::graphbuild::PrefixGraph;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub pe_dim: usize,
    pub se_dim: usize,
    pub rwse_mode: RwseMode,
    pub edge_encoder_layers: usize,
    pub mpnn_dropout: f64,
    pub attn_dropout: f64,
    pub readout: Readout,
    pub residual_and_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_layers: 5,
            num_heads: 8,
            pe_dim: 8,
            se_dim: 8,
            rwse_mode: RwseMode::Directed,
            edge_encoder_layers: 1,
            mpnn_dropout: 0.0,
            attn_dropout: 0.5,
            readout: Readout::Mean,
            residual_and_norm: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return bad("hidden_dim, num_layers and num_heads must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.pe_dim == 0 || self.se_dim == 0 {
            return bad("pe_dim and se_dim must be positive");
        }
        if !(1..=2).contains(&self.edge_encoder_layers) {
            return bad("edge_encoder_layers must be 1 or 2");
        }
        if !(0.0..1.0).contains(&self.mpnn_dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn encoding_config(&self) -> EncodingConfig {
        EncodingConfig {
            pe_dim: self.pe_dim,
            se_dim: self.se_dim,
            rwse_mode: self.rwse_mode,
        }
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Two dense layers with a rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub first: Dense<T>,
    pub second: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsLayer<T> {
    /// GIN self-weight offset, `1 x 1`.
    pub gin_eps: T,
    pub edge_proj: Dense<T>,
    pub gin_mlp: Mlp2<T>,
    pub query: Dense<T>,
    pub key: Dense<T>,
    pub value: Dense<T>,
    pub output: Dense<T>,
    pub norm_local: Norm<T>,
    pub norm_attn: Norm<T>,
    pub norm_out: Norm<T>,
    pub ffn: Mlp2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub node_embedding: T,
    pub edge_encoder: Vec<Dense<T>>,
    pub pe_mlp: Mlp2<T>,
    pub se_mlp: Mlp2<T>,
    pub layers: Vec<GpsLayer<T>>,
    pub head: Mlp2<T>,
}

type Visit<'a, T> = &'a mut dyn FnMut(&str, &T);
type VisitMut<'a, T> = &'a mut dyn FnMut(&str, &mut T);

impl<T> Dense<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Dense<U> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit(&self, p: &str, f: Visit<T>) {
        f(&format!("{p}.weight"), &self.weight);
        f(&format!("{p}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, p: &str, f: VisitMut<T>) {
        f(&format!("{p}.weight"), &mut self.weight);
        f(&format!("{p}.bias"), &mut self.bias);
    }
}

impl<T> Norm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn visit(&self, p: &str, f: Visit<T>) {
        f(&format!("{p}.gamma"), &self.gamma);
        f(&format!("{p}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, p: &str, f: VisitMut<T>) {
        f(&format!("{p}.gamma"), &mut self.gamma);
        f(&format!("{p}.beta"), &mut self.beta);
    }
}

impl<T> Mlp2<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp2<U> {
        Mlp2 {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }

    fn visit(&self, p: &str, f: Visit<T>) {
        self.first.visit(&format!("{p}.0"), f);
        self.second.visit(&format!("{p}.1"), f);
    }

    fn visit_mut(&mut self, p: &str, f: VisitMut<T>) {
        self.first.visit_mut(&format!("{p}.0"), f);
        self.second.visit_mut(&format!("{p}.1"), f);
    }
}

impl<T> GpsLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GpsLayer<U> {
        GpsLayer {
            gin_eps: f(&self.gin_eps),
            edge_proj: self.edge_proj.map(f),
            gin_mlp: self.gin_mlp.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            norm_local: self.norm_local.map(f),
            norm_attn: self.norm_attn.map(f),
            norm_out: self.norm_out.map(f),
            ffn: self.ffn.map(f),
        }
    }

    fn visit(&self, p: &str, f: Visit<T>) {
        f(&format!("{p}.gin_eps"), &self.gin_eps);
        self.edge_proj.visit(&format!("{p}.edge_proj"), f);
        self.gin_mlp.visit(&format!("{p}.gin_mlp"), f);
        self.query.visit(&format!("{p}.query"), f);
        self.key.visit(&format!("{p}.key"), f);
        self.value.visit(&format!("{p}.value"), f);
        self.output.visit(&format!("{p}.output"), f);
        self.norm_local.visit(&format!("{p}.norm_local"), f);
        self.norm_attn.visit(&format!("{p}.norm_attn"), f);
        self.norm_out.visit(&format!("{p}.norm_out"), f);
        self.ffn.visit(&format!("{p}.ffn"), f);
    }

    fn visit_mut(&mut self, p: &str, f: VisitMut<T>) {
        f(&format!("{p}.gin_eps"), &mut self.gin_eps);
        self.edge_proj.visit_mut(&format!("{p}.edge_proj"), f);
        self.gin_mlp.visit_mut(&format!("{p}.gin_mlp"), f);
        self.query.visit_mut(&format!("{p}.query"), f);
        self.key.visit_mut(&format!("{p}.key"), f);
        self.value.visit_mut(&format!("{p}.value"), f);
        self.output.visit_mut(&format!("{p}.output"), f);
        self.norm_local.visit_mut(&format!("{p}.norm_local"), f);
        self.norm_attn.visit_mut(&format!("{p}.norm_attn"), f);
        self.norm_out.visit_mut(&format!("{p}.norm_out"), f);
        self.ffn.visit_mut(&format!("{p}.ffn"), f);
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            node_embedding: f(&self.node_embedding),
            edge_encoder: self.edge_encoder.iter().map(|d| d.map(f)).collect(),
            pe_mlp: self.pe_mlp.map(f),
            se_mlp: self.se_mlp.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    /// Visits every array with a stable dotted name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        f("node_embedding", &self.node_embedding);
        for (i, d) in self.edge_encoder.iter().enumerate() {
            d.visit(&format!("edge_encoder.{i}"), f);
        }
        self.pe_mlp.visit("pe_mlp", f);
        self.se_mlp.visit("se_mlp", f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("node_embedding", &mut self.node_embedding);
        for (i, d) in self.edge_encoder.iter_mut().enumerate() {
            d.visit_mut(&format!("edge_encoder.{i}"), f);
        }
        self.pe_mlp.visit_mut("pe_mlp", f);
        self.se_mlp.visit_mut("se_mlp", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense<Matrix> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Dense {
        weight: Matrix::from_vec(fan_in, fan_out, w),
        bias: Matrix::zeros(1, fan_out),
    }
}

fn mlp2(rng: &mut ChaCha8Rng, i: usize, h: usize, o: usize) -> Mlp2<Matrix> {
    Mlp2 {
        first: glorot(rng, i, h),
        second: glorot(rng, h, o),
    }
}

fn norm(d: usize) -> Norm<Matrix> {
    Norm {
        gamma: Matrix::filled(1, d, 1.0),
        beta: Matrix::zeros(1, d),
    }
}

impl ModelParams<Matrix> {
    /// Seeded initialization. `vocab_size` counts the unknown-class row 0.
    pub fn init(config: &ModelConfig, vocab_size: usize, edge_feature_len: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || edge_feature_len == 0 {
            return Err(Error::Config("vocabulary and edge features must be non-empty".into()));
        }
        let d = config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let emb = (0..vocab_size * d).map(|_| normal.sample(&mut rng)).collect();
        let node_embedding = Matrix::from_vec(vocab_size, d, emb);
        let mut edge_encoder = vec![glorot(&mut rng, edge_feature_len, d)];
        if config.edge_encoder_layers == 2 {
            edge_encoder.push(glorot(&mut rng, d, d));
        }
        let pe_mlp = mlp2(&mut rng, config.pe_dim, d, d);
        let se_mlp = mlp2(&mut rng, config.se_dim, d, d);
        let layers = (0..config.num_layers)
            .map(|_| GpsLayer {
                gin_eps: Matrix::scalar(0.0),
                edge_proj: glorot(&mut rng, d, d),
                gin_mlp: mlp2(&mut rng, d, d, d),
                query: glorot(&mut rng, d, d),
                key: glorot(&mut rng, d, d),
                value: glorot(&mut rng, d, d),
                output: glorot(&mut rng, d, d),
                norm_local: norm(d),
                norm_attn: norm(d),
                norm_out: norm(d),
                ffn: mlp2(&mut rng, d, d, d),
            })
            .collect();
        let head = mlp2(&mut rng, d, d, 1);
        Ok(ModelParams {
            node_embedding,
            edge_encoder,
            pe_mlp,
            se_mlp,
            layers,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.node_embedding.rows()
    }

    pub fn edge_feature_len(&self) -> usize {
        self.edge_encoder[0].weight.rows()
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }

    /// Checks that every array has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(
            &ModelConfig { seed: 0, ..config.clone() },
            self.vocab_size(),
            self.edge_feature_len(),
        )?;
        let mut want = Vec::new();
        expected.visit(&mut |n, m| want.push((n.to_string(), m.shape())));
        let mut got = Vec::new();
        self.visit(&mut |n, m| got.push((n.to_string(), m.shape())));
        if want != got {
            return Err(Error::ShapeMismatch(
                "parameter arrays do not match the model configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Several graphs concatenated into one disjoint graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub class_ids: Vec<usize>,
    /// Graph index of every node.
    pub node_graph: Vec<usize>,
    /// `(first node, node count)` per graph.
    pub segments: Vec<(usize, usize)>,
    pub sources: Vec<usize>,
    pub targets_of_edges: Vec<usize>,
    pub edge_features: Matrix,
    pub lap_pe: Matrix,
    pub rwse: Matrix,
    pub targets: Vec<f64>,
}

impl GraphBatch {
    /// Missing or mis-sized encodings are computed on the fly.
    pub fn new(graphs: &[&PrefixGraph], config: &ModelConfig, edge_feature_len: usize) -> Result<Self> {
        let enc_config = config.encoding_config();
        let mut b = GraphBatch {
            class_ids: Vec::new(),
            node_graph: Vec::new(),
            segments: Vec::with_capacity(graphs.len()),
            sources: Vec::new(),
            targets_of_edges: Vec::new(),
            edge_features: Matrix::zeros(0, edge_feature_len),
            lap_pe: Matrix::zeros(0, config.pe_dim),
            rwse: Matrix::zeros(0, config.se_dim),
            targets: Vec::with_capacity(graphs.len()),
        };
        let mut ef = Vec::new();
        let mut pe = Vec::new();
        let mut se = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            if n == 0 {
                return Err(Error::ShapeMismatch(format!("graph `{}` has no nodes", g.case_id)));
            }
            let offset = b.class_ids.len();
            b.segments.push((offset, n));
            b.class_ids.extend_from_slice(&g.node_class_ids);
            b.node_graph.extend(std::iter::repeat_n(gi, n));
            for (&(s, t), f) in g.edges.iter().zip(&g.edge_features) {
                if s >= n || t >= n {
                    return Err(Error::ShapeMismatch(format!("edge out of range in `{}`", g.case_id)));
                }
                if f.len() != edge_feature_len {
                    return Err(Error::ShapeMismatch(format!(
                        "graph `{}` has {} edge features, model expects {edge_feature_len}",
                        g.case_id,
                        f.len()
                    )));
                }
                b.sources.push(offset + s);
                b.targets_of_edges.push(offset + t);
                ef.extend_from_slice(f);
            }
            let fresh;
            let enc: &GraphEncodings = match &g.encodings {
                Some(e) if e.pe_dim() == config.pe_dim && e.se_dim() == config.se_dim && e.lap_pe.len() == n => e,
                _ => {
                    fresh = attach_encodings(g, &enc_config);
                    &fresh
                }
            };
            for row in &enc.lap_pe {
                pe.extend_from_slice(row);
            }
            for row in &enc.rwse {
                se.extend_from_slice(row);
            }
            b.targets.push(g.target);
        }
        let n = b.class_ids.len();
        b.edge_features = Matrix::from_vec(b.sources.len(), edge_feature_len, ef);
        b.lap_pe = Matrix::from_vec(n, config.pe_dim, pe);
        b.rwse = Matrix::from_vec(n, config.se_dim, se);
        Ok(b)
    }

    pub fn num_graphs(&self) -> usize {
        self.segments.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Per-call randomness: `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut DropoutStream>;

fn dense(t: &mut Tape, d: &Dense<Var>, x: Var) -> Var {
    let y = t.matmul(x, d.weight);
    t.add_bias(y, d.bias)
}

fn apply_mlp2(t: &mut Tape, m: &Mlp2<Var>, x: Var) -> Var {
    let h = dense(t, &m.first, x);
    let h = t.relu(h);
    dense(t, &m.second, h)
}

fn record_embed(t: &mut Tape, p: &ModelParams<Var>, batch: &GraphBatch) -> (Var, Var) {
    let emb = t.gather(p.node_embedding, &batch.class_ids);
    let pe_in = t.leaf(batch.lap_pe.clone());
    let pe = apply_mlp2(t, &p.pe_mlp, pe_in);
    let se_in = t.leaf(batch.rwse.clone());
    let se = apply_mlp2(t, &p.se_mlp, se_in);
    let x = t.add(emb, pe);
    let x = t.add(x, se);
    let mut z = t.leaf(batch.edge_features.clone());
    for (i, d) in p.edge_encoder.iter().enumerate() {
        if i > 0 {
            z = t.relu(z);
        }
        z = dense(t, d, z);
    }
    (x, z)
}

fn record_layer(
    t: &mut Tape,
    l: &GpsLayer<Var>,
    config: &ModelConfig,
    batch: &GraphBatch,
    x: Var,
    z: Var,
    mut dropout: Dropout,
) -> Var {
    let n = batch.num_nodes();
    let edge_term = dense(t, &l.edge_proj, z);
    let from = t.gather(x, &batch.sources);
    let msg = t.add(from, edge_term);
    let msg = t.relu(msg);
    let agg = t.scatter_add(msg, &batch.targets_of_edges, n);
    let scaled = t.mul_scalar(x, l.gin_eps);
    let pre = t.add(x, scaled);
    let pre = t.add(pre, agg);
    let mut local = apply_mlp2(t, &l.gin_mlp, pre);
    local = t.dropout(local, config.mpnn_dropout, dropout.as_deref_mut());

    let q = dense(t, &l.query, x);
    let k = dense(t, &l.key, x);
    let v = dense(t, &l.value, x);
    let att = t.segment_attention(
        q,
        k,
        v,
        config.num_heads,
        &batch.segments,
        config.attn_dropout,
        dropout,
    );
    let mut global = dense(t, &l.output, att);

    if config.residual_and_norm {
        let r = t.add(local, x);
        local = t.layer_norm(r, l.norm_local.gamma, l.norm_local.beta);
        let r = t.add(global, x);
        global = t.layer_norm(r, l.norm_attn.gamma, l.norm_attn.beta);
    }
    let h = t.add(local, global);
    let f = apply_mlp2(t, &l.ffn, h);
    if config.residual_and_norm {
        let r = t.add(h, f);
        t.layer_norm(r, l.norm_out.gamma, l.norm_out.beta)
    } else {
        f
    }
}

struct Recorded {
    predictions: Var,
    pooled: Var,
}

fn record_forward(
    t: &mut Tape,
    p: &ModelParams<Var>,
    config: &ModelConfig,
    batch: &GraphBatch,
    mut dropout: Dropout,
) -> Recorded {
    let (mut x, z) = record_embed(t, p, batch);
    for l in &p.layers {
        x = record_layer(t, l, config, batch, x, z, dropout.as_deref_mut());
    }
    let mut pooled = t.scatter_add(x, &batch.node_graph, batch.num_graphs());
    if config.readout == Readout::Mean {
        let inv = batch.segments.iter().map(|&(_, len)| 1.0 / len as f64).collect();
        pooled = t.scale_rows(pooled, inv);
    }
    let predictions = apply_mlp2(t, &p.head, pooled);
    Recorded { predictions, pooled }
}

fn load(t: &mut Tape, params: &ModelParams<Matrix>) -> ModelParams<Var> {
    params.map(&mut |m| t.leaf(m.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One normalized remaining time per graph.
    pub predictions: Vec<f64>,
    /// Graph representations before the head, `graphs x hidden_dim`.
    pub pooled: Matrix,
}

pub fn forward(
    params: &ModelParams<Matrix>,
    config: &ModelConfig,
    batch: &GraphBatch,
    dropout: Dropout,
) -> Result<ForwardOutput> {
    check_batch(params, batch)?;
    let mut t = Tape::new();
    let p = load(&mut t, params);
    let r = record_forward(&mut t, &p, config, batch, dropout);
    let predictions = t.value(r.predictions).data().to_vec();
    if predictions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(ForwardOutput {
        predictions,
        pooled: t.value(r.pooled).clone(),
    })
}

/// Mean absolute error over the batch and its exact gradient.
pub fn loss_and_grad(
    params: &ModelParams<Matrix>,
    config: &ModelConfig,
    batch: &GraphBatch,
    dropout: Dropout,
) -> Result<(f64, ModelParams<Matrix>)> {
    check_batch(params, batch)?;
    let mut t = Tape::new();
    let p = load(&mut t, params);
    let r = record_forward(&mut t, &p, config, batch, dropout);
    let loss_var = t.l1_loss(r.predictions, &batch.targets);
    let loss = t.value(loss_var).get(0, 0);
    if !loss.is_finite() {
        return Err(Error::NonFiniteOutput);
    }
    let mut grads = t.backward(loss_var);
    let g = p.map(&mut |v| {
        grads.take(*v).unwrap_or_else(|| {
            let (r, c) = t.value(*v).shape();
            Matrix::zeros(r, c)
        })
    });
    let mut bad = None;
    g.visit(&mut |name, m| {
        if bad.is_none() && !m.is_finite() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFiniteGradient(name)),
        None => Ok((loss, g)),
    }
}

/// Initial node and edge representations.
pub fn embed(params: &ModelParams<Matrix>, config: &ModelConfig, batch: &GraphBatch) -> Result<(Matrix, Matrix)> {
    check_batch(params, batch)?;
    let _ = config;
    let mut t = Tape::new();
    let p = load(&mut t, params);
    let (x, z) = record_embed(&mut t, &p, batch);
    Ok((t.value(x).clone(), t.value(z).clone()))
}

/// One layer applied to node states `x` and edge states `z`; edge states
/// pass through unchanged.
pub fn gps_layer(
    params: &GpsLayer<Matrix>,
    config: &ModelConfig,
    batch: &GraphBatch,
    x: &Matrix,
    z: &Matrix,
    dropout: Dropout,
) -> Result<(Matrix, Matrix)> {
    let d = config.hidden_dim;
    if x.shape() != (batch.num_nodes(), d) || z.shape() != (batch.sources.len(), d) {
        return Err(Error::ShapeMismatch("layer inputs do not match the batch".into()));
    }
    let mut t = Tape::new();
    let l = params.map(&mut |m| t.leaf(m.clone()));
    let xv = t.leaf(x.clone());
    let zv = t.leaf(z.clone());
    let out = record_layer(&mut t, &l, config, batch, xv, zv, dropout);
    Ok((t.value(out).clone(), z.clone()))
}

fn check_batch(params: &ModelParams<Matrix>, batch: &GraphBatch) -> Result<()> {
    if batch.num_graphs() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if let Some(&c) = batch.class_ids.iter().find(|&&c| c >= params.vocab_size()) {
        return Err(Error::ShapeMismatch(format!(
            "class id {c} outside vocabulary of {}",
            params.vocab_size()
        )));
    }
    if batch.edge_features.cols() != params.edge_feature_len() {
        return Err(Error::ShapeMismatch("edge feature width".into()));
    }
    if batch.lap_pe.cols() != params.pe_mlp.first.weight.rows() || batch.rwse.cols() != params.se_mlp.first.weight.rows() {
        return Err(Error::ShapeMismatch("encoding width".into()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            pe_dim: 3,
            se_dim: 3,
            attn_dropout: 0.5,
            mpnn_dropout: 0.1,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, n: usize, vocab: usize, feat: usize) -> PrefixGraph {
        let mut edges = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if rng.random_bool(0.35) {
                    edges.push((s, t));
                }
            }
        }
        let edge_features = edges
            .iter()
            .map(|_| (0..feat).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        PrefixGraph {
            case_id: format!("g{}", rng.random::<u32>()),
            k: n + 1,
            node_class_ids: (0..n).map(|_| rng.random_range(1..vocab)).collect(),
            edges,
            edge_features,
            target: rng.random_range(0.0..1.0),
            encodings: None,
        }
    }

    fn lin(x: &[f64], d: &Dense<Matrix>) -> Vec<f64> {
        (0..d.weight.cols())
            .map(|j| d.bias.get(0, j) + x.iter().enumerate().map(|(i, a)| a * d.weight.get(i, j)).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|a| a.max(0.0)).collect()
    }

    fn mlp(x: &[f64], m: &Mlp2<Matrix>) -> Vec<f64> {
        lin(&relu(lin(x, &m.first)), &m.second)
    }

    fn vadd(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn ln(x: &[f64], nrm: &Norm<Matrix>) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(c, a)| (a - mean) / (var + 1e-5).sqrt() * nrm.gamma.get(0, c) + nrm.beta.get(0, c))
            .collect()
    }

    /// Node-by-node evaluation of one layer in evaluation mode.
    fn layer_oracle(l: &GpsLayer<Matrix>, cfg: &ModelConfig, g: &PrefixGraph, x: &[Vec<f64>], z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = x.len();
        let d = cfg.hidden_dim;
        let hd = d / cfg.num_heads;
        let eps = l.gin_eps.get(0, 0);
        let q: Vec<_> = x.iter().map(|r| lin(r, &l.query)).collect();
        let k: Vec<_> = x.iter().map(|r| lin(r, &l.key)).collect();
        let v: Vec<_> = x.iter().map(|r| lin(r, &l.value)).collect();
        (0..n)
            .map(|node| {
                let mut agg = vec![0.0; d];
                for (e, &(s, t)) in g.edges.iter().enumerate() {
                    if t == node {
                        let m = relu(vadd(&x[s], &lin(&z[e], &l.edge_proj)));
                        agg = vadd(&agg, &m);
                    }
                }
                let pre: Vec<f64> = (0..d).map(|c| (1.0 + eps) * x[node][c] + agg[c]).collect();
                let local = ln(&vadd(&mlp(&pre, &l.gin_mlp), &x[node]), &l.norm_local);
                let mut att = vec![0.0; d];
                for h in 0..cfg.num_heads {
                    let r = h * hd..(h + 1) * hd;
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            q[node][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    for j in 0..n {
                        let w = scores[j].exp() / z;
                        for c in r.clone() {
                            att[c] += w * v[j][c];
                        }
                    }
                }
                let global = ln(&vadd(&lin(&att, &l.output), &x[node]), &l.norm_attn);
                let h = vadd(&local, &global);
                ln(&vadd(&h, &mlp(&h, &l.ffn)), &l.norm_out)
            })
            .collect()
    }

    fn perturb(params: &mut ModelParams<Matrix>, rng: &mut ChaCha8Rng) {
        params.visit_mut(&mut |_, m| {
            m.data_mut().iter_mut().for_each(|a| *a += rng.random_range(-0.3..0.3));
        });
    }

    #[test]
    fn embed_matches_dense_oracle() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ModelParams::init(&cfg, 5, 4).unwrap();
        perturb(&mut params, &mut rng);
        let g = random_graph(&mut rng, 5, 5, 4);
        let b = GraphBatch::new(&[&g], &cfg, 4).unwrap();
        let (x, z) = embed(&params, &cfg, &b).unwrap();
        let enc = attach_encodings(&g, &cfg.encoding_config());
        for v in 0..5 {
            let want = vadd(
                &vadd(params.node_embedding.row(g.node_class_ids[v]), &mlp(&enc.lap_pe[v], &params.pe_mlp)),
                &mlp(&enc.rwse[v], &params.se_mlp),
            );
            for c in 0..8 {
                assert!((x.get(v, c) - want[c]).abs() < 1e-12);
            }
        }
        for (e, f) in g.edge_features.iter().enumerate() {
            let want = lin(f, &params.edge_encoder[0]);
            for c in 0..8 {
                assert!((z.get(e, c) - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_encodings_leave_embedding_row() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 3, 2).unwrap();
        let g = PrefixGraph {
            case_id: "a".into(),
            k: 2,
            node_class_ids: vec![2],
            edges: vec![],
            edge_features: vec![],
            target: 0.0,
            encodings: Some(GraphEncodings {
                lap_pe: vec![vec![0.0; 3]],
                lap_eigenvalues: vec![0.0; 3],
                rwse: vec![vec![0.0; 3]],
            }),
        };
        let b = GraphBatch::new(&[&g], &cfg, 2).unwrap();
        let (x, z) = embed(&params, &cfg, &b).unwrap();
        assert_eq!(x.row(0), params.node_embedding.row(2));
        assert_eq!(z.shape(), (0, 8));
    }

    #[test]
    fn layer_matches_per_node_oracle() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::init(&cfg, 6, 3).unwrap();
        perturb(&mut params, &mut rng);
        let g = random_graph(&mut rng, 6, 6, 3);
        let b = GraphBatch::new(&[&g], &cfg, 3).unwrap();
        let (x, z) = embed(&params, &cfg, &b).unwrap();
        let (out, z1) = gps_layer(&params.layers[0], &cfg, &b, &x, &z, None).unwrap();
        assert_eq!(z1, z);
        let want = layer_oracle(&params.layers[0], &cfg, &g, &x.to_rows(), &z.to_rows());
        for (v, row) in want.iter().enumerate() {
            for c in 0..8 {
                assert!((out.get(v, c) - row[c]).abs() < 1e-10, "node {v} col {c}");
            }
        }
    }

    #[test]
    fn zero_model_loss_is_mean_abs_target() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::init(&cfg, 4, 2).unwrap();
        params.visit_mut(&mut |_, m| m.data_mut().iter_mut().for_each(|a| *a = 0.0));
        let graphs: Vec<_> = (0..3).map(|_| random_graph(&mut rng, 3, 4, 2)).collect();
        let refs: Vec<_> = graphs.iter().collect();
        let b = GraphBatch::new(&refs, &cfg, 2).unwrap();
        let (loss, _) = loss_and_grad(&params, &cfg, &b, None).unwrap();
        let want = graphs.iter().map(|g| g.target.abs()).sum::<f64>() / 3.0;
        assert!((loss - want).abs() < 1e-15);
    }

    #[test]
    fn unused_vocab_row_has_zero_gradient() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&cfg, 5, 2).unwrap();
        let mut g = random_graph(&mut rng, 3, 4, 2);
        g.node_class_ids = vec![1, 2, 3];
        let b = GraphBatch::new(&[&g], &cfg, 2).unwrap();
        let mut stream = DropoutStream::new(1, 0);
        let (_, grads) = loss_and_grad(&params, &cfg, &b, Some(&mut stream)).unwrap();
        assert!(grads.node_embedding.row(4).iter().all(|&a| a == 0.0));
        assert!(grads.node_embedding.row(0).iter().all(|&a| a == 0.0));
        assert!(grads.node_embedding.row(1).iter().any(|&a| a != 0.0));
    }

    #[test]
    fn single_node_prediction_is_head_bias_when_final_layer_zero() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 3, 2).unwrap();
        params.head.second.weight = Matrix::zeros(8, 1);
        params.head.second.bias = Matrix::scalar(0.25);
        let g = PrefixGraph {
            case_id: "one".into(),
            k: 2,
            node_class_ids: vec![1],
            edges: vec![(0, 0)],
            edge_features: vec![vec![0.5, 1.0]],
            target: 0.0,
            encodings: None,
        };
        let b = GraphBatch::new(&[&g], &cfg, 2).unwrap();
        assert_eq!(forward(&params, &cfg, &b, None).unwrap().predictions, vec![0.25]);
    }

    #[test]
    fn eval_mode_is_bit_identical_and_identical_graphs_agree() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, 5, 3).unwrap();
        let g = random_graph(&mut rng, 4, 5, 3);
        let b = GraphBatch::new(&[&g, &g], &cfg, 3).unwrap();
        let a = forward(&params, &cfg, &b, None).unwrap();
        let c = forward(&params, &cfg, &b, None).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.predictions[0], a.predictions[1]);
    }

    #[test]
    fn layer_config_validation() {
        let cfg = ModelConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            edge_encoder_layers: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences_without_norm() {
        let cfg = ModelConfig {
            residual_and_norm: false,
            edge_encoder_layers: 2,
            readout: Readout::Sum,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ModelParams::init(&cfg, 4, 2).unwrap();
        perturb(&mut params, &mut rng);
        let graphs: Vec<_> = (0..3).map(|i| random_graph(&mut rng, 1 + i, 4, 2)).collect();
        let refs: Vec<_> = graphs.iter().collect();
        let b = GraphBatch::new(&refs, &cfg, 2).unwrap();
        let (_, grads) = loss_and_grad(&params, &cfg, &b, Some(&mut DropoutStream::new(3, 9))).unwrap();
        let loss = |p: &ModelParams<Matrix>| {
            loss_and_grad(p, &cfg, &b, Some(&mut DropoutStream::new(3, 9))).unwrap().0
        };
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n.to_string()));
        let mut idx = 0;
        let mut analytic = Vec::new();
        grads.visit(&mut |_, m| analytic.push(m.clone()));
        for (name, an) in names.iter().zip(&analytic) {
            let mut fd = Vec::new();
            for i in 0..an.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut k = 0;
                plus.visit_mut(&mut |_, m| {
                    if k == idx {
                        m.data_mut()[i] += 1e-5;
                    }
                    k += 1;
                });
                k = 0;
                minus.visit_mut(&mut |_, m| {
                    if k == idx {
                        m.data_mut()[i] -= 1e-5;
                    }
                    k += 1;
                });
                fd.push((loss(&plus) - loss(&minus)) / 2e-5);
            }
            let fd = Matrix::from_vec(an.rows(), an.cols(), fd);
            let err = fd.max_abs_diff(an) * (an.len() as f64).sqrt();
            assert!(err < 1e-4 * fd.norm().max(an.norm()) || err < 1e-8, "{name}: {err} {fd:?} {an:?}");
            idx += 1;
        }
    }
}
