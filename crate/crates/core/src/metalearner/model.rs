use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basepool::glorot;
use crate::error::{Error, Result};
use crate::graphbuild::HeteroGraph;
use crate::numkernel::ops::leaky_relu_scalar;
use crate::numkernel::{Matrix, Tape, Var};

pub const META_FORMAT: &str = "feddes-metalearner";
pub const META_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Floor applied to edge weights before taking their log.
pub const EDGE_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Give every sample node a sample–sample self-loop. Without it a node
    /// still gets one when it has no incoming edges at all.
    pub self_loops: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            layers: 2,
            dropout: 0.2,
            self_loops: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("meta-learner needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Attention parameters for one edge type in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatEdgeParams {
    pub w_source: Matrix,
    pub w_target: Matrix,
    /// `heads x head_dim`.
    pub attention: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub sample_sample: GatEdgeParams,
    pub classifier_sample: GatEdgeParams,
}

/// Heterogeneous GATv2 mapping sample nodes to `M` competence logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub format: String,
    pub version: u32,
    pub config: MetaConfig,
    pub sample_in_w: Matrix,
    pub sample_in_b: Matrix,
    pub classifier_in_w: Matrix,
    pub classifier_in_b: Matrix,
    pub layers: Vec<GatLayerParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

/// Unnormalized GATv2 logit per head for one edge:
/// `a_h · LeakyReLU(W_t h_i + W_s h_j)[head h] + ln max(w, 1e-12)`.
pub fn gatv2_attention(
    target: &[f64],
    source: &[f64],
    weight: f64,
    w_target: &Matrix,
    w_source: &Matrix,
    attention: &Matrix,
) -> Vec<f64> {
    let (heads, hd) = attention.shape();
    let project = |w: &Matrix, h: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|c| h.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
            .collect()
    };
    let zt = project(w_target, target);
    let zs = project(w_source, source);
    let bias = weight.max(EDGE_WEIGHT_FLOOR).ln();
    (0..heads)
        .map(|h| {
            (0..hd)
                .map(|d| {
                    let k = h * hd + d;
                    attention.get(h, d) * leaky_relu_scalar(zt[k] + zs[k], LEAKY_SLOPE)
                })
                .sum::<f64>()
                + bias
        })
        .collect()
}

/// Edge arrays used by the forward pass, self-loops included.
#[derive(Clone, Debug)]
pub(crate) struct EdgeIndex {
    pub n_samples: usize,
    pub ss_src: Vec<usize>,
    pub ss_tgt: Vec<usize>,
    /// `E x heads`, every column equal to `ln max(w, floor)`.
    pub ss_bias: Matrix,
    pub cs_src: Vec<usize>,
    pub cs_tgt: Vec<usize>,
    pub cs_bias: Matrix,
}

fn log_bias(weights: &[f64], heads: usize) -> Matrix {
    let mut out = Matrix::zeros(weights.len(), heads);
    for (e, &w) in weights.iter().enumerate() {
        out.row_mut(e).fill(w.max(EDGE_WEIGHT_FLOOR).ln());
    }
    out
}

impl EdgeIndex {
    /// Self-loop weight is the mean of the node's incoming sample–sample
    /// weights, or 1 when it has none.
    pub(crate) fn new(graph: &HeteroGraph, heads: usize, self_loops: bool) -> Result<Self> {
        let n = graph.n_samples();
        let m = graph.n_classifiers();
        let ss = &graph.sample_sample;
        let cs = &graph.classifier_sample;
        if ss.sources.iter().chain(&ss.targets).chain(&cs.targets).any(|&i| i >= n)
            || cs.sources.iter().any(|&c| c >= m)
        {
            return Err(Error::Validation("graph edge points outside its node set".into()));
        }
        let mut ss_src = ss.sources.clone();
        let mut ss_tgt = ss.targets.clone();
        let mut ss_w = ss.weights.clone();
        let mut in_sum = vec![0.0; n];
        let mut in_ss = vec![0usize; n];
        let mut in_cs = vec![0usize; n];
        for (e, &t) in ss.targets.iter().enumerate() {
            in_sum[t] += ss.weights[e];
            in_ss[t] += 1;
        }
        for &t in &cs.targets {
            in_cs[t] += 1;
        }
        for i in 0..n {
            if self_loops || in_ss[i] + in_cs[i] == 0 {
                let w = if in_ss[i] > 0 { in_sum[i] / in_ss[i] as f64 } else { 1.0 };
                ss_src.push(i);
                ss_tgt.push(i);
                ss_w.push(w);
            }
        }
        Ok(Self {
            n_samples: n,
            ss_bias: log_bias(&ss_w, heads),
            ss_src,
            ss_tgt,
            cs_src: cs.sources.clone(),
            cs_tgt: cs.targets.clone(),
            cs_bias: log_bias(&cs.weights, heads),
        })
    }
}

pub(crate) struct EdgeVars {
    w_source: Var,
    w_target: Var,
    attention: Var,
    bias: Var,
}

/// Parameter handles on a tape, in [`MetaLearner::parameters`] order.
pub(crate) struct ParamVars {
    sample_in: (Var, Var),
    classifier_in: (Var, Var),
    layers: Vec<(EdgeVars, EdgeVars)>,
    head: (Var, Var),
}

impl ParamVars {
    pub(crate) fn from_slice(vars: &[Var], layers: usize) -> Self {
        let edge = |s: &[Var]| EdgeVars {
            w_source: s[0],
            w_target: s[1],
            attention: s[2],
            bias: s[3],
        };
        let layer_vars = (0..layers)
            .map(|l| {
                let base = 4 + 8 * l;
                (edge(&vars[base..base + 4]), edge(&vars[base + 4..base + 8]))
            })
            .collect();
        let tail = 4 + 8 * layers;
        Self {
            sample_in: (vars[0], vars[1]),
            classifier_in: (vars[2], vars[3]),
            layers: layer_vars,
            head: (vars[tail], vars[tail + 1]),
        }
    }
}

/// Optional inverted-dropout masks drawn from an RNG.
pub(crate) struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, Matrix::from_vec(rows, cols, data)?)
    }
}

pub(crate) struct ForwardOutput {
    /// Logits for the requested rows, `rows x M`.
    pub logits: Var,
    /// Per layer: sample–sample and classifier–sample attention (`E x heads`).
    pub attention: Vec<(Var, Var)>,
}

#[allow(clippy::too_many_arguments)]
fn gat_edge(
    tape: &mut Tape,
    h_source: Var,
    h_target: Var,
    p: &EdgeVars,
    src: &[usize],
    tgt: &[usize],
    bias: &Matrix,
    n_target: usize,
) -> Result<(Var, Var)> {
    let xs = tape.matmul(h_source, p.w_source)?;
    let xt = tape.matmul(h_target, p.w_target)?;
    let zs = tape.gather_rows(xs, src.to_vec())?;
    let zt = tape.gather_rows(xt, tgt.to_vec())?;
    let z = tape.add(zs, zt)?;
    let z = tape.leaky_relu(z, LEAKY_SLOPE);
    let e = tape.head_dot(z, p.attention)?;
    let e = tape.add_const(e, bias)?;
    let alpha = tape.segment_softmax(e, tgt.to_vec(), n_target)?;
    let msg = tape.head_scale(zs, alpha)?;
    let agg = tape.scatter_add_rows(msg, tgt.to_vec(), n_target)?;
    Ok((tape.add_row(agg, p.bias)?, alpha))
}

fn edge_params(config: &MetaConfig, rng: &mut impl Rng) -> GatEdgeParams {
    let h = config.hidden;
    GatEdgeParams {
        w_source: glorot(h, h, rng),
        w_target: glorot(h, h, rng),
        attention: glorot(config.heads, config.head_dim(), rng),
        bias: Matrix::zeros(1, h),
    }
}

impl MetaLearner {
    pub fn init(
        config: &MetaConfig,
        sample_width: usize,
        classifier_width: usize,
        pool_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let sample_in_w = glorot(sample_width, h, rng);
        let classifier_in_w = glorot(classifier_width, h, rng);
        let layers = (0..config.layers)
            .map(|_| GatLayerParams {
                sample_sample: edge_params(config, rng),
                classifier_sample: edge_params(config, rng),
            })
            .collect();
        Ok(Self {
            format: META_FORMAT.to_string(),
            version: META_VERSION,
            config: config.clone(),
            sample_in_w,
            sample_in_b: Matrix::zeros(1, h),
            classifier_in_w,
            classifier_in_b: Matrix::zeros(1, h),
            layers,
            head_w: glorot(h, pool_size, rng),
            head_b: Matrix::zeros(1, pool_size),
        })
    }

    pub fn pool_size(&self) -> usize {
        self.head_w.cols()
    }

    /// All trainable matrices in a fixed order.
    pub fn parameters(&self) -> Vec<Matrix> {
        let mut out = vec![
            self.sample_in_w.clone(),
            self.sample_in_b.clone(),
            self.classifier_in_w.clone(),
            self.classifier_in_b.clone(),
        ];
        for layer in &self.layers {
            for p in [&layer.sample_sample, &layer.classifier_sample] {
                out.extend([p.w_source.clone(), p.w_target.clone(), p.attention.clone(), p.bias.clone()]);
            }
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    /// Names matching [`Self::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["sample_in.w", "sample_in.b", "classifier_in.w", "classifier_in.b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            for t in ["ss", "cs"] {
                for p in ["w_source", "w_target", "attention", "bias"] {
                    out.push(format!("layer{l}.{t}.{p}"));
                }
            }
        }
        out.push("head.w".into());
        out.push("head.b".into());
        out
    }

    pub fn set_parameters(&mut self, params: &[Matrix]) {
        self.sample_in_w = params[0].clone();
        self.sample_in_b = params[1].clone();
        self.classifier_in_w = params[2].clone();
        self.classifier_in_b = params[3].clone();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let base = 4 + 8 * l;
            for (k, p) in [&mut layer.sample_sample, &mut layer.classifier_sample]
                .into_iter()
                .enumerate()
            {
                let s = base + 4 * k;
                p.w_source = params[s].clone();
                p.w_target = params[s + 1].clone();
                p.attention = params[s + 2].clone();
                p.bias = params[s + 3].clone();
            }
        }
        let tail = 4 + 8 * self.layers.len();
        self.head_w = params[tail].clone();
        self.head_b = params[tail + 1].clone();
    }

    fn check_graph(&self, graph: &HeteroGraph) -> Result<()> {
        if graph.sample_features.cols() != self.sample_in_w.rows()
            || graph.classifier_features.cols() != self.classifier_in_w.rows()
            || graph.n_classifiers() != self.pool_size()
        {
            return Err(Error::Dimension {
                op: "meta-learner input",
                left: (graph.sample_features.cols(), graph.classifier_features.cols()),
                right: (self.sample_in_w.rows(), self.classifier_in_w.rows()),
            });
        }
        Ok(())
    }

    /// Records the forward pass for `rows` (all sample nodes when `None`).
    pub(crate) fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        graph: &HeteroGraph,
        edges: &EdgeIndex,
        rows: Option<&[usize]>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<ForwardOutput> {
        let n = edges.n_samples;
        let xs = tape.constant(graph.sample_features.clone());
        let xc = tape.constant(graph.classifier_features.clone());
        let hs = tape.matmul(xs, vars.sample_in.0)?;
        let mut hs = tape.add_row(hs, vars.sample_in.1)?;
        let hc = tape.matmul(xc, vars.classifier_in.0)?;
        let hc = tape.add_row(hc, vars.classifier_in.1)?;
        let mut attention = Vec::with_capacity(vars.layers.len());
        for (ss, cs) in &vars.layers {
            let (hs_in, hc_in) = match dropout.as_mut() {
                Some(d) => (d.apply(tape, hs)?, d.apply(tape, hc)?),
                None => (hs, hc),
            };
            let (agg_ss, a_ss) = gat_edge(tape, hs_in, hs_in, ss, &edges.ss_src, &edges.ss_tgt, &edges.ss_bias, n)?;
            let (agg_cs, a_cs) = gat_edge(tape, hc_in, hs_in, cs, &edges.cs_src, &edges.cs_tgt, &edges.cs_bias, n)?;
            let both = tape.add(agg_ss, agg_cs)?;
            let mean = tape.scale(both, 0.5);
            hs = tape.elu(mean);
            attention.push((a_ss, a_cs));
        }
        if let Some(d) = dropout.as_mut() {
            hs = d.apply(tape, hs)?;
        }
        let picked = match rows {
            Some(r) => tape.gather_rows(hs, r.to_vec())?,
            None => hs,
        };
        let out = tape.matmul(picked, vars.head.0)?;
        let logits = tape.add_row(out, vars.head.1)?;
        Ok(ForwardOutput { logits, attention })
    }

    fn eval_tape(&self, graph: &HeteroGraph) -> Result<(Tape, ForwardOutput)> {
        self.check_graph(graph)?;
        let edges = EdgeIndex::new(graph, self.config.heads, self.config.self_loops)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.parameters().into_iter().map(|p| tape.constant(p)).collect();
        let pv = ParamVars::from_slice(&vars, self.layers.len());
        let out = self.forward_on_tape::<crate::numkernel::seed::Rng>(&mut tape, &pv, graph, &edges, None, None)?;
        Ok((tape, out))
    }

    /// Competence logits for every sample node (evaluation mode).
    pub fn forward(&self, graph: &HeteroGraph) -> Result<Matrix> {
        let (tape, out) = self.eval_tape(graph)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Attention coefficients per layer as `(sample–sample, classifier–sample)`,
    /// rows aligned with the graph's edge lists followed by any self-loops.
    pub fn attention(&self, graph: &HeteroGraph) -> Result<Vec<(Matrix, Matrix)>> {
        let (tape, out) = self.eval_tape(graph)?;
        Ok(out
            .attention
            .iter()
            .map(|(a, b)| (tape.value(*a).clone(), tape.value(*b).clone()))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let model: MetaLearner = serde_json::from_slice(bytes)?;
        if model.format != META_FORMAT || model.version != META_VERSION {
            return Err(Error::Validation(format!(
                "unsupported meta-learner encoding {} v{}",
                model.format, model.version
            )));
        }
        model.config.validate()?;
        if model.layers.len() != model.config.layers {
            return Err(Error::Validation("meta-learner layer count mismatch".into()));
        }
        Ok(model)
    }
}
