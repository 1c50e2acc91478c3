//! The translation network for one direction: bidirectional LSTM text
//! encoder, linear visual projection, multi-head co-attention, and an LSTM
//! decoder with dual attention, adaptive context fusion, and a learned
//! visual-dependence gate.
//!
//! A `Model` is stateless; all trainable values live in a [`ParamStore`] so
//! the same code drives both translation directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, ParamStore};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Plain attentional seq2seq over the source text; the ablation baseline.
    TextOnly,
    /// Full model with visual attention and co-attention.
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// The learned gate rescales the visual context and weights the
    /// agreement penalty per word.
    Adaptive,
    /// The gate is computed for diagnostics but the state update and the
    /// penalty both use a constant weight of 1.
    Frozen,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size shared by text states, visual states, and embeddings.
    pub d: usize,
    /// Number of co-attention subspaces.
    pub subspaces: usize,
    /// Raw region feature size.
    pub feature_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// LSTM stack depth for encoder and decoder.
    pub depth: usize,
    pub kind: ModelKind,
    pub weighting: Weighting,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.depth == 0 {
            return Err(Error::config("model: d and depth must be at least 1"));
        }
        if self.subspaces == 0 {
            return Err(Error::config("model: subspaces must be at least 1"));
        }
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return Err(Error::config("model: vocab sizes must exceed the reserved ids"));
        }
        Ok(())
    }
}

/// Dropout context for a training pass; `Eval` disables it.
pub enum RunMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl RunMode<'_> {
    fn apply(&mut self, node: &Node) -> Result<Node> {
        match self {
            RunMode::Eval => Ok(node.clone()),
            RunMode::Train { dropout, rng } => {
                if *dropout <= 0.0 {
                    return Ok(node.clone());
                }
                let keep = 1.0 - *dropout;
                let (rows, cols) = node.shape();
                let mask = Mat::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                );
                node.mul(&Node::constant(mask))
            }
        }
    }
}

// ── Outputs ─────────────────────────────────────────────────────────────

/// Encoder results: `text` is n×d, `visual` (when present) is m×d.
pub struct EncoderOutputs {
    pub text: Node,
    pub visual: Option<Node>,
}

/// One co-attention subspace. `attended_text` is the image-aware textual
/// representation (m×d); `attended_visual` the text-aware visual one (n×d).
pub struct CoAttentionSubspace {
    pub similarity: Node,
    /// m×n rows-sum-to-1 weights over text positions.
    pub text_weights: Node,
    /// n×m rows-sum-to-1 weights over regions.
    pub visual_weights: Node,
    pub attended_text: Node,
    pub attended_visual: Node,
}

pub struct CoAttentionOutputs {
    pub subspaces: Vec<CoAttentionSubspace>,
    /// Mean-pooled image-aware text, m×d.
    pub attended_text: Node,
    /// Mean-pooled text-aware visual, n×d.
    pub attended_visual: Node,
}

/// Per-step attention recorded during a teacher-forced pass. Visual entries
/// are absent for text-only models.
pub struct TraceStep {
    /// 1×m distribution over raw visual states.
    pub visual: Option<Node>,
    /// 1×n distribution over raw text states.
    pub textual: Node,
    /// 1×1 visual-dependence gate in (0,1).
    pub beta: Option<Node>,
    pub visual_gate_mean: Option<f64>,
    pub textual_gate_mean: Option<f64>,
}

#[derive(Default)]
pub struct AttentionTrace {
    pub steps: Vec<TraceStep>,
}

/// Plain-value copy of a trace; the unit in which detached regularization
/// targets and evaluation inputs travel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceValues {
    pub visual: Vec<Vec<f64>>,
    pub textual: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn values(&self) -> TraceValues {
        let mut out = TraceValues::default();
        for step in &self.steps {
            if let Some(v) = &step.visual {
                out.visual.push(v.value().data().to_vec());
            }
            out.textual.push(step.textual.value().data().to_vec());
            if let Some(b) = &step.beta {
                out.beta.push(b.item());
            }
        }
        out
    }
}

/// One line of the attention dump consumed by evaluation and external tools.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub tgt_token: String,
    pub step: usize,
    pub visual_attention: Vec<f64>,
    pub textual_attention: Vec<f64>,
    pub beta: f64,
}

/// Dump records for a teacher-forced trace over `tokens` (the EOS step is
/// reported with the literal end marker).
pub fn dump_records(trace: &TraceValues, tokens: &[String]) -> Vec<AttentionRecord> {
    (0..trace.textual.len())
        .map(|t| AttentionRecord {
            tgt_token: tokens
                .get(t)
                .cloned()
                .unwrap_or_else(|| "<eos>".to_string()),
            step: t,
            visual_attention: trace.visual.get(t).cloned().unwrap_or_default(),
            textual_attention: trace.textual[t].clone(),
            beta: trace.beta.get(t).copied().unwrap_or(1.0),
        })
        .collect()
}

// ── Building blocks ─────────────────────────────────────────────────────

/// Additive attention parameters: score(s, h) = vᵀ tanh(W_q s + W_k h).
pub struct AttendParams {
    pub query_proj: Node,
    pub key_proj: Node,
    pub score: Node,
}

impl AttendParams {
    fn fetch(store: &ParamStore, name: &str) -> Result<AttendParams> {
        Ok(AttendParams {
            query_proj: store.get(&format!("att.{name}.wq"))?.clone(),
            key_proj: store.get(&format!("att.{name}.wk"))?.clone(),
            score: store.get(&format!("att.{name}.v"))?.clone(),
        })
    }
}

/// Additive attention of a 1×d query over r×d keys: returns the 1×r weight
/// distribution and the 1×d context vector.
pub fn attend(query: &Node, keys: &Node, params: &AttendParams) -> Result<(Node, Node)> {
    if keys.rows() == 0 {
        return Err(Error::contract("attend: empty key matrix"));
    }
    let key_cache = keys.matmul(&params.key_proj)?;
    attend_cached(query, keys, &key_cache, params)
}

/// Attention with the step-independent key projection precomputed once per
/// decoded sentence.
fn attend_cached(
    query: &Node,
    keys: &Node,
    key_cache: &Node,
    params: &AttendParams,
) -> Result<(Node, Node)> {
    let proj = key_cache.add_row(&query.matmul(&params.query_proj)?)?;
    let scores = proj.tanh().matmul(&params.score)?;
    let weights = scores.transpose().softmax_rows()?;
    let context = weights.matmul(keys)?;
    Ok((weights, context))
}

/// Gated fusion of a raw context with its co-attended counterpart:
/// g = sigmoid(c U₁ + ĉ U₂), fused = ĉ + g ⊙ (c − ĉ).
///
/// The subtraction form keeps `fused == c` exact when the two inputs are
/// equal.
pub fn fuse(c: &Node, c_hat: &Node, u1: &Node, u2: &Node) -> Result<(Node, Node)> {
    let gate = c.matmul(u1)?.add(&c_hat.matmul(u2)?)?.sigmoid();
    let fused = c_hat.add(&gate.mul(&c.sub(c_hat)?)?)?;
    Ok((gate, fused))
}

/// Visual-dependence gate: sigmoid(wᵀ tanh(W₁ s + W₂ c̄ᵛ)), a 1×1 node.
pub fn compute_beta(
    state: &Node,
    visual_ctx: &Node,
    w1: &Node,
    w2: &Node,
    w: &Node,
) -> Result<Node> {
    Ok(state
        .matmul(w1)?
        .add(&visual_ctx.matmul(w2)?)?
        .tanh()
        .matmul(w)?
        .sigmoid())
}

/// One LSTM cell: gate pre-activations share a single (input+d)x4d weight
/// matrix in [i | f | g | o] column order.
struct LstmParams {
    weights: Node,
    bias: Node,
    hidden: usize,
}

impl LstmParams {
    fn fetch(store: &ParamStore, prefix: &str) -> Result<LstmParams> {
        let weights = store.get(&format!("{prefix}.w"))?.clone();
        let bias = store.get(&format!("{prefix}.b"))?.clone();
        let hidden = bias.cols() / 4;
        Ok(LstmParams {
            weights,
            bias,
            hidden,
        })
    }

    fn step(&self, input: &Node, h: &Node, c: &Node) -> Result<(Node, Node)> {
        let z = Node::concat_cols(&[input.clone(), h.clone()])?;
        let pre = z.matmul(&self.weights)?.add(&self.bias)?;
        let packed = Node::lstm_activation(&pre, c)?;
        let h_new = packed.slice_cols(0, self.hidden)?;
        let c_new = packed.slice_cols(self.hidden, 2 * self.hidden)?;
        Ok((h_new, c_new))
    }
}

// ── The model ───────────────────────────────────────────────────────────

pub struct Model {
    pub cfg: ModelConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    fn is_multimodal(&self) -> bool {
        self.cfg.kind == ModelKind::Multimodal
    }

    /// Decoder LSTM input width at the bottom layer.
    fn decoder_input_dim(&self) -> usize {
        if self.is_multimodal() {
            3 * self.cfg.d
        } else {
            2 * self.cfg.d
        }
    }

    /// Fresh parameter store: uniform(-0.08, 0.08) except forget-gate biases,
    /// which start at 1.0. Insertion order is fixed so a seed pins every value.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let d = self.cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-0.08..0.08)).collect(),
            )
        };
        let lstm = |store: &mut ParamStore,
                    rng: &mut ChaCha8Rng,
                    prefix: &str,
                    input: usize|
         -> Result<()> {
            let m = mat(rng, input + d, 4 * d);
            store.insert(&format!("{prefix}.w"), m)?;
            // forget-gate columns start at 1.0
            let mut bias = Mat::zeros(1, 4 * d);
            for u in d..2 * d {
                bias.set(0, u, 1.0);
            }
            store.insert(&format!("{prefix}.b"), bias)?;
            Ok(())
        };

        let emb_src = mat(&mut rng, self.cfg.src_vocab, d);
        store.insert("emb.src", emb_src)?;
        let emb_tgt = mat(&mut rng, self.cfg.tgt_vocab, d);
        store.insert("emb.tgt", emb_tgt)?;
        for layer in 0..self.cfg.depth {
            lstm(&mut store, &mut rng, &format!("enc.fwd.l{layer}"), d)?;
            lstm(&mut store, &mut rng, &format!("enc.bwd.l{layer}"), d)?;
        }
        let init_w = mat(&mut rng, d, d);
        store.insert("init.w", init_w)?;
        store.insert("init.b", Mat::zeros(1, d))?;
        if self.is_multimodal() {
            let vis_w = mat(&mut rng, self.cfg.feature_dim, d);
            store.insert("vis.w", vis_w)?;
            store.insert("vis.b", Mat::zeros(1, d))?;
            for k in 0..self.cfg.subspaces {
                let m = mat(&mut rng, d, d);
                store.insert(&format!("coatt.m{k}"), m)?;
            }
        }
        let attention_sets: &[&str] = if self.is_multimodal() {
            &["v", "x", "vhat", "xhat"]
        } else {
            &["x"]
        };
        for name in attention_sets {
            let wq = mat(&mut rng, d, d);
            store.insert(&format!("att.{name}.wq"), wq)?;
            let wk = mat(&mut rng, d, d);
            store.insert(&format!("att.{name}.wk"), wk)?;
            let v = mat(&mut rng, d, 1);
            store.insert(&format!("att.{name}.v"), v)?;
        }
        if self.is_multimodal() {
            for name in ["v", "x"] {
                let u1 = mat(&mut rng, d, d);
                store.insert(&format!("fuse.{name}.u1"), u1)?;
                let u2 = mat(&mut rng, d, d);
                store.insert(&format!("fuse.{name}.u2"), u2)?;
            }
            let w1 = mat(&mut rng, d, d);
            store.insert("beta.w1", w1)?;
            let w2 = mat(&mut rng, d, d);
            store.insert("beta.w2", w2)?;
            let w = mat(&mut rng, d, 1);
            store.insert("beta.w", w)?;
        }
        for layer in 0..self.cfg.depth {
            let input = if layer == 0 { self.decoder_input_dim() } else { d };
            lstm(&mut store, &mut rng, &format!("dec.l{layer}"), input)?;
        }
        let out_w = mat(&mut rng, d, self.cfg.tgt_vocab);
        store.insert("out.w", out_w)?;
        store.insert("out.b", Mat::zeros(1, self.cfg.tgt_vocab))?;
        Ok(store)
    }

    /// Bidirectional stacked LSTM over the source tokens; directions are
    /// combined by summation so every layer stays n×d.
    pub fn encode_text(
        &self,
        store: &ParamStore,
        ids: &[usize],
        mode: &mut RunMode,
    ) -> Result<Node> {
        if ids.is_empty() {
            return Err(Error::contract("encode_text: empty sentence"));
        }
        for &id in ids {
            if id >= self.cfg.src_vocab {
                return Err(Error::contract(format!(
                    "encode_text: token id {id} out of range for vocab {}",
                    self.cfg.src_vocab
                )));
            }
        }
        let d = self.cfg.d;
        let n = ids.len();
        let embedded = store.get("emb.src")?.gather_rows(ids)?;
        let embedded = mode.apply(&embedded)?;
        let mut layer_input: Vec<Node> = (0..n)
            .map(|i| embedded.gather_rows(&[i]))
            .collect::<Result<_>>()?;
        for layer in 0..self.cfg.depth {
            let fwd = LstmParams::fetch(store, &format!("enc.fwd.l{layer}"))?;
            let bwd = LstmParams::fetch(store, &format!("enc.bwd.l{layer}"))?;
            let zero = Node::constant(Mat::zeros(1, d));
            let mut states = vec![Node::constant(Mat::zeros(1, d)); n];
            let (mut h, mut c) = (zero.clone(), zero.clone());
            for i in 0..n {
                let (nh, nc) = fwd.step(&layer_input[i], &h, &c)?;
                states[i] = nh.clone();
                h = nh;
                c = nc;
            }
            let (mut h, mut c) = (zero.clone(), zero);
            for i in (0..n).rev() {
                let (nh, nc) = bwd.step(&layer_input[i], &h, &c)?;
                states[i] = states[i].add(&nh)?;
                h = nh;
                c = nc;
            }
            layer_input = states;
        }
        Node::concat_rows(&layer_input)
    }

    /// Linear projection of raw region features into the shared d space.
    pub fn encode_visual(&self, store: &ParamStore, regions: &[Vec<f64>]) -> Result<Node> {
        if regions.is_empty() {
            return Err(Error::contract("encode_visual: no regions"));
        }
        let raw = Node::constant(Mat::from_rows(regions)?);
        raw.matmul(store.get("vis.w")?)?
            .add_row(store.get("vis.b")?)
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        ids: &[usize],
        regions: &[Vec<f64>],
        mode: &mut RunMode,
    ) -> Result<EncoderOutputs> {
        let text = self.encode_text(store, ids, mode)?;
        let visual = if self.is_multimodal() {
            Some(self.encode_visual(store, regions)?)
        } else {
            None
        };
        Ok(EncoderOutputs { text, visual })
    }

    /// The four-equation co-attention pipeline, repeated per subspace and
    /// mean-pooled.
    pub fn co_attend(
        &self,
        store: &ParamStore,
        text: &Node,
        visual: &Node,
    ) -> Result<CoAttentionOutputs> {
        if self.cfg.subspaces == 0 {
            return Err(Error::config("co_attend: subspaces must be at least 1"));
        }
        let mut subspaces = Vec::with_capacity(self.cfg.subspaces);
        for k in 0..self.cfg.subspaces {
            let m_k = store.get(&format!("coatt.m{k}"))?;
            let similarity = visual.matmul(m_k)?.matmul(&text.transpose())?;
            let text_weights = similarity.softmax_rows()?;
            let visual_weights = similarity.transpose().softmax_rows()?;
            let attended_text = text_weights.matmul(text)?;
            let attended_visual = visual_weights.matmul(visual)?;
            subspaces.push(CoAttentionSubspace {
                similarity,
                text_weights,
                visual_weights,
                attended_text,
                attended_visual,
            });
        }
        let attended_text =
            Node::mean_over(&subspaces.iter().map(|s| s.attended_text.clone()).collect::<Vec<_>>())?;
        let attended_visual = Node::mean_over(
            &subspaces
                .iter()
                .map(|s| s.attended_visual.clone())
                .collect::<Vec<_>>(),
        )?;
        Ok(CoAttentionOutputs {
            subspaces,
            attended_text,
            attended_visual,
        })
    }

    /// Initial decoder state: tanh-projected mean of the text states.
    fn initial_state(&self, store: &ParamStore, text: &Node) -> Result<Node> {
        let n = text.rows();
        let mean_weights = Node::constant(Mat::full(1, n, 1.0 / n as f64));
        mean_weights
            .matmul(text)?
            .matmul(store.get("init.w")?)?
            .add(store.get("init.b")?)
            .map(|s| s.tanh())
    }

    /// Teacher-forced decode over the gold target. Returns per-step logits
    /// ((l+1)×V — the final row predicts the end marker) and the attention
    /// trace recorded at every step.
    pub fn decode_teacher_forced(
        &self,
        store: &ParamStore,
        enc: &EncoderOutputs,
        co: Option<&CoAttentionOutputs>,
        tgt_ids: &[usize],
        mode: &mut RunMode,
    ) -> Result<(Node, AttentionTrace)> {
        if tgt_ids.is_empty() {
            return Err(Error::contract("decode_teacher_forced: empty target"));
        }
        for &id in tgt_ids {
            if id >= self.cfg.tgt_vocab {
                return Err(Error::contract(format!(
                    "decode_teacher_forced: token id {id} out of range"
                )));
            }
        }
        let mut stepper = DecoderStepper::prepare(self, store, enc, co)?;
        let mut states = stepper.initial_states()?;
        let mut prev = BOS;
        let mut logit_rows = Vec::with_capacity(tgt_ids.len() + 1);
        let mut trace = AttentionTrace::default();
        for t in 0..=tgt_ids.len() {
            let out = stepper.step(&mut states, prev, mode)?;
            logit_rows.push(out.logits);
            trace.steps.push(out.trace);
            prev = if t < tgt_ids.len() { tgt_ids[t] } else { EOS };
        }
        Ok((Node::concat_rows(&logit_rows)?, trace))
    }

    /// Convenience composition: encode, co-attend, teacher-forced decode.
    pub fn forward(
        &self,
        store: &ParamStore,
        src_ids: &[usize],
        regions: &[Vec<f64>],
        tgt_ids: &[usize],
        mode: &mut RunMode,
    ) -> Result<(Node, AttentionTrace)> {
        let enc = self.encode(store, src_ids, regions, mode)?;
        let co = match &enc.visual {
            Some(v) => Some(self.co_attend(store, &enc.text, v)?),
            None => None,
        };
        self.decode_teacher_forced(store, &enc, co.as_ref(), tgt_ids, mode)
    }

    /// Decode token ids (no BOS/EOS framing) with greedy or beam search.
    /// Scoring is plain cumulative log-probability; search stops at the end
    /// marker or after `max_len` emitted tokens.
    pub fn translate(
        &self,
        store: &ParamStore,
        enc: &EncoderOutputs,
        co: Option<&CoAttentionOutputs>,
        max_len: usize,
        strategy: DecodeStrategy,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("translate: max_len must be at least 1"));
        }
        let width = match strategy {
            DecodeStrategy::Greedy => 1,
            DecodeStrategy::Beam(b) => {
                if b == 0 {
                    return Err(Error::contract("translate: beam width must be at least 1"));
                }
                b
            }
        };
        let mut stepper = DecoderStepper::prepare(self, store, enc, co)?;

        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            states: Vec<(Node, Node)>,
            prev: usize,
            finished: bool,
        }
        let mut beam = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            states: stepper.initial_states()?,
            prev: BOS,
            finished: false,
        }];
        for _ in 0..max_len {
            if beam.iter().all(|h| h.finished) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in beam {
                if hyp.finished {
                    candidates.push(hyp);
                    continue;
                }
                let mut states = hyp.states.clone();
                let out = stepper.step(&mut states, hyp.prev, &mut RunMode::Eval)?;
                let logprobs = log_softmax_row(out.logits.value().row(0));
                let mut ranked: Vec<usize> = (0..logprobs.len()).collect();
                ranked.sort_by(|&a, &b| {
                    logprobs[b]
                        .partial_cmp(&logprobs[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &id in ranked.iter().take(width) {
                    let mut tokens = hyp.tokens.clone();
                    let finished = id == EOS;
                    if !finished {
                        tokens.push(id);
                    }
                    candidates.push(Hyp {
                        tokens,
                        score: hyp.score + logprobs[id],
                        states: states.clone(),
                        prev: id,
                        finished,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            candidates.truncate(width);
            beam = candidates;
        }
        beam.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(beam.into_iter().next().map(|h| h.tokens).unwrap_or_default())
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Everything one decoder step needs, fetched once per pass.
struct DecoderStepper<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    text: &'a Node,
    visual: Option<&'a Node>,
    attended_text: Option<&'a Node>,
    attended_visual: Option<&'a Node>,
    att_x: AttendParams,
    att_v: Option<AttendParams>,
    att_vhat: Option<AttendParams>,
    att_xhat: Option<AttendParams>,
    /// Step-independent key projections for each attention set.
    cache_x: Node,
    cache_v: Option<Node>,
    cache_vhat: Option<Node>,
    cache_xhat: Option<Node>,
    layers: Vec<LstmParams>,
}

struct StepOutput {
    logits: Node,
    trace: TraceStep,
}

impl<'a> DecoderStepper<'a> {
    fn prepare(
        model: &'a Model,
        store: &'a ParamStore,
        enc: &'a EncoderOutputs,
        co: Option<&'a CoAttentionOutputs>,
    ) -> Result<DecoderStepper<'a>> {
        let multimodal = model.is_multimodal();
        if multimodal && (enc.visual.is_none() || co.is_none()) {
            return Err(Error::contract(
                "decoder: multimodal model needs visual encodings and co-attention",
            ));
        }
        let layers = (0..model.cfg.depth)
            .map(|l| LstmParams::fetch(store, &format!("dec.l{l}")))
            .collect::<Result<Vec<_>>>()?;
        let att_x = AttendParams::fetch(store, "x")?;
        let att_v = multimodal
            .then(|| AttendParams::fetch(store, "v"))
            .transpose()?;
        let att_vhat = multimodal
            .then(|| AttendParams::fetch(store, "vhat"))
            .transpose()?;
        let att_xhat = multimodal
            .then(|| AttendParams::fetch(store, "xhat"))
            .transpose()?;
        let cache_x = enc.text.matmul(&att_x.key_proj)?;
        let cache_v = match (&enc.visual, &att_v) {
            (Some(v), Some(p)) => Some(v.matmul(&p.key_proj)?),
            _ => None,
        };
        let cache_vhat = match (co, &att_vhat) {
            (Some(c), Some(p)) => Some(c.attended_visual.matmul(&p.key_proj)?),
            _ => None,
        };
        let cache_xhat = match (co, &att_xhat) {
            (Some(c), Some(p)) => Some(c.attended_text.matmul(&p.key_proj)?),
            _ => None,
        };
        Ok(DecoderStepper {
            model,
            store,
            text: &enc.text,
            visual: enc.visual.as_ref(),
            attended_text: co.map(|c| &c.attended_text),
            attended_visual: co.map(|c| &c.attended_visual),
            att_x,
            att_v,
            att_vhat,
            att_xhat,
            cache_x,
            cache_v,
            cache_vhat,
            cache_xhat,
            layers,
        })
    }

    fn initial_states(&self) -> Result<Vec<(Node, Node)>> {
        let s0 = self.model.initial_state(self.store, self.text)?;
        let zero = Node::constant(Mat::zeros(1, self.model.cfg.d));
        Ok((0..self.model.cfg.depth)
            .map(|_| (s0.clone(), zero.clone()))
            .collect())
    }

    fn step(
        &mut self,
        states: &mut Vec<(Node, Node)>,
        prev_token: usize,
        mode: &mut RunMode,
    ) -> Result<StepOutput> {
        let store = self.store;
        let query = states.last().unwrap().0.clone();
        let embedded = store.get("emb.tgt")?.gather_rows(&[prev_token])?;
        let (text_weights, text_ctx) =
            attend_cached(&query, self.text, &self.cache_x, &self.att_x)?;

        let (input, trace) = if self.model.is_multimodal() {
            let (visual_weights, visual_ctx) = attend_cached(
                &query,
                self.visual.unwrap(),
                self.cache_v.as_ref().unwrap(),
                self.att_v.as_ref().unwrap(),
            )?;
            let (_, co_visual_ctx) = attend_cached(
                &query,
                self.attended_visual.unwrap(),
                self.cache_vhat.as_ref().unwrap(),
                self.att_vhat.as_ref().unwrap(),
            )?;
            let (_, co_text_ctx) = attend_cached(
                &query,
                self.attended_text.unwrap(),
                self.cache_xhat.as_ref().unwrap(),
                self.att_xhat.as_ref().unwrap(),
            )?;
            let (visual_gate, fused_visual) = fuse(
                &visual_ctx,
                &co_visual_ctx,
                store.get("fuse.v.u1")?,
                store.get("fuse.v.u2")?,
            )?;
            let (textual_gate, fused_text) = fuse(
                &text_ctx,
                &co_text_ctx,
                store.get("fuse.x.u1")?,
                store.get("fuse.x.u2")?,
            )?;
            let beta = compute_beta(
                &query,
                &fused_visual,
                store.get("beta.w1")?,
                store.get("beta.w2")?,
                store.get("beta.w")?,
            )?;
            let visual_input = match self.model.cfg.weighting {
                Weighting::Adaptive => fused_visual.scale_by(&beta)?,
                Weighting::Frozen => fused_visual.clone(),
            };
            let input = Node::concat_cols(&[embedded, visual_input, fused_text])?;
            let gate_mean = |g: &Node| {
                let v = g.value();
                v.sum() / v.len() as f64
            };
            (
                input,
                TraceStep {
                    visual: Some(visual_weights),
                    textual: text_weights,
                    beta: Some(beta),
                    visual_gate_mean: Some(gate_mean(&visual_gate)),
                    textual_gate_mean: Some(gate_mean(&textual_gate)),
                },
            )
        } else {
            (
                Node::concat_cols(&[embedded, text_ctx])?,
                TraceStep {
                    visual: None,
                    textual: text_weights,
                    beta: None,
                    visual_gate_mean: None,
                    textual_gate_mean: None,
                },
            )
        };

        let mut x = mode.apply(&input)?;
        for (layer, (h, c)) in self.layers.iter().zip(states.iter_mut()) {
            let (nh, nc) = layer.step(&x, h, c)?;
            *h = nh.clone();
            *c = nc;
            x = nh;
        }
        let logits = x.matmul(store.get("out.w")?)?.add(store.get("out.b")?)?;
        Ok(StepOutput { logits, trace })
    }
}
