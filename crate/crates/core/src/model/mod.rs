//! The full model: projection → Nyström encoder → autoregressive term
//! decoder, plus the decoder-free head-only variant.

mod checkpoint;
mod config;
pub mod gradcheck;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, ProjectionKind};

use crate::attention::{exact_mhsa, mhca, nystrom_attention, sinusoidal_pe, AttentionParams, NystromConfig};
use crate::ecn::{EcnParams, EcnSettings, Projection, TaskIndicator};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const BOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm: Norm,
    attn: AttentionParams,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: AttentionParams,
    cross_norm: Norm,
    cross_attn: AttentionParams,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    embedding: ParamId,
    layers: Vec<DecoderLayer>,
    classifier: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    projection: Projection,
    encoder: Vec<EncoderLayer>,
    decoder: Option<Decoder>,
    head: Option<Linear>,
}

/// What a training example is scored against.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// `BOS w₁ … w_k EOS`, for the decoder.
    Tokens(&'a [usize]),
    /// Global category index, for the head-only variant.
    Category(usize),
}

/// One greedy decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub token: usize,
    pub logits: Vec<f64>,
}

impl DecodeStep {
    /// The `k` highest-scoring `(token, logit)` pairs, best first.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.logits.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated word ids, without BOS and EOS.
    pub tokens: Vec<usize>,
    pub trace: Vec<DecodeStep>,
    /// True when `max_decode_len` steps passed without EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Mecformer {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl Mecformer {
    /// Freshly initialised model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let projection = match c.projection {
            ProjectionKind::P1 => Projection::single(&mut store, &mut rng, c.d_f, c.d_model),
            ProjectionKind::Pt => Projection::per_task(&mut store, &mut rng, c.tasks, c.d_f, c.d_model),
            ProjectionKind::Ecn => Projection::Ecn(EcnParams::new(
                &mut store,
                &mut rng,
                &EcnSettings {
                    tasks: c.tasks,
                    d_f: c.d_f,
                    d_model: c.d_model,
                    gamma: c.gamma,
                    beta: c.beta,
                    router_bias: c.router_bias,
                    scaling: c.scaling,
                },
            )?),
        };
        let encoder = (0..c.encoder_layers)
            .map(|l| EncoderLayer {
                norm: Norm::new(&mut store, &format!("encoder.{l}.norm"), c.d_model),
                attn: AttentionParams::new(&mut store, &mut rng, &format!("encoder.{l}.attn"), c.d_model),
            })
            .collect();
        let (decoder, head) = if c.use_decoder {
            let embedding = store.insert(
                "decoder.embedding",
                uniform_fan_in(&mut rng, &[c.vocab_size, c.d_model], c.d_model),
            );
            let layers = (0..c.decoder_layers)
                .map(|l| {
                    let name = |s: &str| format!("decoder.{l}.{s}");
                    DecoderLayer {
                        self_norm: Norm::new(&mut store, &name("self_norm"), c.d_model),
                        self_attn: AttentionParams::new(&mut store, &mut rng, &name("self_attn"), c.d_model),
                        cross_norm: Norm::new(&mut store, &name("cross_norm"), c.d_model),
                        cross_attn: AttentionParams::new(&mut store, &mut rng, &name("cross_attn"), c.d_model),
                        ff1: Linear::new(&mut store, &mut rng, &name("ff1"), c.d_model, c.pwff_hidden, true),
                        ff2: Linear::new(&mut store, &mut rng, &name("ff2"), c.pwff_hidden, c.d_model, true),
                    }
                })
                .collect();
            let classifier = store.insert(
                "decoder.classifier",
                uniform_fan_in(&mut rng, &[c.d_model, c.vocab_size], c.d_model),
            );
            (
                Some(Decoder {
                    embedding,
                    layers,
                    classifier,
                }),
                None,
            )
        } else {
            let head = Linear::new(&mut store, &mut rng, "head", c.d_model, c.categories, true);
            (None, Some(head))
        };
        Ok(Mecformer {
            config,
            store,
            layout: Layout {
                projection,
                encoder,
                decoder,
                head,
            },
        })
    }

    /// Rebuilds a model from a config and a full set of trained parameters.
    pub fn from_parts(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Mecformer::new(config, 0)?;
        model.store.copy_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor, task: TaskIndicator) -> Result<()> {
        let (n, d_f) = x.dims2()?;
        if n == 0 || d_f != self.config.d_f {
            return Err(Error::shape("model input", x.shape(), &[n, self.config.d_f]));
        }
        if task.count() != self.config.tasks {
            return Err(Error::Config(format!(
                "task indicator covers {} tasks, model has {}",
                task.count(),
                self.config.tasks
            )));
        }
        Ok(())
    }

    /// Projected patch embeddings `v⁰`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, x: Var, task: TaskIndicator) -> Result<Var> {
        self.layout.projection.forward(tape, p, x, Some(task))
    }

    /// Encoder output `v^(L_e)` for a bag, `N×d_model`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, task: TaskIndicator) -> Result<Var> {
        let mut v = self.project(tape, p, x, task)?;
        let n = tape.shape(v)[0];
        let cfg = NystromConfig {
            num_landmarks: self.config.num_landmarks.min(n),
            pinv_iterations: self.config.pinv_iterations,
            head_count: self.config.heads,
        };
        for layer in &self.layout.encoder {
            let normed = layer.norm.forward(tape, p, v)?;
            let attended = if self.config.exact_attention {
                exact_mhsa(tape, p, &layer.attn, normed, self.config.heads, false)?
            } else {
                nystrom_attention(tape, p, &layer.attn, normed, &cfg)?
            };
            v = tape.add(v, attended)?;
        }
        Ok(v)
    }

    fn decoder(&self) -> Result<&Decoder> {
        self.layout
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without a decoder".into()))
    }

    /// Next-token logits at every position of `tokens`, `S×N_voc`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, tokens: &[usize], v: Var) -> Result<Var> {
        let dec = self.decoder()?;
        if tokens.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        let size = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&id| id >= size) {
            return Err(Error::UnknownToken { id, size });
        }
        let embedded = tape.gather_rows(p[dec.embedding], tokens)?;
        let pe = sinusoidal_pe(tokens.len(), self.config.d_model)?;
        let mut h = tape.add_const(embedded, &pe)?;
        let heads = self.config.heads;
        for layer in &dec.layers {
            let normed = layer.self_norm.forward(tape, p, h)?;
            let attended = exact_mhsa(tape, p, &layer.self_attn, normed, heads, true)?;
            h = tape.add(h, attended)?;
            let normed = layer.cross_norm.forward(tape, p, h)?;
            let crossed = mhca(tape, p, &layer.cross_attn, normed, v, heads)?;
            h = tape.add(h, crossed)?;
            let hidden = layer.ff1.forward(tape, p, h)?;
            let hidden = tape.gelu(hidden);
            let ff = layer.ff2.forward(tape, p, hidden)?;
            h = if self.config.pwff_residual { tape.add(h, ff)? } else { ff };
        }
        tape.matmul(h, p[dec.classifier])
    }

    /// Mean cross-entropy of next-token predictions under teacher forcing.
    pub fn teacher_forced_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        v: Var,
        target: &[usize],
    ) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::Contract(format!(
                "target needs BOS and EOS at least, got {} tokens",
                target.len()
            )));
        }
        let logits = self.decode(tape, p, &target[..target.len() - 1], v)?;
        tape.cross_entropy(logits, &target[1..])
    }

    /// Head-only logits over every category, `1×categories`.
    pub fn classify_headonly(&self, tape: &mut Tape, p: &Bound, v: Var) -> Result<Var> {
        let head = self
            .layout
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built with a decoder, not a head".into()))?;
        let pooled = tape.mean(v, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.config.d_model])?;
        head.forward(tape, p, pooled)
    }

    /// Training loss for one bag on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &Tensor,
        task: TaskIndicator,
        target: Target<'_>,
    ) -> Result<Var> {
        self.check_input(x, task)?;
        let xv = tape.constant(x.clone());
        let v = self.encode(tape, p, xv, task)?;
        match target {
            Target::Tokens(tokens) => self.teacher_forced_loss(tape, p, v, tokens),
            Target::Category(c) => {
                if c >= self.config.categories {
                    return Err(Error::Contract(format!(
                        "category {c} out of range for {} categories",
                        self.config.categories
                    )));
                }
                let logits = self.classify_headonly(tape, p, v)?;
                tape.cross_entropy(logits, &[c])
            }
        }
    }

    /// Loss value and per-parameter gradients for one bag.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        task: TaskIndicator,
        target: Target<'_>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, true);
        let loss = self.loss(&mut tape, &p, x, task, target)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, p.collect(grads)))
    }

    /// Loss value only, without building gradients.
    pub fn loss_value(&self, x: &Tensor, task: TaskIndicator, target: Target<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let loss = self.loss(&mut tape, &p, x, task, target)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Greedy decoding from BOS until EOS or `max_decode_len` steps.
    pub fn generate(&self, x: &Tensor, task: TaskIndicator) -> Result<Generation> {
        self.check_input(x, task)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v = self.encode(&mut tape, &p, xv, task)?;
        let mut input = vec![BOS];
        let mut out = Generation {
            tokens: Vec::new(),
            trace: Vec::new(),
            truncated: true,
        };
        for _ in 0..self.config.max_decode_len {
            let logits = self.decode(&mut tape, &p, &input, v)?;
            let last = tape.value(logits).row(input.len() - 1).to_vec();
            let token = argmax(&last);
            out.trace.push(DecodeStep {
                token,
                logits: last,
            });
            if token == EOS {
                out.truncated = false;
                break;
            }
            out.tokens.push(token);
            input.push(token);
        }
        Ok(out)
    }

    /// Head-only prediction: global category index and its logits.
    pub fn predict_category(&self, x: &Tensor, task: TaskIndicator) -> Result<(usize, Vec<f64>)> {
        self.check_input(x, task)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v = self.encode(&mut tape, &p, xv, task)?;
        let logits = self.classify_headonly(&mut tape, &p, v)?;
        let row = tape.value(logits).data().to_vec();
        Ok((argmax(&row), row))
    }

    /// Channel-wise mean of the projected patch embeddings.
    pub fn mean_projection(&self, x: &Tensor, task: TaskIndicator) -> Result<Vec<f64>> {
        self.check_input(x, task)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v0 = self.project(&mut tape, &p, xv, task)?;
        let mean = tape.mean(v0, 0)?;
        Ok(tape.value(mean).data().to_vec())
    }
}
