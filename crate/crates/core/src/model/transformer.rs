use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Segment, Tape, Var};
use std::ops::Range;
use super::ModelConfig;
use crate::corpus::TrainingExample;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, EntropyLoss};
use crate::smoothing::TargetTable;

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Embedding,
}

/// Every parameter's name, shape and initializer, in store order.
fn param_specs(config: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = config.d_model;
    let mut specs = vec![("embed.tokens".to_string(), (config.vocab_size, d), Init::Embedding)];
    let ln = |specs: &mut Vec<_>, name: String| {
        specs.push((format!("{name}.g"), (1, d), Init::Ones));
        specs.push((format!("{name}.b"), (1, d), Init::Zeros));
    };
    let attn = |specs: &mut Vec<(String, (usize, usize), Init)>, name: String| {
        for w in ["q", "k", "v", "o"] {
            specs.push((format!("{name}.w{w}"), (d, d), Init::Xavier));
            specs.push((format!("{name}.b{w}"), (1, d), Init::Zeros));
        }
    };
    let ff = |specs: &mut Vec<(String, (usize, usize), Init)>, name: String| {
        specs.push((format!("{name}.w1"), (d, config.d_ff), Init::Xavier));
        specs.push((format!("{name}.b1"), (1, config.d_ff), Init::Zeros));
        specs.push((format!("{name}.w2"), (config.d_ff, d), Init::Xavier));
        specs.push((format!("{name}.b2"), (1, d), Init::Zeros));
    };
    for l in 0..config.n_layers {
        ln(&mut specs, format!("enc.{l}.ln1"));
        attn(&mut specs, format!("enc.{l}.attn"));
        ln(&mut specs, format!("enc.{l}.ln2"));
        ff(&mut specs, format!("enc.{l}.ff"));
    }
    ln(&mut specs, "enc.ln".into());
    for l in 0..config.n_layers {
        ln(&mut specs, format!("dec.{l}.ln1"));
        attn(&mut specs, format!("dec.{l}.self"));
        ln(&mut specs, format!("dec.{l}.ln2"));
        attn(&mut specs, format!("dec.{l}.cross"));
        ln(&mut specs, format!("dec.{l}.ln3"));
        ff(&mut specs, format!("dec.{l}.ff"));
    }
    ln(&mut specs, "dec.ln".into());
    specs.push(("out.w".into(), (d, config.vocab_size), Init::Xavier));
    specs.push(("out.b".into(), (1, config.vocab_size), Init::Zeros));
    specs
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross_attn: Attn,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    /// Resolve parameter indices by name, checking every shape.
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        for (name, shape, _) in param_specs(config) {
            let tensor = store
                .by_name(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
            if tensor.dim() != shape {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    tensor.dim()
                )));
            }
        }
        let idx = |name: String| store.index_of(&name).expect("checked above");
        let norm = |name: &str| Norm {
            g: idx(format!("{name}.g")),
            b: idx(format!("{name}.b")),
        };
        let attn = |name: &str| Attn {
            wq: idx(format!("{name}.wq")),
            bq: idx(format!("{name}.bq")),
            wk: idx(format!("{name}.wk")),
            bk: idx(format!("{name}.bk")),
            wv: idx(format!("{name}.wv")),
            bv: idx(format!("{name}.bv")),
            wo: idx(format!("{name}.wo")),
            bo: idx(format!("{name}.bo")),
        };
        let ff = |name: &str| FeedForward {
            w1: idx(format!("{name}.w1")),
            b1: idx(format!("{name}.b1")),
            w2: idx(format!("{name}.w2")),
            b2: idx(format!("{name}.b2")),
        };
        Ok(Self {
            embed: idx("embed.tokens".into()),
            encoder: (0..config.n_layers)
                .map(|l| EncoderLayer {
                    ln1: norm(&format!("enc.{l}.ln1")),
                    attn: attn(&format!("enc.{l}.attn")),
                    ln2: norm(&format!("enc.{l}.ln2")),
                    ff: ff(&format!("enc.{l}.ff")),
                })
                .collect(),
            enc_norm: norm("enc.ln"),
            decoder: (0..config.n_layers)
                .map(|l| DecoderLayer {
                    ln1: norm(&format!("dec.{l}.ln1")),
                    self_attn: attn(&format!("dec.{l}.self")),
                    ln2: norm(&format!("dec.{l}.ln2")),
                    cross_attn: attn(&format!("dec.{l}.cross")),
                    ln3: norm(&format!("dec.{l}.ln3")),
                    ff: ff(&format!("dec.{l}.ff")),
                })
                .collect(),
            dec_norm: norm("dec.ln"),
            out_w: idx("out.w".into()),
            out_b: idx("out.b".into()),
        })
    }
}

/// Examples packed row-wise: all contexts stacked for the encoder, all
/// decoder inputs stacked for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub enc_ids: Vec<usize>,
    pub enc_segs: Vec<Range<usize>>,
    pub dec_ids: Vec<usize>,
    pub dec_segs: Vec<Range<usize>>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>) -> Self {
        let mut batch = Batch {
            enc_ids: Vec::new(),
            enc_segs: Vec::new(),
            dec_ids: Vec::new(),
            dec_segs: Vec::new(),
            targets: Vec::new(),
        };
        for ex in examples {
            let start = batch.enc_ids.len();
            batch.enc_ids.extend_from_slice(&ex.context_ids);
            batch.enc_segs.push(start..batch.enc_ids.len());
            let start = batch.dec_ids.len();
            batch.dec_ids.extend(ex.decoder_input());
            batch.dec_segs.push(start..batch.dec_ids.len());
            batch.targets.extend_from_slice(&ex.response_ids);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.enc_segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc_segs.is_empty()
    }
}

struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let mask = Array2::from_shape_simple_fn(tape.value(x).raw_dim(), || {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        tape.dropout(x, mask)
    }
}

/// Sinusoidal encodings for positions restarting at 0 in every segment.
fn positional_encoding(segs: &[Segment], d: usize) -> Array2<f64> {
    let rows: usize = segs.iter().map(|s| s.len()).sum();
    let mut pe = Array2::zeros((rows, d));
    for seg in segs {
        for (pos, row) in seg.clone().enumerate() {
            for i in 0..d {
                let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = pos as f64 / freq;
                pe[[row, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    pe
}

/// Pre-norm transformer encoder-decoder with shared token embeddings and
/// an untied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Fresh model: token embeddings from `embeddings` (projected to `d_model`
/// if needed), other weights Xavier-uniform, biases zero, norms identity.
pub fn init_model(config: &ModelConfig, embeddings: &EmbeddingMatrix) -> Result<Model> {
    config.validate()?;
    if embeddings.rows() != config.vocab_size {
        return Err(Error::Config(format!(
            "embedding matrix has {} rows, model vocabulary is {}",
            embeddings.rows(),
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = if embeddings.dim() == config.d_model {
        embeddings.values().clone()
    } else if config.project_embeddings {
        let bound = (3.0 / embeddings.dim() as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((embeddings.dim(), config.d_model), || {
            rng.gen_range(-bound..bound)
        });
        embeddings.values().dot(&projection)
    } else {
        return Err(Error::Config(format!(
            "word vectors are {}-dimensional but d_model is {} and projection is disabled",
            embeddings.dim(),
            config.d_model
        )));
    };

    let mut params = ParamStore::new();
    let mut table = Some(table);
    for (name, (rows, cols), init) in param_specs(config) {
        let tensor = match init {
            Init::Embedding => table.take().expect("one embedding table"),
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
            }
        };
        params.add(name, tensor);
    }
    Model::from_params(config.clone(), params)
}

impl Model {
    /// Wrap an existing parameter store, checking it against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Layout::resolve(&config, &params)?;
        Ok(Self { config, params })
    }

    fn layout(&self) -> Layout {
        Layout::resolve(&self.config, &self.params).expect("validated at construction")
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let k = self.config.vocab_size;
        if let Some(&bad) = batch
            .enc_ids
            .iter()
            .chain(&batch.dec_ids)
            .chain(&batch.targets)
            .find(|&&id| id >= k)
        {
            return Err(Error::Bounds { index: bad, len: k });
        }
        if let Some(seg) = batch.enc_segs.iter().find(|s| s.len() > self.config.max_context) {
            return Err(Error::Contract(format!(
                "context of {} tokens exceeds the maximum of {}",
                seg.len(),
                self.config.max_context
            )));
        }
        if batch.dec_segs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("empty decoder input".into()));
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let g = tape.param(&self.params, n.g);
        let b = tape.param(&self.params, n.b);
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        a: Attn,
        xq: Var,
        xkv: Var,
        q_segs: &[Segment],
        k_segs: &[Segment],
        causal: bool,
    ) -> Var {
        let q = self.linear(tape, xq, a.wq, a.bq);
        let k = self.linear(tape, xkv, a.wk, a.bk);
        let v = self.linear(tape, xkv, a.wv, a.bv);
        let mixed = tape.attention(q, k, v, self.config.n_heads, q_segs, k_segs, causal);
        self.linear(tape, mixed, a.wo, a.bo)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, f: FeedForward) -> Var {
        let h = self.linear(tape, x, f.w1, f.b1);
        let h = tape.gelu(h);
        self.linear(tape, h, f.w2, f.b2)
    }

    fn embed(&self, tape: &mut Tape, layout: &Layout, ids: &[usize], segs: &[Segment], drop: &mut Dropout) -> Var {
        let table = tape.param(&self.params, layout.embed);
        let tokens = tape.gather(table, ids);
        let pe = tape.input(positional_encoding(segs, self.config.d_model));
        let x = tape.add(tokens, pe);
        drop.apply(tape, x)
    }

    fn encode_on(&self, tape: &mut Tape, layout: &Layout, batch: &Batch, drop: &mut Dropout) -> Var {
        let segs = &batch.enc_segs;
        let mut x = self.embed(tape, layout, &batch.enc_ids, segs, drop);
        for layer in &layout.encoder {
            let h = self.norm(tape, x, layer.ln1);
            let h = self.attention(tape, layer.attn, h, h, segs, segs, false);
            let h = drop.apply(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.ln2);
            let h = self.feed_forward(tape, h, layer.ff);
            let h = drop.apply(tape, h);
            x = tape.add(x, h);
        }
        self.norm(tape, x, layout.enc_norm)
    }

    fn decode_on(&self, tape: &mut Tape, layout: &Layout, memory: Var, batch: &Batch, drop: &mut Dropout) -> Var {
        let segs = &batch.dec_segs;
        let mut x = self.embed(tape, layout, &batch.dec_ids, segs, drop);
        for layer in &layout.decoder {
            let h = self.norm(tape, x, layer.ln1);
            let h = self.attention(tape, layer.self_attn, h, h, segs, segs, true);
            let h = drop.apply(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.ln2);
            let h = self.attention(tape, layer.cross_attn, h, memory, segs, &batch.enc_segs, false);
            let h = drop.apply(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.ln3);
            let h = self.feed_forward(tape, h, layer.ff);
            let h = drop.apply(tape, h);
            x = tape.add(x, h);
        }
        let x = self.norm(tape, x, layout.dec_norm);
        self.linear(tape, x, layout.out_w, layout.out_b)
    }

    fn run(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(Tape, Var)> {
        self.check_batch(batch)?;
        let layout = self.layout();
        let mut drop = Dropout {
            p: self.config.dropout,
            rng,
        };
        let mut tape = Tape::new(self.params.len());
        let memory = self.encode_on(&mut tape, &layout, batch, &mut drop);
        let logits = self.decode_on(&mut tape, &layout, memory, batch, &mut drop);
        Ok((tape, logits))
    }

    /// Logits for every decoder position of `batch` (rows follow
    /// `batch.dec_ids`). Dropout is active only when `rng` is given.
    pub fn forward_batch(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Array2<f64>> {
        let (tape, logits) = self.run(batch, rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits for one context and decoder prefix, one row per prefix
    /// position.
    pub fn forward(
        &self,
        context_ids: &[usize],
        prefix_ids: &[usize],
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let batch = Batch {
            enc_ids: context_ids.to_vec(),
            enc_segs: vec![0..context_ids.len()],
            dec_ids: prefix_ids.to_vec(),
            dec_segs: vec![0..prefix_ids.len()],
            targets: Vec::new(),
        };
        self.forward_batch(&batch, train_mode.then_some(rng))
    }

    /// Mean batch loss and its gradient for every parameter tensor.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        table: &TargetTable,
        loss: &dyn EntropyLoss,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let (tape, logits) = self.run(batch, rng)?;
        let (mean, seed) = batch_loss(table, &batch.targets, tape.value(logits), loss)?;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {mean} over {} examples",
                batch.len()
            )));
        }
        Ok((mean, tape.backward(logits, seed, &self.params)))
    }

    /// Mean batch loss without gradients, in eval mode.
    pub fn batch_loss(&self, batch: &Batch, table: &TargetTable, loss: &dyn EntropyLoss) -> Result<f64> {
        let logits = self.forward_batch(batch, None)?;
        Ok(batch_loss(table, &batch.targets, &logits, loss)?.0)
    }

    /// Encoder output for a single context, in eval mode.
    pub(crate) fn encode(&self, context_ids: &[usize]) -> Result<Array2<f64>> {
        let batch = Batch {
            enc_ids: context_ids.to_vec(),
            enc_segs: vec![0..context_ids.len()],
            dec_ids: vec![crate::vocab::BOS_ID],
            dec_segs: vec![0..1],
            targets: Vec::new(),
        };
        self.check_batch(&batch)?;
        let layout = self.layout();
        let mut tape = Tape::new(self.params.len());
        let mut drop = Dropout { p: 0.0, rng: None };
        let memory = self.encode_on(&mut tape, &layout, &batch, &mut drop);
        Ok(tape.value(memory).clone())
    }

    /// Decoder logits given a precomputed encoder output, in eval mode.
    pub(crate) fn decode_logits(&self, memory: &Array2<f64>, prefix_ids: &[usize]) -> Result<Array2<f64>> {
        let batch = Batch {
            enc_ids: vec![0; memory.nrows()],
            enc_segs: vec![0..memory.nrows()],
            dec_ids: prefix_ids.to_vec(),
            dec_segs: vec![0..prefix_ids.len()],
            targets: Vec::new(),
        };
        self.check_batch(&batch)?;
        let layout = self.layout();
        let mut tape = Tape::new(self.params.len());
        let memory = tape.input(memory.clone());
        let mut drop = Dropout { p: 0.0, rng: None };
        let logits = self.decode_on(&mut tape, &layout, memory, &batch, &mut drop);
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainingExample;
    use crate::embeddings::seeded_vector;
    use crate::losses::CrossEntropy;

    fn tiny_embeddings(k: usize, dim: usize) -> EmbeddingMatrix {
        let mut values = Array2::zeros((k, dim));
        for i in 0..k {
            values.row_mut(i).assign(&ndarray::Array1::from(seeded_vector(&format!("t{i}"), dim)));
        }
        EmbeddingMatrix::new(values).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_projects() {
        let emb = tiny_embeddings(20, 30);
        let cfg = ModelConfig::desk(20, 5);
        let a = init_model(&cfg, &emb).unwrap();
        let b = init_model(&cfg, &emb).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.by_name("embed.tokens").unwrap().dim(), (20, 64));

        let mut strict = cfg.clone();
        strict.project_embeddings = false;
        assert!(matches!(init_model(&strict, &emb), Err(Error::Config(_))));
    }

    #[test]
    fn paper_preset_shapes() {
        let emb = tiny_embeddings(12, 300);
        let model = init_model(&ModelConfig::paper(12, 0), &emb).unwrap();
        assert_eq!(model.params.by_name("embed.tokens").unwrap().dim(), (12, 300));
        assert_eq!(model.params.by_name("enc.2.attn.wq").unwrap().dim(), (300, 300));
        assert!(model.params.by_name("dec.2.cross.wo").is_some());
        assert_eq!(model.params.by_name("embed.tokens").unwrap(), emb.values());
    }

    #[test]
    fn forward_shape_and_eval_determinism() {
        let emb = tiny_embeddings(15, 64);
        let model = init_model(&ModelConfig::desk(15, 1), &emb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.forward(&[4, 7, 8], &[2, 9, 10, 11], false, &mut rng).unwrap();
        let b = model.forward(&[4, 7, 8], &[2, 9, 10, 11], false, &mut rng).unwrap();
        assert_eq!(a.dim(), (4, 15));
        assert_eq!(a, b);
        let train = model.forward(&[4, 7, 8], &[2, 9, 10, 11], true, &mut rng).unwrap();
        assert_ne!(a, train);
    }

    #[test]
    fn future_prefix_tokens_do_not_leak() {
        let emb = tiny_embeddings(15, 64);
        let model = init_model(&ModelConfig::desk(15, 1), &emb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.forward(&[4, 7], &[2, 9, 10, 11, 12], false, &mut rng).unwrap();
        let b = model.forward(&[4, 7], &[2, 9, 10, 12, 11], false, &mut rng).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn contract_errors() {
        let emb = tiny_embeddings(10, 64);
        let model = init_model(&ModelConfig::desk(10, 1), &emb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let long = vec![7; 51];
        assert!(matches!(model.forward(&long, &[2], false, &mut rng), Err(Error::Contract(_))));
        assert!(matches!(model.forward(&[7], &[2, 10], false, &mut rng), Err(Error::Bounds { .. })));
        assert!(matches!(model.forward(&[7], &[], false, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn packed_batch_matches_single_examples() {
        let emb = tiny_embeddings(14, 64);
        let model = init_model(&ModelConfig::desk(14, 3), &emb).unwrap();
        let exs = [
            TrainingExample { context_ids: vec![4, 6, 7], response_ids: vec![8, 9, 3] },
            TrainingExample { context_ids: vec![4, 10], response_ids: vec![11, 3] },
        ];
        let packed = model.forward_batch(&Batch::from_examples(&exs), None).unwrap();
        let mut row = 0;
        for ex in &exs {
            let single = model.forward_batch(&Batch::from_examples([ex]), None).unwrap();
            for r in 0..single.nrows() {
                for (a, b) in packed.row(row).iter().zip(single.row(r)) {
                    assert!((a - b).abs() < 1e-12);
                }
                row += 1;
            }
        }
        let table = TargetTable::one_hot(14);
        let (loss, grads) = model.loss_and_gradients(&Batch::from_examples(&exs), &table, &CrossEntropy, None).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), model.params.len());
    }
}
