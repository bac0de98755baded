use serde::{Deserialize, Serialize};

use super::decode::{classify_decoded, greedy_decode_with, Decoded};
use super::decoder::{Decoder, DecoderShape};
use super::encoder::Encoder;
use super::expert::{Conditioning, EcNormalization, ExpertCommittee};
use super::init::{xavier, ParamSource};
use super::vocab::{Vocabulary, BOS, BOS_WORD, EOS, EOS_WORD};
use crate::error::{contract, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, DEFAULT_PINV_ITERS};
use crate::rng::Rng;

/// How patches enter the model space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Generalist plus per-task experts mixed by the router.
    #[default]
    ExpertConsultation,
    /// The generalist alone; no experts are ever registered.
    SharedLinear,
}

/// What turns the encoder memory into a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Autoregressive word decoder.
    #[default]
    Decoder,
    /// Mean-pooled memory into one logit per seen class.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_f: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
    pub landmarks: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    /// Router hidden width; `None` means `d_model`.
    pub router_hidden: Option<usize>,
    pub ln_eps: f64,
    pub pinv_iters: usize,
    pub projection: Projection,
    pub head: HeadKind,
    pub ec_normalization: EcNormalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_f: 16,
            d_model: 32,
            d_text: 16,
            heads: 4,
            landmarks: 8,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            router_hidden: None,
            ln_eps: 1e-5,
            pinv_iters: DEFAULT_PINV_ITERS,
            projection: Projection::default(),
            head: HeadKind::default(),
            ec_normalization: EcNormalization::default(),
        }
    }
}

impl ModelConfig {
    /// Full-width sizes (1024-d patch features, 512-d model, 768-d text).
    pub fn paper() -> Self {
        Self {
            d_f: 1024,
            d_model: 512,
            d_text: 768,
            heads: 8,
            landmarks: 256,
            ..Self::default()
        }
    }

    pub fn router_width(&self) -> usize {
        self.router_hidden.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_model == 0 || self.d_text == 0 {
            return contract("model dimensions must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return contract("d_model must be a multiple of the head count");
        }
        if self.landmarks == 0 || self.pinv_iters == 0 || self.ffn_mult == 0 {
            return contract("landmarks, pinv_iters and ffn_mult must be positive");
        }
        if self.ln_eps <= 0.0 {
            return contract("ln_eps must be positive");
        }
        Ok(())
    }
}

/// Mean-pooled classification head with one row per class seen so far.
#[derive(Clone, Debug)]
pub struct LinearHead {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub enum Head {
    Decoder(Decoder),
    Linear(LinearHead),
}

/// Teacher-forced logits for one bag with the matching targets.
pub struct Forced {
    /// `steps x width` logits.
    pub logits: Var,
    pub targets: Vec<usize>,
}

/// Maps a word to its frozen text embedding.
pub type WordEmbedder<'a> = &'a dyn Fn(&str) -> Vec<f64>;

/// The full network: parameters, vocabulary and layer handles.
#[derive(Clone, Debug)]
pub struct Cosformer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    committee: ExpertCommittee,
    encoder: Encoder,
    head: Head,
}

impl Cosformer {
    pub fn new(config: ModelConfig, embed: WordEmbedder<'_>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let committee = ExpertCommittee::new(
            &mut store,
            config.d_f,
            config.d_model,
            config.router_width(),
            config.ec_normalization,
            rng,
        );
        let (encoder, head) = {
            let mut src = ParamSource::Create {
                store: &mut store,
                rng: &mut *rng,
            };
            Self::build_layers(&config, &mut src)?
        };
        let mut model = Self {
            config,
            store,
            vocab: Vocabulary::new(),
            committee,
            encoder,
            head,
        };
        if let Head::Decoder(d) = &model.head {
            let d = d.clone();
            model.store.set_frozen(d.word_table(), true);
            let emb = model.embed_rows(&[BOS_WORD, EOS_WORD], embed)?;
            let rows = xavier(rng, 2, model.config.d_model);
            d.grow(&mut model.store, &emb, &rows);
        }
        Ok(model)
    }

    fn build_layers(config: &ModelConfig, src: &mut ParamSource<'_>) -> Result<(Encoder, Head)> {
        let encoder = Encoder::build(
            src,
            config.encoder_layers,
            config.d_model,
            config.heads,
            config.landmarks,
            config.pinv_iters,
            config.ln_eps,
        )?;
        let head = match config.head {
            HeadKind::Decoder => Head::Decoder(Decoder::build(
                src,
                &DecoderShape {
                    layers: config.decoder_layers,
                    d_model: config.d_model,
                    d_text: config.d_text,
                    heads: config.heads,
                    ffn_hidden: config.ffn_mult * config.d_model,
                    pinv_iters: config.pinv_iters,
                    eps: config.ln_eps,
                },
            )?),
            HeadKind::Linear => Head::Linear(LinearHead {
                w: src.param("lin.w", |_| Tensor::zeros(0, config.d_model))?,
                b: src.param("lin.b", |_| Tensor::zeros(0, 1))?,
            }),
        };
        Ok((encoder, head))
    }

    /// Rebuilds a model around stored parameters and vocabulary.
    pub fn from_parts(config: ModelConfig, store: ParamStore, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let committee = ExpertCommittee::attach(
            &store,
            config.d_f,
            config.d_model,
            config.router_width(),
            config.ec_normalization,
        )?;
        let (encoder, head) = Self::build_layers(&config, &mut ParamSource::Attach(&store))?;
        let model = Self {
            config,
            store,
            vocab,
            committee,
            encoder,
            head,
        };
        let expected = match model.config.projection {
            Projection::ExpertConsultation => model.vocab.task_count(),
            Projection::SharedLinear => 0,
        };
        if model.committee.expert_count() != expected {
            return contract("expert count does not match the registered tasks");
        }
        if model.output_width() != model.expected_width() {
            return contract("output head width does not match the vocabulary");
        }
        Ok(model)
    }

    fn embed_rows(&self, words: &[&str], embed: WordEmbedder<'_>) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = words.iter().map(|w| embed(w)).collect();
        let t = Tensor::from_rows(&rows)?;
        if t.cols() != self.config.d_text {
            return contract(format!(
                "word embeddings have {} dims, expected {}",
                t.cols(),
                self.config.d_text
            ));
        }
        Ok(t)
    }

    pub fn committee(&self) -> &ExpertCommittee {
        &self.committee
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn task_count(&self) -> usize {
        self.vocab.task_count()
    }

    /// Classes registered for `task`.
    pub fn class_count(&self, task: usize) -> usize {
        self.vocab.labels().get(&task).map_or(0, Vec::len)
    }

    /// Offset of `task`'s first class among all classes seen so far.
    pub fn class_offset(&self, task: usize) -> usize {
        self.vocab.labels().range(..task).map(|(_, c)| c.len()).sum()
    }

    fn expected_width(&self) -> usize {
        match self.head {
            Head::Decoder(_) => self.vocab.len(),
            Head::Linear(_) => self.vocab.labels().values().map(Vec::len).sum(),
        }
    }

    /// Width of the unrestricted logit vector.
    pub fn output_width(&self) -> usize {
        match &self.head {
            Head::Decoder(d) => d.vocab_size(&self.store),
            Head::Linear(l) => self.store.value(l.w).rows(),
        }
    }

    /// Registers a task: vocabulary words, output rows and, under Expert
    /// Consultation, a fresh expert with its router row.
    pub fn add_task(
        &mut self,
        task: usize,
        labels: &[Vec<String>],
        embed: WordEmbedder<'_>,
        rng: &mut Rng,
    ) -> Result<()> {
        if task != self.task_count() {
            return contract(format!(
                "task {task} registered out of order (expected {})",
                self.task_count()
            ));
        }
        let before = self.vocab.len();
        self.vocab.register_task(task, labels)?;
        let d = self.config.d_model;
        match &self.head {
            Head::Decoder(dec) => {
                let dec = dec.clone();
                let new: Vec<&str> = self.vocab.words()[before..]
                    .iter()
                    .map(String::as_str)
                    .collect();
                if !new.is_empty() {
                    let emb = self.embed_rows(&new, embed)?;
                    let rows = xavier(rng, new.len(), d);
                    dec.grow(&mut self.store, &emb, &rows);
                }
            }
            Head::Linear(l) => {
                let (w, b) = (l.w, l.b);
                let rows = xavier(rng, labels.len(), d);
                self.store.append_rows(w, &rows);
                self.store.append_rows(b, &Tensor::zeros(labels.len(), 1));
            }
        }
        if self.config.projection == Projection::ExpertConsultation {
            self.committee.add_expert(&mut self.store, rng);
        }
        Ok(())
    }

    /// Freezes experts and router rows of tasks before `task`.
    pub fn freeze_past(&mut self, task: usize) {
        self.committee.freeze_before(&mut self.store, task);
    }

    /// Encoder memory for a bag on an existing graph.
    pub fn encode_on(&self, g: &mut Graph, bag: &Tensor, cond: &Conditioning) -> Result<Var> {
        let z = g.constant(bag.clone());
        let zp = self.committee.project(g, &self.store, z, cond)?;
        self.encoder.forward(g, &self.store, zp)
    }

    pub fn encode(&self, bag: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.encode_on(&mut g, bag, cond)?;
        Ok(g.value(m).clone())
    }

    /// Teacher-forced logits for a labelled bag. With the decoder, one row per
    /// label word plus the EOS step. With the linear head, a single row; under
    /// a task-aware condition it is restricted to that task's classes.
    pub fn forced_on(
        &self,
        g: &mut Graph,
        bag: &Tensor,
        task: usize,
        class: usize,
        cond: &Conditioning,
    ) -> Result<Forced> {
        let memory = self.encode_on(g, bag, cond)?;
        match &self.head {
            Head::Decoder(dec) => {
                let label = self
                    .vocab
                    .label(task, class)
                    .ok_or_else(|| crate::Error::Contract(format!("no label for {task}/{class}")))?;
                let mut prefix = vec![BOS];
                prefix.extend_from_slice(label);
                let mut targets = label.to_vec();
                targets.push(EOS);
                let h = dec.hidden(g, &self.store, memory, &prefix)?;
                let logits = dec.logits(g, &self.store, h);
                Ok(Forced { logits, targets })
            }
            Head::Linear(l) => {
                if class >= self.class_count(task) {
                    return contract(format!("no class {class} in task {task}"));
                }
                let logits = self.linear_logits(g, l, memory);
                Ok(match cond.task {
                    Some(t) if t != task => {
                        return contract(format!("bag of task {task} conditioned on task {t}"))
                    }
                    Some(_) => Forced {
                        logits: g.slice_cols(logits, self.class_offset(task), self.class_count(task)),
                        targets: vec![class],
                    },
                    None => Forced {
                        logits,
                        targets: vec![self.class_offset(task) + class],
                    },
                })
            }
        }
    }

    fn linear_logits(&self, g: &mut Graph, l: &LinearHead, memory: Var) -> Var {
        let pooled = g.mean_rows(memory);
        let w = g.param(&self.store, l.w);
        let b = g.param(&self.store, l.b);
        let out = g.matmul_nt(pooled, w);
        let bt = g.transpose(b);
        g.add_row(out, bt)
    }

    /// Teacher-forced logits as a plain tensor.
    pub fn forced_logits(
        &self,
        bag: &Tensor,
        task: usize,
        class: usize,
        cond: &Conditioning,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forced_on(&mut g, bag, task, class, cond)?;
        Ok(g.value(f.logits).clone())
    }

    /// Next-token logits after `prefix`, given an encoder memory.
    pub fn decode_step(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let Head::Decoder(dec) = &self.head else {
            return contract("decode_step needs the decoder head");
        };
        if prefix.first() != Some(&BOS) {
            return contract("prefix must start with BOS");
        }
        if let Some(bad) = prefix.iter().find(|&&t| t >= self.vocab.len()) {
            return contract(format!("unknown token id {bad}"));
        }
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let h = dec.hidden(&mut g, &self.store, m, prefix)?;
        let last = g.slice_rows(h, prefix.len() - 1, 1);
        let l = dec.logits(&mut g, &self.store, last);
        Ok(g.value(l).data().to_vec())
    }

    /// Greedy decoding; `task` selects Words-of-Interest masking.
    pub fn greedy_decode(
        &self,
        memory: &Tensor,
        task: Option<usize>,
        max_len: usize,
    ) -> Result<Decoded> {
        let woi = match task {
            Some(t) => Some(
                self.vocab
                    .woi(t)
                    .ok_or_else(|| crate::Error::Contract(format!("unknown task {t}")))?,
            ),
            None => None,
        };
        greedy_decode_with(|p| self.decode_step(memory, p), woi, max_len)
    }

    /// Whether the model labels `bag` correctly. `cond.task` doubles as the
    /// TASK-IL task identity.
    pub fn is_correct(
        &self,
        bag: &Tensor,
        task: usize,
        class: usize,
        cond: &Conditioning,
        max_len: usize,
    ) -> Result<bool> {
        match &self.head {
            Head::Decoder(_) => {
                let memory = self.encode(bag, cond)?;
                let decoded = self.greedy_decode(&memory, cond.task, max_len)?;
                let truth = self
                    .vocab
                    .label(task, class)
                    .ok_or_else(|| crate::Error::Contract(format!("no label for {task}/{class}")))?;
                Ok(classify_decoded(&decoded, truth))
            }
            Head::Linear(_) => {
                let logits = self.forced_logits(bag, task, class, cond)?;
                let pred = super::decode::argmax(logits.data());
                let truth = match cond.task {
                    Some(_) => class,
                    None => self.class_offset(task) + class,
                };
                Ok(pred == truth)
            }
        }
    }

    /// Predicted label words for `bag`. The decoder emits them greedily; the
    /// linear head returns the words of its highest-scoring class.
    /// `cond.task` selects TASK-IL masking or class restriction.
    pub fn predict(&self, bag: &Tensor, cond: &Conditioning, max_len: usize) -> Result<Decoded> {
        match &self.head {
            Head::Decoder(_) => {
                let memory = self.encode(bag, cond)?;
                self.greedy_decode(&memory, cond.task, max_len)
            }
            Head::Linear(l) => {
                let classes: Vec<&Vec<usize>> = self.vocab.labels().values().flatten().collect();
                let (start, width) = match cond.task {
                    Some(t) => (self.class_offset(t), self.class_count(t)),
                    None => (0, classes.len()),
                };
                if width == 0 {
                    return contract("no class to predict");
                }
                let mut g = Graph::new();
                let memory = self.encode_on(&mut g, bag, cond)?;
                let logits = self.linear_logits(&mut g, l, memory);
                let pick = start + super::decode::argmax(&g.value(logits).data()[start..start + width]);
                Ok(Decoded {
                    tokens: classes[pick].clone(),
                    truncated: false,
                })
            }
        }
    }

    /// Representation fed to the output head: the decoder's first-step hidden
    /// state, or the pooled memory for the linear head.
    pub fn embedding(&self, bag: &Tensor, cond: &Conditioning) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = self.encode_on(&mut g, bag, cond)?;
        let v = match &self.head {
            Head::Decoder(dec) => {
                let h = dec.hidden(&mut g, &self.store, memory, &[BOS])?;
                g.slice_rows(h, 0, 1)
            }
            Head::Linear(_) => g.mean_rows(memory),
        };
        Ok(g.value(v).data().to_vec())
    }
}
