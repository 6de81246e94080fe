//! The structure-aware language model: encoder, syntax module, vocabulary,
//! and an optional classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenBatch, Vocab};
use crate::encoder::{ActivationValues, Encoder, EncoderConfig, LayerActivations};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::syntax::{
    inject_gold, phrase_embed, segment_phrases_with, PhraseEmbedding, PhraseSegmentation, SyntacticContexts,
    SyntaxModule,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::training::TrainConfig;
use crate::treebank::GoldSyntax;

/// Stream of the model-initialization generator.
const INIT_STREAM: u64 = 0;

/// Linear head over the mean-pooled top layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    classes: Vec<String>,
    weight: ParamId,
    bias: ParamId,
}

impl Classifier {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Data(format!("label `{label}` outside known classes {:?}", self.classes)))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Source of a sentence's distances and segmentation.
#[derive(Clone, Copy, Debug)]
pub enum Segmenter<'a, T> {
    /// Model distances, segmented at `lambda`.
    Induced { lambda: f64 },
    /// Model distances with a segmentation decided beforehand.
    Fixed(&'a PhraseSegmentation<T>),
    /// Gold distances and lowest-constituent spans.
    Gold(&'a GoldSyntax),
}

/// Structure quantities of one sentence inside a graph.
#[derive(Clone, Debug)]
pub struct SentenceStructure<T> {
    pub contexts: SyntacticContexts,
    /// `[n×1]`
    pub distances: Var,
    pub distance_values: Vec<T>,
    pub segmentation: PhraseSegmentation<T>,
    pub phrases: Vec<PhraseEmbedding>,
}

#[derive(Clone, Debug)]
pub struct StructureLm<T> {
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    encoder: Encoder,
    syntax: SyntaxModule,
    vocab: Vocab,
    classifier: Option<Classifier>,
}

impl<T: Scalar> StructureLm<T> {
    /// Fresh parameters, initialized from `config.seed`.
    pub fn new(vocab: Vocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let enc_cfg = config.encoder_config(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(enc_cfg.clone(), &mut store, &mut rng)?;
        let syntax = SyntaxModule::new(
            &mut store,
            enc_cfg.d_model,
            enc_cfg.structure_layer,
            config.alpha_init,
            &mut rng,
        )?;
        Ok(StructureLm {
            store,
            config,
            encoder,
            syntax,
            vocab,
            classifier: None,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_parts(
        vocab: Vocab,
        config: TrainConfig,
        store: ParamStore<T>,
        classes: Option<Vec<String>>,
    ) -> Result<Self> {
        config.validate()?;
        let enc_cfg = config.encoder_config(vocab.len());
        let encoder = Encoder::bind(enc_cfg.clone(), &store)?;
        let syntax = SyntaxModule::bind(&store, enc_cfg.d_model, enc_cfg.structure_layer)?;
        let classifier = match classes {
            Some(classes) => {
                let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
                    let id = store
                        .id(name)
                        .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
                    if store.value(id).shape() != shape {
                        return Err(Error::Integrity(format!("parameter `{name}` has the wrong shape")));
                    }
                    Ok(id)
                };
                let c = classes.len();
                Some(Classifier {
                    weight: get("cls.weight", &[enc_cfg.d_model, c])?,
                    bias: get("cls.bias", &[c])?,
                    classes,
                })
            }
            None => None,
        };
        let expected = encoder.params_up_to(enc_cfg.n_layers).len()
            + 1
            + syntax.param_ids().len()
            + classifier.as_ref().map_or(0, |c| c.param_ids().len());
        if store.len() != expected {
            return Err(Error::Integrity(format!(
                "store holds {} parameters, configuration expects {expected}",
                store.len()
            )));
        }
        Ok(StructureLm {
            store,
            config,
            encoder,
            syntax,
            vocab,
            classifier,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn syntax(&self) -> &SyntaxModule {
        &self.syntax
    }

    pub fn classifier(&self) -> Option<&Classifier> {
        self.classifier.as_ref()
    }

    /// Adds a zero-initialized classification head over `classes`.
    pub fn attach_classifier(&mut self, classes: Vec<String>) -> Result<()> {
        if self.classifier.is_some() {
            return Err(Error::Config("model already has a classification head".into()));
        }
        if classes.len() < 2 {
            return Err(Error::Data(format!("need at least two classes, got {}", classes.len())));
        }
        let d = self.encoder_config().d_model;
        let weight = self.store.add("cls.weight", Tensor::zeros(&[d, classes.len()]))?;
        let bias = self.store.add("cls.bias", Tensor::zeros(&[classes.len()]))?;
        self.classifier = Some(Classifier { classes, weight, bias });
        Ok(())
    }

    /// Encodes every row of `batch`; `rng` enables dropout.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        batch: &TokenBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<LayerActivations>> {
        self.encoder.encode(g, &self.store, batch, rng)
    }

    /// Encodes one unpadded id sequence.
    pub fn encode_ids(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<LayerActivations> {
        self.encoder.forward(g, &self.store, ids, ids.len(), None)
    }

    /// Contexts, distances, segmentation and phrase embeddings for one sentence.
    pub fn sentence_structure(
        &self,
        g: &mut Graph<T>,
        acts: &LayerActivations,
        segmenter: Segmenter<'_, T>,
    ) -> Result<SentenceStructure<T>> {
        let contexts = self.syntax.build_contexts(g, &self.store, acts)?;
        let (distances, distance_values, segmentation) = match segmenter {
            Segmenter::Induced { lambda } => {
                let d = self.syntax.distance_head(g, &self.store, contexts.word)?;
                let values = g.value(d).data().to_vec();
                let seg = segment_phrases_with(&values, lambda, self.config.opening);
                (d, values, seg)
            }
            Segmenter::Fixed(seg) => {
                let d = self.syntax.distance_head(g, &self.store, contexts.word)?;
                let values = g.value(d).data().to_vec();
                (d, values, seg.clone())
            }
            Segmenter::Gold(gold) => {
                let (values, seg) = inject_gold::<T>(gold, acts.len)?;
                let d = g.constant(Tensor::from_parts(vec![acts.len, 1], values.clone()));
                (d, values, seg)
            }
        };
        let phrases = phrase_embed(g, &segmentation, distances, contexts.word)?;
        Ok(SentenceStructure {
            contexts,
            distances,
            distance_values,
            segmentation,
            phrases,
        })
    }

    /// Class logits `[1×C]` from the mean of the top layer's real rows.
    pub fn class_logits(&self, g: &mut Graph<T>, acts: &LayerActivations) -> Result<Var> {
        let cls = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let rows: Vec<usize> = (0..acts.len).collect();
        let top = g.select_rows(acts.top(), &rows)?;
        let pooled = g.mean_rows(top)?;
        let pooled = g.reshape(pooled, &[1, self.encoder_config().d_model])?;
        let w = g.param(&self.store, cls.weight);
        let b = g.param(&self.store, cls.bias);
        let logits = g.matmul(pooled, w)?;
        g.add(logits, b)
    }

    /// Ids of `tokens`, truncated to `max_len`.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = self.vocab.encode(tokens);
        ids.truncate(self.encoder_config().max_len);
        ids
    }

    /// Model distances and segmentation at `lambda` for one sentence.
    pub fn induce(&self, tokens: &[String], lambda: f64) -> Result<(Vec<T>, PhraseSegmentation<T>)> {
        let ids = self.encode_tokens(tokens);
        let mut g = Graph::new();
        let acts = self.encode_ids(&mut g, &ids)?;
        let s = self.sentence_structure(&mut g, &acts, Segmenter::Induced { lambda })?;
        Ok((s.distance_values, s.segmentation))
    }

    /// Detached hidden states and attention maps of one sentence.
    pub fn activations(&self, tokens: &[String]) -> Result<ActivationValues<T>> {
        let ids = self.encode_tokens(tokens);
        let mut g = Graph::new();
        let acts = self.encode_ids(&mut g, &ids)?;
        Ok(ActivationValues::from_graph(&g, &acts))
    }

    /// Predicted class index for one sentence.
    pub fn predict(&self, tokens: &[String]) -> Result<usize> {
        let ids = self.encode_tokens(tokens);
        let mut g = Graph::new();
        let acts = self.encode_ids(&mut g, &ids)?;
        let logits = self.class_logits(&mut g, &acts)?;
        let row = g.value(logits).data();
        Ok(row
            .iter()
            .enumerate()
            .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }
}
