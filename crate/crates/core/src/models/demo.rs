//! Attention model for the default-token demonstration.
//!
//! The query reads the whole assembled sequence; attention may only land on
//! the candidate positions (default tokens plus the first few sentence
//! tokens). The attended candidates are encoded either by sum pooling or by a
//! position-aware dense encoder and then classified.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{DemoSequence, EmbeddingTable};
use crate::error::{Error, Result};
use crate::masking::SoftMask;
use crate::models::digest::{digest, ParameterDigest};
use crate::nn::{dense, glorot, push_dense, Bound, ParamSet};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    SumPool,
    PositionAware,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::SumPool => "sum-pool",
            EncoderVariant::PositionAware => "position-aware",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoArch {
    pub embed_dim: usize,
    pub embedding_std: f64,
    pub query_dim: usize,
    pub encoder_hidden: usize,
    pub candidates: usize,
    pub variant: EncoderVariant,
}

impl Default for DemoArch {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            embedding_std: 1.0,
            query_dim: 32,
            encoder_hidden: 32,
            candidates: 9,
            variant: EncoderVariant::PositionAware,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoAttentionModel<T> {
    pub arch: DemoArch,
    /// Fixed word vectors; never bound as trainable.
    pub embeddings: EmbeddingTable<T>,
    /// Query encoder and key projection.
    pub attention: ParamSet<T>,
    /// Candidate encoder and classifier head.
    pub downstream: ParamSet<T>,
}

impl<T: Scalar> DemoAttentionModel<T> {
    pub fn new(arch: DemoArch, embeddings: EmbeddingTable<T>, seed: u64) -> Self {
        let e = embeddings.dim();
        assert_eq!(e, arch.embed_dim, "embedding width must match the architecture");
        let mut rng = stream(seed, "demo/init");
        let mut attention = ParamSet::new();
        push_dense(&mut attention, &mut rng, "query.token", e, arch.query_dim);
        push_dense(&mut attention, &mut rng, "query.out", arch.query_dim, arch.query_dim);
        attention.push("key", glorot(&mut rng, e, arch.query_dim));

        let mut downstream = ParamSet::new();
        let enc_in = match arch.variant {
            EncoderVariant::SumPool => e,
            EncoderVariant::PositionAware => e * arch.candidates,
        };
        push_dense(&mut downstream, &mut rng, "encoder", enc_in, arch.encoder_hidden);
        push_dense(&mut downstream, &mut rng, "head", arch.encoder_hidden, 2);
        Self {
            arch,
            embeddings,
            attention,
            downstream,
        }
    }

    pub fn embedding_digest(&self) -> ParameterDigest {
        let mut p = ParamSet::new();
        p.push("embeddings", self.embeddings.rows.clone());
        digest(&p)
    }

    fn check(&self, seq: &DemoSequence) -> Result<()> {
        if seq.candidates.len() != self.arch.candidates {
            return Err(Error::Shape(format!(
                "{} attention candidates, model expects {}",
                seq.candidates.len(),
                self.arch.candidates
            )));
        }
        let v = self.embeddings.rows.rows();
        if let Some(&t) = seq.tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Shape(format!("token {t} outside the embedding table")));
        }
        Ok(())
    }

    fn rows(&self, ids: impl Iterator<Item = usize>) -> Tensor<T> {
        let e = self.embeddings.dim();
        let mut data = Vec::new();
        let mut n = 0;
        for id in ids {
            data.extend_from_slice(self.embeddings.row(id));
            n += 1;
        }
        Tensor::matrix(n, e, data)
    }

    fn candidate_values(&self, g: &mut Graph<T>, seq: &DemoSequence) -> Var {
        g.constant(self.rows(seq.candidates.iter().map(|&i| seq.tokens[i])))
    }

    /// Attention logits over the candidates, `[candidates]`.
    pub fn attention_scores(&self, g: &mut Graph<T>, b: &Bound, seq: &DemoSequence) -> Var {
        let all = g.constant(self.rows(seq.tokens.iter().copied()));
        let h = dense(g, b, "query.token", all);
        let h = g.relu(h);
        let pooled = g.max_over_rows(h);
        let q = dense(g, b, "query.out", pooled);
        let q = g.tanh(q);
        let qd = self.arch.query_dim;
        let q = g.reshape(q, &[qd, 1]);
        let cand = self.candidate_values(g, seq);
        let keys = g.matmul(cand, b.get("key"));
        let s = g.matmul(keys, q);
        let s = g.scale(s, T::lit(1.0 / (qd as f64).sqrt()));
        g.reshape(s, &[self.arch.candidates])
    }

    /// Softmax attention, `[candidates]`.
    pub fn attention_mask(&self, g: &mut Graph<T>, b: &Bound, seq: &DemoSequence) -> Var {
        let s = self.attention_scores(g, b, seq);
        g.softmax_rows(s)
    }

    /// Class logits given an attention mask over the candidates.
    pub fn downstream_logits(&self, g: &mut Graph<T>, b: &Bound, seq: &DemoSequence, mask: Var) -> Var {
        let values = self.candidate_values(g, seq);
        let weighted = g.mul_col(values, mask);
        let encoded = match self.arch.variant {
            EncoderVariant::SumPool => g.sum_rows(weighted),
            EncoderVariant::PositionAware => {
                let n = g.value(weighted).numel();
                g.reshape(weighted, &[n])
            }
        };
        let h = dense(g, b, "encoder", encoded);
        let h = g.tanh(h);
        dense(g, b, "head", h)
    }

    /// Class probabilities and the attention mask.
    pub fn forward(&self, seq: &DemoSequence) -> Result<(Vec<T>, SoftMask<T>)> {
        self.check(seq)?;
        let mut g = Graph::new();
        let ba = self.attention.bind(&mut g, false);
        let bd = self.downstream.bind(&mut g, false);
        let m = self.attention_mask(&mut g, &ba, seq);
        let logits = self.downstream_logits(&mut g, &bd, seq, m);
        let p = g.softmax_rows(logits);
        Ok((g.value(p).data.clone(), SoftMask::new(g.value(m).data.clone())?))
    }

    /// Class probabilities under an externally supplied mask.
    pub fn forward_with_mask(&self, seq: &DemoSequence, mask: &[T]) -> Result<Vec<T>> {
        self.check(seq)?;
        if mask.len() != self.arch.candidates {
            return Err(Error::Shape(format!("mask of length {}", mask.len())));
        }
        let mut g = Graph::new();
        let bd = self.downstream.bind(&mut g, false);
        let m = g.constant(Tensor::vector(mask.to_vec()));
        let logits = self.downstream_logits(&mut g, &bd, seq, m);
        let p = g.softmax_rows(logits);
        Ok(g.value(p).data.clone())
    }

    pub fn validate(&self, seq: &DemoSequence) -> Result<()> {
        self.check(seq)
    }
}

/// `demo_forward`: prediction plus the attention mask for diagnostics.
pub fn demo_forward<T: Scalar>(model: &DemoAttentionModel<T>, seq: &DemoSequence) -> Result<(Vec<T>, SoftMask<T>)> {
    model.forward(seq)
}
