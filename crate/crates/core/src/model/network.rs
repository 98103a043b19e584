//! Forward computation of the two-level encoder, both heads and both losses.

use rand::RngCore;

use super::params::{ModelParams, COH_B, COH_W, SEG_B, SEG_W, SENTENCE_POS, SS_EMB, TOKEN_POS};
use super::ModelConfig;
use crate::data::SnippetBatch;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Clamp applied to probabilities before the log in the segmentation loss.
pub const NLL_EPS: f64 = 1e-12;

/// Score given to masked attention logits.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, ops recorded for backward.
    Train,
    /// No dropout, nothing recorded.
    Eval,
}

/// Per-parameter gradients, aligned with [`ModelParams::names`].
/// `None` marks parameters the loss does not depend on.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get<'g>(&'g self, params: &ModelParams<F>, name: &str) -> Option<&'g [F]> {
        self.grads[params.position(name)?].as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub j_seg: F,
    pub j_coh: Option<F>,
    /// `n × k × 2`; component 0 is the boundary probability.
    pub probs: Tensor<F>,
    /// `n × d_model` snippet encodings of the original batch.
    pub snippet_encodings: Tensor<F>,
    pub corrupt_encodings: Option<Tensor<F>>,
    /// `n × 2` coherence scores (original, corrupt).
    pub coherence: Option<Tensor<F>>,
}

/// Parameter handles on one tape.
pub struct Bound {
    vars: Vec<Var>,
    s0: Var,
}

/// Dropout rate plus the generator that draws masks; no generator means eval.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn train(p: f64, rng: &'r mut dyn RngCore) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    fn apply<F: Real>(&mut self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => tape.dropout(x, self.p, &mut **rng),
            _ => Ok(x),
        }
    }
}

/// A model configuration bound to its parameters and embedding table.
#[derive(Clone, Copy)]
pub struct Network<'m, F: Real> {
    pub config: &'m ModelConfig,
    pub params: &'m ModelParams<F>,
    pub table: &'m EmbeddingTable,
}

impl<'m, F: Real> Network<'m, F> {
    pub fn new(config: &'m ModelConfig, params: &'m ModelParams<F>, table: &'m EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.d_e {
            return Err(Error::Config(format!(
                "embedding dim {} does not match model d_e {}",
                table.dim(),
                config.d_e
            )));
        }
        params.check_against(config)?;
        Ok(Network { config, params, table })
    }

    pub fn bind(&self, tape: &mut Tape<'m, F>) -> Bound {
        let vars = self.params.tensors().iter().map(|t| tape.param(t)).collect();
        let s0 = tape.param(self.params.s0());
        Bound { vars, s0 }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        bound.vars[i]
    }

    fn check_batch(&self, batch: &SnippetBatch) -> Result<()> {
        if batch.k > self.config.k || batch.t > self.config.t || batch.n == 0 {
            return Err(Error::shape(
                "snippet batch",
                &[batch.n, batch.k, batch.t],
                &[self.config.k, self.config.t],
            ));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= self.table.len()) {
            return Err(Error::Contract(format!(
                "token id {bad} outside the {}-row embedding table",
                self.table.len()
            )));
        }
        Ok(())
    }

    /// Token-level encoder: one `d_model` vector per sentence, `(n·k) × d_model`.
    ///
    /// Tokens are word vectors concatenated with learned position vectors;
    /// the learned sentence-start row replaces the table row at position 0.
    /// The output is the transformed sentence-start token.
    pub fn encode_sentences(
        &self,
        tape: &mut Tape<'m, F>,
        bound: &Bound,
        batch: &SnippetBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let (d_e, d) = (self.config.d_e, self.config.d_model());
        let seqs = batch.n * batch.k;
        let len = batch.t + 1;

        let mut words = Vec::with_capacity(seqs * batch.t * d_e);
        for s in 0..seqs {
            for &id in &batch.token_ids[s * len + 1..(s + 1) * len] {
                words.extend(self.table.row(id).iter().map(|&v| F::lit(v as f64)));
            }
        }
        let ss = tape.gather(self.var(bound, SS_EMB), &vec![0; seqs])?;
        let ss = tape.reshape(ss, [seqs, 1, d_e])?;
        let x = if batch.t > 0 {
            let words = tape.constant([seqs, batch.t, d_e], words)?;
            tape.concat(&[ss, words], 1)?
        } else {
            ss
        };
        let positions: Vec<usize> = (0..seqs).flat_map(|_| 0..len).collect();
        let pos = tape.gather(self.var(bound, TOKEN_POS), &positions)?;
        let pos = tape.reshape(pos, [seqs, len, self.config.d_p])?;
        let x = tape.concat(&[x, pos], 2)?;
        let mut x = tape.reshape(x, [seqs * len, d])?;

        for l in 0..self.config.n_tt {
            let prefix = super::params::layer_prefix("token", l);
            x = self.encoder_layer(tape, bound, &prefix, x, seqs, len, &batch.token_mask, dropout)?;
        }
        let first: Vec<usize> = (0..seqs).map(|s| s * len).collect();
        tape.gather(x, &first)
    }

    /// Sentence-level encoder. Returns the snippet encoding `n × d_model`
    /// and the contextualized sentences `(n·k) × d_model`.
    ///
    /// The fixed snippet-start vector is prepended at position 0 and a
    /// learned position vector is added at every position `0..=k`.
    pub fn contextualize(
        &self,
        tape: &mut Tape<'m, F>,
        bound: &Bound,
        sentences: Var,
        batch: &SnippetBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        let d = self.config.d_model();
        let (n, k) = (batch.n, batch.k);
        if tape.shape(sentences) != [n * k, d] {
            return Err(Error::shape("contextualize", tape.shape(sentences), &[n * k, d]));
        }
        let len = k + 1;
        let s0 = tape.gather(bound.s0, &vec![0; n])?;
        let s0 = tape.reshape(s0, [n, 1, d])?;
        let sent = tape.reshape(sentences, [n, k, d])?;
        let x = tape.concat(&[s0, sent], 1)?;
        let x = tape.reshape(x, [n * len, d])?;
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = tape.gather(self.var(bound, SENTENCE_POS), &positions)?;
        let mut x = tape.add(x, pos)?;

        let mut mask = Vec::with_capacity(n * len);
        for row in batch.sentence_mask.chunks_exact(k) {
            mask.push(true);
            mask.extend_from_slice(row);
        }
        for l in 0..self.config.n_ts {
            let prefix = super::params::layer_prefix("sentence", l);
            x = self.encoder_layer(tape, bound, &prefix, x, n, len, &mask, dropout)?;
        }
        let heads: Vec<usize> = (0..n).map(|i| i * len).collect();
        let rest: Vec<usize> = (0..n).flat_map(|i| (1..len).map(move |j| i * len + j)).collect();
        Ok((tape.gather(x, &heads)?, tape.gather(x, &rest)?))
    }

    /// Softmax boundary classifier, `(n·k) × 2`.
    pub fn segment_classify(&self, tape: &mut Tape<'m, F>, bound: &Bound, ss: Var) -> Result<Var> {
        let logits = tape.matmul(ss, self.var(bound, SEG_W))?;
        let logits = tape.add_row(logits, self.var(bound, SEG_B))?;
        tape.softmax(logits, 1)
    }

    /// Scalar coherence logit per snippet, `n × 1`.
    pub fn coherence_logits(&self, tape: &mut Tape<'m, F>, bound: &Bound, ss0: Var) -> Result<Var> {
        let y = tape.matmul(ss0, self.var(bound, COH_W))?;
        tape.add_row(y, self.var(bound, COH_B))
    }

    /// Pairwise-softmax coherence of original vs corrupt snippets, `n × 2`.
    pub fn coherence_scores(&self, tape: &mut Tape<'m, F>, bound: &Bound, ss0: Var, ss0_bar: Var) -> Result<Var> {
        let a = self.coherence_logits(tape, bound, ss0)?;
        let b = self.coherence_logits(tape, bound, ss0_bar)?;
        let pair = tape.concat(&[a, b], 1)?;
        tape.softmax(pair, 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_layer(
        &self,
        tape: &mut Tape<'m, F>,
        bound: &Bound,
        prefix: &str,
        x: Var,
        seqs: usize,
        len: usize,
        key_mask: &[bool],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let d = self.config.d_model();
        let h = self.config.heads;
        let dh = d / h;
        let p = |name: &str| self.var(bound, &format!("{prefix}.{name}"));

        let project = |tape: &mut Tape<'m, F>, w: &str, b: &str| -> Result<Var> {
            let y = tape.matmul(x, p(w))?;
            let y = tape.add_row(y, p(b))?;
            let y = tape.reshape(y, [seqs, len, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, [seqs * h, len, dh])
        };
        let q = project(tape, "attn.wq", "attn.bq")?;
        let k = project(tape, "attn.wk", "attn.bk")?;
        let v = project(tape, "attn.wv", "attn.bv")?;

        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, F::lit(1.0 / (dh as f64).sqrt()));
        if key_mask.iter().any(|&m| !m) {
            let mut fill = Vec::with_capacity(seqs * h * len * len);
            for s in 0..seqs {
                let keys = &key_mask[s * len..(s + 1) * len];
                for _ in 0..h * len {
                    fill.extend(keys.iter().map(|&m| !m));
                }
            }
            scores = tape.masked_fill(scores, fill, F::lit(MASKED_LOGIT))?;
        }
        let attn = tape.softmax(scores, 2)?;
        let attn = dropout.apply(tape, attn)?;
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, [seqs, h, len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, [seqs * len, d])?;
        let out = tape.matmul(ctx, p("attn.wo"))?;
        let out = tape.add_row(out, p("attn.bo"))?;

        let res = tape.add(x, out)?;
        let x1 = tape.layer_norm(res, p("ln1.g"), p("ln1.b"))?;
        let f = tape.matmul(x1, p("ff1.w"))?;
        let f = tape.add_row(f, p("ff1.b"))?;
        let f = tape.relu(f);
        let f = dropout.apply(tape, f)?;
        let f = tape.matmul(f, p("ff2.w"))?;
        let f = tape.add_row(f, p("ff2.b"))?;
        let res = tape.add(x1, f)?;
        tape.layer_norm(res, p("ln2.g"), p("ln2.b"))
    }

    fn dropout_for<'r>(&self, mode: Mode, rng: Option<&'r mut dyn RngCore>) -> Result<Dropout<'r>> {
        match (mode, rng) {
            (Mode::Eval, _) => Ok(Dropout::eval()),
            (Mode::Train, Some(rng)) => Ok(Dropout::train(self.config.dropout, rng)),
            (Mode::Train, None) if self.config.dropout == 0.0 => Ok(Dropout::eval()),
            (Mode::Train, None) => Err(Error::Contract("train mode with dropout needs a generator".into())),
        }
    }

    fn tape_for(mode: Mode) -> Tape<'m, F> {
        match mode {
            Mode::Train => Tape::new(),
            Mode::Eval => Tape::no_grad(),
        }
    }

    /// Runs both encoders and the classifier; `corrupt` must be given
    /// exactly when coherence is enabled and `mode` is train.
    pub fn forward(
        &self,
        batch: &SnippetBatch,
        corrupt: Option<&SnippetBatch>,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput<F>> {
        let want_corrupt = self.config.coherence_enabled && mode == Mode::Train;
        if corrupt.is_some() != want_corrupt {
            return Err(Error::Contract(format!(
                "corrupt batch must be supplied iff coherence is enabled in train mode (enabled: {}, mode: {mode:?})",
                self.config.coherence_enabled
            )));
        }
        let mut dropout = self.dropout_for(mode, rng)?;
        let mut tape = Self::tape_for(mode);
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, batch, &mut dropout)?;
        let (ss0, ss) = self.contextualize(&mut tape, &bound, sent, batch, &mut dropout)?;
        let probs = self.segment_classify(&mut tape, &bound, ss)?;
        let j_seg = segmentation_loss(&mut tape, probs, &batch.labels, &batch.loss_mask)?;

        let mut out = ForwardOutput {
            j_seg: tape.scalar(j_seg),
            j_coh: None,
            probs: tape.tensor(probs).reshape([batch.n, batch.k, 2])?,
            snippet_encodings: tape.tensor(ss0),
            corrupt_encodings: None,
            coherence: None,
        };
        if let Some(corrupt) = corrupt {
            check_pairing(batch, corrupt)?;
            let sent_bar = self.encode_sentences(&mut tape, &bound, corrupt, &mut dropout)?;
            let (ss0_bar, _) = self.contextualize(&mut tape, &bound, sent_bar, corrupt, &mut dropout)?;
            let coh = self.coherence_scores(&mut tape, &bound, ss0, ss0_bar)?;
            let j_coh = coherence_loss(&mut tape, coh, self.config.delta_coh)?;
            out.j_coh = Some(tape.scalar(j_coh));
            out.corrupt_encodings = Some(tape.tensor(ss0_bar));
            out.coherence = Some(tape.tensor(coh));
        }
        Ok(out)
    }

    /// `J_seg` and its gradient with respect to every parameter.
    pub fn segmentation_gradients(
        &self,
        batch: &SnippetBatch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(F, Gradients<F>)> {
        let mut dropout = self.dropout_for(Mode::Train, rng)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, batch, &mut dropout)?;
        let (_, ss) = self.contextualize(&mut tape, &bound, sent, batch, &mut dropout)?;
        let probs = self.segment_classify(&mut tape, &bound, ss)?;
        let loss = segmentation_loss(&mut tape, probs, &batch.labels, &batch.loss_mask)?;
        self.finish(tape, &bound, loss)
    }

    /// `J_coh` over original/corrupt pairs and its gradient.
    pub fn coherence_gradients(
        &self,
        original: &SnippetBatch,
        corrupt: &SnippetBatch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(F, Gradients<F>)> {
        check_pairing(original, corrupt)?;
        let mut dropout = self.dropout_for(Mode::Train, rng)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, original, &mut dropout)?;
        let (ss0, _) = self.contextualize(&mut tape, &bound, sent, original, &mut dropout)?;
        let sent_bar = self.encode_sentences(&mut tape, &bound, corrupt, &mut dropout)?;
        let (ss0_bar, _) = self.contextualize(&mut tape, &bound, sent_bar, corrupt, &mut dropout)?;
        let coh = self.coherence_scores(&mut tape, &bound, ss0, ss0_bar)?;
        let loss = coherence_loss(&mut tape, coh, self.config.delta_coh)?;
        self.finish(tape, &bound, loss)
    }

    fn finish(&self, mut tape: Tape<'m, F>, bound: &Bound, loss: Var) -> Result<(F, Gradients<F>)> {
        tape.backward(loss)?;
        let grads = bound.vars.iter().map(|&v| tape.grad(v).map(<[F]>::to_vec)).collect();
        Ok((tape.scalar(loss), Gradients { grads }))
    }

    /// Eval-mode boundary probability of every batch sentence, `n·k` values.
    pub fn boundary_probabilities(&self, batch: &SnippetBatch) -> Result<Vec<F>> {
        let mut tape = Tape::no_grad();
        let mut dropout = Dropout::eval();
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, batch, &mut dropout)?;
        let (_, ss) = self.contextualize(&mut tape, &bound, sent, batch, &mut dropout)?;
        let probs = self.segment_classify(&mut tape, &bound, ss)?;
        Ok(tape.value(probs).chunks_exact(2).map(|p| p[0]).collect())
    }

    /// Eval-mode snippet encodings, `n × d_model`.
    pub fn snippet_encodings(&self, batch: &SnippetBatch) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let mut dropout = Dropout::eval();
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, batch, &mut dropout)?;
        let (ss0, _) = self.contextualize(&mut tape, &bound, sent, batch, &mut dropout)?;
        Ok(tape.tensor(ss0))
    }

    /// Eval-mode raw coherence logit per snippet.
    pub fn coherence_logit_values(&self, batch: &SnippetBatch) -> Result<Vec<F>> {
        let mut tape = Tape::no_grad();
        let mut dropout = Dropout::eval();
        let bound = self.bind(&mut tape);
        let sent = self.encode_sentences(&mut tape, &bound, batch, &mut dropout)?;
        let (ss0, _) = self.contextualize(&mut tape, &bound, sent, batch, &mut dropout)?;
        let y = self.coherence_logits(&mut tape, &bound, ss0)?;
        Ok(tape.value(y).to_vec())
    }
}

fn check_pairing(original: &SnippetBatch, corrupt: &SnippetBatch) -> Result<()> {
    if (original.n, original.k, original.t) != (corrupt.n, corrupt.k, corrupt.t) {
        return Err(Error::shape(
            "coherence pairs",
            &[original.n, original.k, original.t],
            &[corrupt.n, corrupt.k, corrupt.t],
        ));
    }
    Ok(())
}

/// Summed negative log-likelihood of the gold labels over unmasked sentences.
pub fn segmentation_loss<F: Real>(tape: &mut Tape<'_, F>, probs: Var, labels: &[u8], loss_mask: &[bool]) -> Result<Var> {
    if labels.len() != loss_mask.len() || tape.shape(probs) != [labels.len(), 2] {
        return Err(Error::shape("segmentation_loss", tape.shape(probs), &[labels.len(), loss_mask.len()]));
    }
    // Component 0 is the boundary class.
    let index: Vec<usize> = labels.iter().map(|&y| if y == 1 { 0 } else { 1 }).collect();
    let picked = tape.pick(probs, &index)?;
    let logp = tape.ln_clamped(picked, F::lit(NLL_EPS));
    let mask = loss_mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
    let masked = tape.mul_const(logp, mask)?;
    let total = tape.sum(masked);
    Ok(tape.neg(total))
}

/// Mean over pairs of `max(0, δ − (coh(S) − coh(S̄)))`.
pub fn coherence_loss<F: Real>(tape: &mut Tape<'_, F>, coh: Var, delta: f64) -> Result<Var> {
    let n = match tape.shape(coh) {
        [n, 2] => *n,
        s => return Err(Error::shape("coherence_loss", s, &[2])),
    };
    let contrast = tape.constant([2, 1], vec![F::one(), -F::one()])?;
    let diff = tape.matmul(coh, contrast)?;
    let margin = tape.neg(diff);
    let margin = tape.add_scalar(margin, F::lit(delta));
    let hinge = tape.relu(margin);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, F::lit(1.0 / n as f64)))
}
