//! Server-side text pipeline.
//!
//! Class prompts are tokenized and embedded by the frozen lookup table
//! (`g0`), the first `m` embedding rows of every prompt are replaced by the
//! class's trainable prefix `v_c`, and the frozen backbone (`g1`: one
//! single-head self-attention layer with a residual connection, mean-pool
//! over positions, then a two-layer tanh MLP) maps each sequence to a
//! `d`-dimensional feature. A class's text prototype is the mean of its `k`
//! prompt features.
//!
//! Only the prefixes are ever trained. The encoder exposes no mutable
//! access to its weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a64;
use crate::numerics::{contrastive_anchor_grad, loss::softmax_in_place, Matrix, RngStream, StreamId};

pub const DEFAULT_PROMPTS_PER_CLASS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

/// Frozen token embedding table and backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    vocab_size: usize,
    embed_dim: usize,
    output_dim: usize,
    embedding: Matrix,
    query: Matrix,
    key: Matrix,
    value: Matrix,
    attn_out: Matrix,
    mlp_hidden: Matrix,
    mlp_hidden_bias: Vec<f64>,
    mlp_out: Matrix,
    mlp_out_bias: Vec<f64>,
}

/// Intermediates of one sequence's forward pass.
struct SequenceCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    hidden: Vec<f64>,
}

impl FrozenEncoder {
    pub fn new(spec: &EncoderSpec, output_dim: usize, seed: u64) -> Result<Self> {
        if spec.vocab_size == 0 || spec.embed_dim == 0 || spec.hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut rng = RngStream::new(seed, StreamId::global("text-encoder"));
        let e = spec.embed_dim;
        let h = spec.hidden_dim;
        let attn_std = 1.0 / (e as f64).sqrt();
        Ok(Self {
            vocab_size: spec.vocab_size,
            embed_dim: e,
            output_dim,
            embedding: rng.normal_matrix(spec.vocab_size, e, 1.0),
            query: rng.normal_matrix(e, e, attn_std),
            key: rng.normal_matrix(e, e, attn_std),
            value: rng.normal_matrix(e, e, attn_std),
            attn_out: rng.normal_matrix(e, e, attn_std),
            mlp_hidden: rng.normal_matrix(e, h, attn_std),
            mlp_hidden_bias: vec![0.0; h],
            mlp_out: rng.normal_matrix(h, output_dim, 1.0 / (h as f64).sqrt()),
            mlp_out_bias: vec![0.0; output_dim],
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("encoder serialization cannot fail")
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.vocab_size as u64) as usize
    }

    /// `g0`: token ids to an `n × d'` embedding matrix.
    pub fn embed_tokens(&self, tokens: &[String]) -> Matrix {
        let ids: Vec<usize> = tokens.iter().map(|t| self.token_id(t)).collect();
        self.embedding.select_rows(&ids)
    }

    fn check_sequence(&self, seq: &Matrix) -> Result<()> {
        if seq.cols() != self.embed_dim || seq.rows() == 0 {
            return Err(Error::Shape(format!(
                "sequence {:?} for embed_dim {}",
                seq.shape(),
                self.embed_dim
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Vec<f64>, SequenceCache)> {
        self.check_sequence(x)?;
        let scale = 1.0 / (self.embed_dim as f64).sqrt();
        let q = x.matmul(&self.query)?;
        let k = x.matmul(&self.key)?;
        let v = x.matmul(&self.value)?;
        let mut attn = q.matmul_t(&k)?;
        attn.scale(scale);
        for i in 0..attn.rows() {
            softmax_in_place(attn.row_mut(i));
        }
        let mixed = attn.matmul(&v)?.matmul(&self.attn_out)?;
        // Mean-pool of the residual stream x + mixed.
        let n = x.rows() as f64;
        let pooled: Vec<f64> = x
            .column_sums()
            .iter()
            .zip(mixed.column_sums())
            .map(|(a, b)| (a + b) / n)
            .collect();
        let hidden: Vec<f64> = vec_matmul(&pooled, &self.mlp_hidden)
            .iter()
            .zip(&self.mlp_hidden_bias)
            .map(|(u, b)| (u + b).tanh())
            .collect();
        let out: Vec<f64> = vec_matmul(&hidden, &self.mlp_out)
            .iter()
            .zip(&self.mlp_out_bias)
            .map(|(o, b)| o + b)
            .collect();
        Ok((
            out,
            SequenceCache {
                q,
                k,
                v,
                attn,
                hidden,
            },
        ))
    }

    /// `g1` applied to one embedded sequence.
    pub fn encode_sequence(&self, seq: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward_cached(seq)?.0)
    }

    /// Gradient of a scalar w.r.t. the input sequence given its gradient
    /// w.r.t. the output feature. Weights are treated as constants.
    fn backward_sequence(&self, cache: &SequenceCache, grad_out: &[f64]) -> Result<Matrix> {
        let n = cache.q.rows();
        let scale = 1.0 / (self.embed_dim as f64).sqrt();

        let grad_hidden = mat_vec(&self.mlp_out, grad_out);
        let grad_pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let grad_pooled = mat_vec(&self.mlp_hidden, &grad_pre);

        // Every position receives grad_pooled / n through the mean-pool.
        let inv_n = 1.0 / n as f64;
        let row: Vec<f64> = grad_pooled.iter().map(|g| g * inv_n).collect();
        let mut grad_mixed = Matrix::zeros(n, self.embed_dim);
        for i in 0..n {
            grad_mixed.row_mut(i).copy_from_slice(&row);
        }
        // Residual branch passes straight through.
        let mut grad_x = grad_mixed.clone();

        let grad_o = grad_mixed.matmul_t(&self.attn_out)?;
        let grad_attn = grad_o.matmul_t(&cache.v)?;
        let grad_v = cache.attn.t_matmul(&grad_o)?;

        let mut grad_scores = Matrix::zeros(n, n);
        for i in 0..n {
            let a = cache.attn.row(i);
            let ga = grad_attn.row(i);
            let inner: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
            for (s, (&ai, &gi)) in grad_scores.row_mut(i).iter_mut().zip(a.iter().zip(ga)) {
                *s = scale * ai * (gi - inner);
            }
        }
        let grad_q = grad_scores.matmul(&cache.k)?;
        let grad_k = grad_scores.t_matmul(&cache.q)?;

        grad_x.add_assign(&grad_q.matmul_t(&self.query)?)?;
        grad_x.add_assign(&grad_k.matmul_t(&self.key)?)?;
        grad_x.add_assign(&grad_v.matmul_t(&self.value)?)?;
        Ok(grad_x)
    }
}

fn vec_matmul(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &x) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += x * w;
        }
    }
    out
}

/// `m · v` for `v` indexed by the columns of `m`.
fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.row_iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `"A photo of {CLASS}: {description}"`, using the first `k` descriptions of each class.
pub fn build_prompts(
    class_names: &[String],
    descriptions: &[Vec<String>],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(Error::Config("prompts per class must be at least 1".into()));
    }
    if descriptions.len() != class_names.len() {
        return Err(Error::Config(format!(
            "descriptions for {} classes, expected {}",
            descriptions.len(),
            class_names.len()
        )));
    }
    class_names
        .iter()
        .zip(descriptions)
        .map(|(name, desc)| {
            if desc.len() < k {
                return Err(Error::Config(format!(
                    "class {name:?} has {} descriptions, {k} required",
                    desc.len()
                )));
            }
            Ok(desc[..k]
                .iter()
                .map(|d| {
                    if d.is_empty() {
                        log::warn!("empty description for class {name:?}");
                    }
                    format!("A photo of {name}: {d}")
                })
                .collect())
        })
        .collect()
}

/// Replaces the first `prefix.rows()` rows of `seq` with `prefix`.
pub fn insert_trainable_prompts(seq: &Matrix, prefix: &Matrix) -> Result<Matrix> {
    let m = prefix.rows();
    if m > 0 && prefix.cols() != seq.cols() {
        return Err(Error::Shape(format!(
            "prefix width {} for sequence width {}",
            prefix.cols(),
            seq.cols()
        )));
    }
    if m > 0 && seq.rows() <= m {
        return Err(Error::PromptTooShort {
            len: seq.rows(),
            prefix: m,
        });
    }
    let mut out = seq.clone();
    out.as_mut_slice()[..prefix.as_slice().len()].copy_from_slice(prefix.as_slice());
    Ok(out)
}

/// Embedded prompts and trainable prefixes for every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub class_names: Vec<String>,
    pub prompts: Vec<Vec<String>>,
    embedded: Vec<Vec<Matrix>>,
    prefixes: Vec<Matrix>,
    prefix_len: usize,
    embed_dim: usize,
}

impl PromptBank {
    /// Tokenizes and embeds prompt strings with the encoder's lookup table.
    pub fn from_text(
        class_names: Vec<String>,
        prompts: Vec<Vec<String>>,
        encoder: &FrozenEncoder,
        prefix_len: usize,
    ) -> Result<Self> {
        let embedded = prompts
            .iter()
            .map(|class| {
                class
                    .iter()
                    .map(|p| encoder.embed_tokens(&tokenize(p)))
                    .collect()
            })
            .collect();
        Self::from_embedded(class_names, prompts, embedded, encoder.embed_dim(), prefix_len)
    }

    /// Uses pre-computed token embeddings in place of the lookup table.
    pub fn from_embedding_file(file: &EmbeddingFile, prefix_len: usize) -> Result<Self> {
        file.validate()?;
        let mut names = Vec::new();
        let mut prompts = Vec::new();
        let mut embedded = Vec::new();
        for class in &file.classes {
            names.push(class.name.clone());
            prompts.push(class.prompts.iter().map(|p| p.text.clone()).collect());
            embedded.push(
                class
                    .prompts
                    .iter()
                    .map(|p| Matrix::from_rows(&p.token_embeddings))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::from_embedded(names, prompts, embedded, file.embed_dim, prefix_len)
    }

    fn from_embedded(
        class_names: Vec<String>,
        prompts: Vec<Vec<String>>,
        embedded: Vec<Vec<Matrix>>,
        embed_dim: usize,
        prefix_len: usize,
    ) -> Result<Self> {
        if class_names.is_empty() || embedded.len() != class_names.len() {
            return Err(Error::Config("prompt bank needs one prompt set per class".into()));
        }
        let k = embedded[0].len();
        if k == 0 || embedded.iter().any(|c| c.len() != k) {
            return Err(Error::Config(
                "every class needs the same nonzero number of prompts".into(),
            ));
        }
        for seq in embedded.iter().flatten() {
            if seq.cols() != embed_dim {
                return Err(Error::Shape(format!(
                    "token embeddings of width {} for embed_dim {embed_dim}",
                    seq.cols()
                )));
            }
            if seq.rows() <= prefix_len || seq.rows() == 0 {
                return Err(Error::PromptTooShort {
                    len: seq.rows(),
                    prefix: prefix_len,
                });
            }
        }
        // Warm start: each prefix copies the leading rows of the class's first prompt.
        let prefixes = embedded
            .iter()
            .map(|c| c[0].select_rows(&(0..prefix_len).collect::<Vec<_>>()))
            .collect();
        Ok(Self {
            class_names,
            prompts,
            embedded,
            prefixes,
            prefix_len,
            embed_dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn prompts_per_class(&self) -> usize {
        self.embedded[0].len()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// The embedded prompts `p̃_c` before prefix insertion.
    pub fn embedded(&self, class: usize) -> &[Matrix] {
        &self.embedded[class]
    }

    pub fn prefix(&self, class: usize) -> &Matrix {
        &self.prefixes[class]
    }

    pub fn set_prefix(&mut self, class: usize, prefix: Matrix) -> Result<()> {
        if prefix.shape() != (self.prefix_len, self.embed_dim) {
            return Err(Error::Shape(format!(
                "prefix {:?}, expected {:?}",
                prefix.shape(),
                (self.prefix_len, self.embed_dim)
            )));
        }
        self.prefixes[class] = prefix;
        Ok(())
    }

    /// `p̂_c`: the class's sequences with the prefix inserted.
    pub fn assembled(&self, class: usize) -> Result<Vec<Matrix>> {
        self.embedded[class]
            .iter()
            .map(|seq| insert_trainable_prompts(seq, &self.prefixes[class]))
            .collect()
    }

    /// Serialized embedded prompts, used to check they never change.
    pub fn embedded_json(&self) -> String {
        serde_json::to_string(&self.embedded).expect("matrix serialization cannot fail")
    }

    pub fn prefixes_to_json(&self) -> String {
        let ckpt = PrefixCheckpoint {
            prefix_len: self.prefix_len,
            embed_dim: self.embed_dim,
            classes: self
                .class_names
                .iter()
                .zip(&self.prefixes)
                .map(|(name, p)| PrefixEntry {
                    name: name.clone(),
                    prefix: p.row_iter().map(<[f64]>::to_vec).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&ckpt).expect("prefix serialization cannot fail")
    }

    pub fn load_prefixes_json(&mut self, text: &str) -> Result<()> {
        let ckpt: PrefixCheckpoint = serde_json::from_str(text).map_err(|e| Error::Format {
            field: "prefixes".into(),
            message: e.to_string(),
        })?;
        if ckpt.prefix_len != self.prefix_len
            || ckpt.embed_dim != self.embed_dim
            || ckpt.classes.len() != self.num_classes()
        {
            return Err(Error::Format {
                field: "prefixes".into(),
                message: "checkpoint does not match the prompt bank layout".into(),
            });
        }
        for (c, entry) in ckpt.classes.iter().enumerate() {
            if entry.name != self.class_names[c] {
                return Err(Error::Format {
                    field: format!("classes[{c}].name"),
                    message: format!("expected {:?}", self.class_names[c]),
                });
            }
            let p = if self.prefix_len == 0 {
                Matrix::zeros(0, self.embed_dim)
            } else {
                Matrix::from_rows(&entry.prefix)?
            };
            self.set_prefix(c, p)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PrefixCheckpoint {
    prefix_len: usize,
    embed_dim: usize,
    classes: Vec<PrefixEntry>,
}

#[derive(Serialize, Deserialize)]
struct PrefixEntry {
    name: String,
    prefix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextPrototypes {
    /// `P̄^T`, one row per class.
    pub mean: Matrix,
    /// `P^T_c`, the `k × d` per-prompt features of each class.
    pub per_class: Vec<Matrix>,
}

pub fn encode_text_prototypes(bank: &PromptBank, encoder: &FrozenEncoder) -> Result<TextPrototypes> {
    Ok(encode_with_caches(bank, encoder)?.0)
}

fn encode_with_caches(
    bank: &PromptBank,
    encoder: &FrozenEncoder,
) -> Result<(TextPrototypes, Vec<Vec<SequenceCache>>)> {
    if bank.embed_dim() != encoder.embed_dim() {
        return Err(Error::Shape(format!(
            "prompt bank embed_dim {} vs encoder {}",
            bank.embed_dim(),
            encoder.embed_dim()
        )));
    }
    let d = encoder.output_dim();
    let mut mean = Matrix::zeros(bank.num_classes(), d);
    let mut per_class = Vec::with_capacity(bank.num_classes());
    let mut caches = Vec::with_capacity(bank.num_classes());
    for c in 0..bank.num_classes() {
        let seqs = bank.assembled(c)?;
        let mut feats = Matrix::zeros(seqs.len(), d);
        let mut class_caches = Vec::with_capacity(seqs.len());
        for (j, seq) in seqs.iter().enumerate() {
            let (out, cache) = encoder.forward_cached(seq)?;
            feats.row_mut(j).copy_from_slice(&out);
            class_caches.push(cache);
        }
        mean.row_mut(c).copy_from_slice(&feats.column_means());
        per_class.push(feats);
        caches.push(class_caches);
    }
    mean.ensure_finite("text prototypes")?;
    Ok((TextPrototypes { mean, per_class }, caches))
}

/// Server alignment loss over present classes: mean over present `c` of
/// `−log softmax_j(cos(text_c, image_j)/τ)[c]`, `j` ranging over present classes.
/// Returns the loss and its gradient w.r.t. `text` (zero rows for absent classes).
pub fn server_alignment_loss(
    text: &Matrix,
    image: &Matrix,
    mask: &[bool],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if text.shape() != image.shape() || mask.len() != text.rows() {
        return Err(Error::Shape(format!(
            "text {:?}, image {:?}, mask {}",
            text.shape(),
            image.shape(),
            mask.len()
        )));
    }
    let present: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
    if present.len() < 2 {
        return Err(Error::InsufficientClasses {
            present: present.len(),
        });
    }
    let inv = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(text.rows(), text.cols());
    for &c in &present {
        let (l, g) = contrastive_anchor_grad(text.row(c), image, c, tau, Some(mask))?;
        loss += l * inv;
        for (o, gi) in grad.row_mut(c).iter_mut().zip(g) {
            *o = gi * inv;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTraining {
    /// Loss before each gradient step.
    pub step_losses: Vec<f64>,
    /// Loss after the last step (equal to the initial loss when no step ran).
    pub final_loss: f64,
}

/// Loss and gradient w.r.t. every class prefix.
pub fn prompt_loss_and_grad(
    bank: &PromptBank,
    encoder: &FrozenEncoder,
    image_protos: &Matrix,
    mask: &[bool],
    tau: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let (protos, caches) = encode_with_caches(bank, encoder)?;
    let (loss, grad_text) = server_alignment_loss(&protos.mean, image_protos, mask, tau)?;
    let m = bank.prefix_len();
    let k = bank.prompts_per_class() as f64;
    let mut grads = Vec::with_capacity(bank.num_classes());
    for (c, class_caches) in caches.iter().enumerate() {
        let mut g = Matrix::zeros(m, bank.embed_dim());
        if mask[c] && m > 0 {
            let per_prompt: Vec<f64> = grad_text.row(c).iter().map(|x| x / k).collect();
            for cache in class_caches {
                let gx = encoder.backward_sequence(cache, &per_prompt)?;
                for (a, b) in g.as_mut_slice().iter_mut().zip(gx.as_slice()) {
                    *a += b;
                }
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Runs `epochs` full-batch gradient steps on the class prefixes.
pub fn train_prompts(
    bank: &mut PromptBank,
    encoder: &FrozenEncoder,
    image_protos: &Matrix,
    mask: &[bool],
    tau: f64,
    lr: f64,
    epochs: usize,
) -> Result<PromptTraining> {
    if !(lr >= 0.0) || !(tau > 0.0) {
        return Err(Error::Config(format!(
            "prompt training needs lr >= 0 and tau > 0 (got lr={lr}, tau={tau})"
        )));
    }
    if mask.len() != bank.num_classes() {
        return Err(Error::Shape("mask length differs from class count".into()));
    }
    let mut step_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grads) = prompt_loss_and_grad(bank, encoder, image_protos, mask, tau)?;
        step_losses.push(loss);
        if lr > 0.0 {
            for (c, g) in grads.iter().enumerate() {
                if mask[c] {
                    let mut p = bank.prefixes[c].clone();
                    p.axpy(-lr, g)?;
                    p.ensure_finite("prompt prefix")?;
                    bank.prefixes[c] = p;
                }
            }
        }
    }
    let final_loss = if lr == 0.0 && !step_losses.is_empty() {
        step_losses[0]
    } else {
        let protos = encode_text_prototypes(bank, encoder)?;
        server_alignment_loss(&protos.mean, image_protos, mask, tau)?.0
    };
    Ok(PromptTraining {
        step_losses,
        final_loss,
    })
}

/// Token-level embeddings produced offline by a pretrained encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub embed_dim: usize,
    pub classes: Vec<EmbeddedClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedClass {
    pub name: String,
    pub prompts: Vec<EmbeddedPrompt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedPrompt {
    pub text: String,
    pub token_embeddings: Vec<Vec<f64>>,
}

impl EmbeddingFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks structural consistency; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.embed_dim == 0 {
            return Err(Error::Format {
                field: "embed_dim".into(),
                message: "must be positive".into(),
            });
        }
        if self.classes.is_empty() {
            return Err(Error::Format {
                field: "classes".into(),
                message: "no classes".into(),
            });
        }
        let k = self.classes[0].prompts.len();
        for (c, class) in self.classes.iter().enumerate() {
            if class.prompts.len() != k || k == 0 {
                return Err(Error::Format {
                    field: format!("classes[{c}].prompts"),
                    message: format!("{} prompts, expected {k} (nonzero)", class.prompts.len()),
                });
            }
            if self.classes[..c].iter().any(|o| o.name == class.name) {
                return Err(Error::Format {
                    field: format!("classes[{c}].name"),
                    message: format!("duplicate class {:?}", class.name),
                });
            }
            for (j, p) in class.prompts.iter().enumerate() {
                let field = format!("classes[{c}].prompts[{j}].token_embeddings");
                if p.token_embeddings.is_empty() {
                    return Err(Error::Format {
                        field,
                        message: "no tokens".into(),
                    });
                }
                if let Some(bad) = p
                    .token_embeddings
                    .iter()
                    .position(|r| r.len() != self.embed_dim)
                {
                    return Err(Error::Format {
                        field: format!("{field}[{bad}]"),
                        message: format!("row width differs from embed_dim {}", self.embed_dim),
                    });
                }
                if p.token_embeddings.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Format {
                        field,
                        message: "non-finite value".into(),
                    });
                }
                if p.text.trim().is_empty() {
                    warnings.push(format!("classes[{c}].prompts[{j}].text is empty"));
                }
            }
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, finite_difference_check, DEFAULT_STEP};

    fn small_encoder(e: usize, d: usize, seed: u64) -> FrozenEncoder {
        FrozenEncoder::new(
            &EncoderSpec {
                vocab_size: 64,
                embed_dim: e,
                hidden_dim: 8,
            },
            d,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn prompt_template() {
        let p = build_prompts(&["dog".into()], &[vec!["a furry mammal".into()]], 1).unwrap();
        assert_eq!(p[0][0], "A photo of dog: a furry mammal");
        let empty = build_prompts(&["X".into()], &[vec![String::new()]], 1).unwrap();
        assert_eq!(empty[0][0], "A photo of X: ");
        let missing = build_prompts(&["dog".into()], &[vec!["one".into(), "two".into()]], 3);
        assert!(matches!(missing, Err(Error::Config(_))));
        assert_eq!(DEFAULT_PROMPTS_PER_CLASS, 3);
    }

    #[test]
    fn tokenizer_and_embedding() {
        assert_eq!(tokenize("A photo of Dog: a furry-mammal!"), vec![
            "a", "photo", "of", "dog", "a", "furry", "mammal"
        ]);
        let enc = small_encoder(8, 8, 0);
        let a = enc.embed_tokens(&tokenize("same words here"));
        assert_eq!(a, enc.embed_tokens(&tokenize("same words here")));
        assert_eq!(enc.embed_tokens(&tokenize("single")).shape(), (1, 8));
    }

    #[test]
    fn shared_tokens_raise_pooled_similarity() {
        let base = "alpha beta gamma delta epsilon zeta eta theta";
        let shares5 = "alpha beta gamma delta epsilon one two three";
        let shares0 = "uno dos tres cuatro cinco seis siete ocho";
        let mut wins = 0;
        for seed in 0..20 {
            let enc = FrozenEncoder::new(&EncoderSpec::default(), 8, seed).unwrap();
            let pooled = |t: &str| enc.embed_tokens(&tokenize(t)).column_means();
            let b = pooled(base);
            if cosine(&b, &pooled(shares5)).unwrap() > cosine(&b, &pooled(shares0)).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 18, "{wins}/20");
    }

    #[test]
    fn prefix_insertion() {
        let seq = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]).unwrap();
        let v = Matrix::from_rows(&[[10.0], [11.0]]).unwrap();
        let out = insert_trainable_prompts(&seq, &v).unwrap();
        assert_eq!(out.as_slice(), &[10.0, 11.0, 2.0, 3.0, 4.0]);
        assert_eq!(seq.as_slice(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(insert_trainable_prompts(&seq, &Matrix::zeros(0, 1)).unwrap(), seq);
        let short = Matrix::zeros(2, 1);
        assert!(matches!(
            insert_trainable_prompts(&short, &Matrix::zeros(3, 1)),
            Err(Error::PromptTooShort { len: 2, prefix: 3 })
        ));
    }

    fn toy_bank(enc: &FrozenEncoder, m: usize, k: usize) -> PromptBank {
        let names: Vec<String> = vec!["cat".into(), "dog".into(), "car".into()];
        let desc: Vec<Vec<String>> = vec![
            vec!["small furry pet animal".into(), "whiskers and a tail".into()],
            vec!["loyal furry pet animal".into(), "barks at a mail carrier".into()],
            vec!["four wheels and an engine".into(), "drives on a road fast".into()],
        ];
        let prompts = build_prompts(&names, &desc, k).unwrap();
        PromptBank::from_text(names, prompts, enc, m).unwrap()
    }

    #[test]
    fn single_prompt_prototype_is_its_feature() {
        let enc = small_encoder(8, 8, 1);
        let bank = toy_bank(&enc, 1, 1);
        let tp = encode_text_prototypes(&bank, &enc).unwrap();
        for c in 0..3 {
            assert_eq!(tp.mean.row(c), tp.per_class[c].row(0));
        }
    }

    #[test]
    fn identical_prompts_give_identical_rows() {
        let enc = small_encoder(8, 8, 1);
        let names = vec!["a".to_string(), "b".to_string()];
        let prompts = vec![vec!["same prompt text here".to_string()]; 2];
        let mut bank = PromptBank::from_text(names, prompts, &enc, 2).unwrap();
        let v = bank.prefix(0).clone();
        bank.set_prefix(1, v).unwrap();
        let tp = encode_text_prototypes(&bank, &enc).unwrap();
        assert_eq!(tp.mean.row(0), tp.mean.row(1));
    }

    /// Independent forward pass written with explicit loops.
    fn reference_encode(enc: &FrozenEncoder, x: &Matrix) -> Vec<f64> {
        let (n, e) = x.shape();
        let proj = |w: &Matrix| {
            let mut out = vec![vec![0.0; e]; n];
            for i in 0..n {
                for j in 0..e {
                    for t in 0..e {
                        out[i][j] += x[(i, t)] * w[(t, j)];
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(&enc.query), proj(&enc.key), proj(&enc.value));
        let mut pooled = vec![0.0; e];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..e).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (e as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let a: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
            let o: Vec<f64> = (0..e).map(|t| (0..n).map(|j| a[j] * v[j][t]).sum()).collect();
            for t in 0..e {
                let mixed: f64 = (0..e).map(|u| o[u] * enc.attn_out[(u, t)]).sum();
                pooled[t] += (x[(i, t)] + mixed) / n as f64;
            }
        }
        let h: Vec<f64> = (0..enc.mlp_hidden.cols())
            .map(|j| {
                ((0..e).map(|t| pooled[t] * enc.mlp_hidden[(t, j)]).sum::<f64>()
                    + enc.mlp_hidden_bias[j])
                    .tanh()
            })
            .collect();
        (0..enc.output_dim)
            .map(|j| {
                (0..h.len()).map(|t| h[t] * enc.mlp_out[(t, j)]).sum::<f64>() + enc.mlp_out_bias[j]
            })
            .collect()
    }

    #[test]
    fn encoder_matches_reference() {
        let enc = small_encoder(8, 8, 2);
        let bank = toy_bank(&enc, 2, 2);
        let tp = encode_text_prototypes(&bank, &enc).unwrap();
        for c in 0..3 {
            for (j, seq) in bank.assembled(c).unwrap().iter().enumerate() {
                let r = reference_encode(&enc, seq);
                for (a, b) in tp.per_class[c].row(j).iter().zip(&r) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let enc = small_encoder(6, 6, 3);
        let bank = toy_bank(&enc, 2, 2);
        let mut rng = RngStream::for_stream(3, "img", 0, 0);
        let image = rng.normal_matrix(3, 6, 1.0);
        let mask = [true; 3];
        let (_, grads) = prompt_loss_and_grad(&bank, &enc, &image, &mask, 0.5).unwrap();
        for c in 0..3 {
            let err = finite_difference_check(
                |v| {
                    let mut b = bank.clone();
                    b.set_prefix(c, v.clone())?;
                    prompt_loss_and_grad(&b, &enc, &image, &mask, 0.5).map(|r| r.0)
                },
                bank.prefix(c),
                &grads[c],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-4, "class {c}: {err}");
        }
    }

    #[test]
    fn zero_lr_and_frozen_contract() {
        let enc = small_encoder(6, 6, 4);
        let mut bank = toy_bank(&enc, 2, 2);
        let before_bank = bank.clone();
        let before_enc = enc.to_json();
        let mut rng = RngStream::for_stream(4, "img", 0, 0);
        let image = rng.normal_matrix(3, 6, 1.0);
        let r = train_prompts(&mut bank, &enc, &image, &[true; 3], 0.07, 0.0, 3).unwrap();
        assert_eq!(bank, before_bank);
        assert!(r.final_loss.is_finite());
        assert_eq!(r.step_losses.len(), 3);

        train_prompts(&mut bank, &enc, &image, &[true; 3], 0.07, 0.05, 20).unwrap();
        assert_eq!(enc.to_json(), before_enc);
        assert_eq!(bank.embedded_json(), before_bank.embedded_json());
        assert_ne!(bank.prefix(0), before_bank.prefix(0));
    }

    #[test]
    fn absent_classes_keep_their_prefix() {
        let enc = small_encoder(6, 6, 5);
        let mut bank = toy_bank(&enc, 2, 2);
        let frozen = bank.prefix(1).clone();
        let image = RngStream::for_stream(5, "img", 0, 0).normal_matrix(3, 6, 1.0);
        let mask = [true, false, true];
        let (_, grads) = prompt_loss_and_grad(&bank, &enc, &image, &mask, 0.07).unwrap();
        assert!(grads[1].as_slice().iter().all(|&g| g == 0.0));
        train_prompts(&mut bank, &enc, &image, &mask, 0.07, 0.1, 5).unwrap();
        assert_eq!(bank.prefix(1), &frozen);
        assert!(matches!(
            train_prompts(&mut bank, &enc, &image, &[true, false, false], 0.07, 0.1, 1),
            Err(Error::InsufficientClasses { present: 1 })
        ));
    }

    #[test]
    fn closed_form_server_loss() {
        for c in [2usize, 4, 8] {
            for tau in [0.07, 1.0] {
                let p = Matrix::identity(c);
                let (loss, _) = server_alignment_loss(&p, &p, &vec![true; c], tau).unwrap();
                let expected = (1.0 + (c as f64 - 1.0) * (-1.0 / tau).exp()).ln();
                assert!((loss - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prefix_checkpoint_round_trip() {
        let enc = small_encoder(6, 6, 6);
        let mut bank = toy_bank(&enc, 2, 2);
        let image = RngStream::for_stream(6, "img", 0, 0).normal_matrix(3, 6, 1.0);
        train_prompts(&mut bank, &enc, &image, &[true; 3], 0.5, 0.1, 3).unwrap();
        let json = bank.prefixes_to_json();
        let mut fresh = toy_bank(&enc, 2, 2);
        fresh.load_prefixes_json(&json).unwrap();
        assert_eq!(fresh, bank);
    }

    #[test]
    fn embedding_file_validation() {
        let good = r#"{"embed_dim":2,"classes":[
            {"name":"a","prompts":[{"text":"A photo of a.","token_embeddings":[[1,0],[0,1],[1,1]]}]},
            {"name":"b","prompts":[{"text":"A photo of b.","token_embeddings":[[0,1],[1,0],[2,1]]}]}]}"#;
        let file = EmbeddingFile::parse(good).unwrap();
        assert!(file.validate().unwrap().is_empty());
        let bank = PromptBank::from_embedding_file(&file, 1).unwrap();
        assert_eq!(bank.prefix(0).as_slice(), &[1.0, 0.0]);

        let bad_width = good.replace("[2,1]", "[2,1,5]");
        let Err(Error::Format { field, .. }) = EmbeddingFile::parse(&bad_width).unwrap().validate()
        else {
            panic!("expected format error")
        };
        assert_eq!(field, "classes[1].prompts[0].token_embeddings[2]");
        let unknown = good.replace("\"embed_dim\"", "\"dim\"");
        assert!(EmbeddingFile::parse(&unknown).is_err());
    }
}
