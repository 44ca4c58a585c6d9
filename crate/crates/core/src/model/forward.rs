use std::collections::{BTreeMap, HashMap};

use super::spec::ArchSpec;
use super::store::{param_layout, WeightStore, MAX_TEMPERATURE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// A batch of token sequences, `rows × len`, padded with [`PAD`] after [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads every sequence to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        TokenBatch {
            ids,
            rows: seqs.len(),
            len,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Position of the first end-of-text token in each row.
    pub fn eos_positions(&self) -> Result<Vec<usize>> {
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .position(|&t| t == EOS)
                    .ok_or_else(|| Error::Input(format!("sequence {i} has no end-of-text token")))
            })
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> TokenBatch {
        let seqs: Vec<Vec<usize>> = rows.iter().map(|&r| self.row(r).to_vec()).collect();
        TokenBatch::from_sequences(&seqs)
    }
}

/// How the similarity score is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    /// `min(exp(logit_scale), 100)`, trained with the model.
    Learned,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub normalize: bool,
    pub temperature: Temperature,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            normalize: true,
            temperature: Temperature::Learned,
        }
    }
}

impl ForwardOptions {
    /// Raw dot-product similarity: no normalization, temperature 1.
    pub fn raw_dot() -> Self {
        ForwardOptions {
            normalize: false,
            temperature: Temperature::Fixed(1.0),
        }
    }
}

/// A model architecture read out of a (possibly larger) weight store.
///
/// Every parameter of `spec` is the leading box of the same-named tensor in
/// the store, so a subnet shares storage with its supernet.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'w, T: Real> {
    store: &'w WeightStore<T>,
    spec: &'w ArchSpec,
}

impl<'w, T: Real> ModelView<'w, T> {
    pub fn new(store: &'w WeightStore<T>, spec: &'w ArchSpec) -> Result<Self> {
        spec.validate()?;
        if !spec.fits_within(store.spec()) {
            return Err(Error::GrowthDirection(format!(
                "candidate {} exceeds the stored architecture {}",
                spec.label(),
                store.spec().label()
            )));
        }
        Ok(ModelView { store, spec })
    }

    pub fn full(store: &'w WeightStore<T>) -> Self {
        ModelView {
            store,
            spec: store.spec(),
        }
    }

    pub fn spec(&self) -> &'w ArchSpec {
        self.spec
    }

    pub fn store(&self) -> &'w WeightStore<T> {
        self.store
    }

    /// Copies the viewed weights into a standalone store of `spec`.
    pub fn materialize(&self) -> Result<WeightStore<T>> {
        let tensors = param_layout(self.spec)
            .into_iter()
            .map(|p| Ok((p.name.clone(), self.store.tensor(&p.name)?.prefix_box(&p.shape)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        WeightStore::from_tensors(self.spec.clone(), tensors)
    }
}

/// Gradient of one stored tensor, restricted to the leading box a forward pass touched.
#[derive(Clone, Debug)]
pub struct ParamGrad<T> {
    /// Full-shape gradient; zero outside `extents`.
    pub grad: Vec<T>,
    pub extents: Vec<usize>,
}

pub type Gradients<T> = BTreeMap<String, ParamGrad<T>>;

/// One forward (and optionally backward) pass over a [`ModelView`].
pub struct Session<'w, T: Real> {
    pub graph: Graph<T>,
    view: ModelView<'w, T>,
    opts: ForwardOptions,
    trainable: bool,
    active: HashMap<String, Vec<usize>>,
    leaves: BTreeMap<String, Var>,
    sliced: HashMap<String, Var>,
}

impl<'w, T: Real> Session<'w, T> {
    pub fn new(view: ModelView<'w, T>, opts: ForwardOptions, trainable: bool) -> Self {
        let active = param_layout(view.spec)
            .into_iter()
            .map(|p| (p.name, p.shape))
            .collect();
        Session {
            graph: Graph::new(),
            view,
            opts,
            trainable,
            active,
            leaves: BTreeMap::new(),
            sliced: HashMap::new(),
        }
    }

    pub fn spec(&self) -> &ArchSpec {
        self.view.spec
    }

    /// The active slice of a parameter as a graph node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.sliced.get(name) {
            return Ok(v);
        }
        let extents = self
            .active
            .get(name)
            .ok_or_else(|| Error::Input(format!("`{name}` is not a parameter of {}", self.view.spec.label())))?
            .clone();
        let full = self.view.store.tensor(name)?.clone();
        let leaf = self.graph.leaf(full, self.trainable);
        self.leaves.insert(name.to_string(), leaf);
        let v = self.graph.prefix(leaf, &extents)?;
        self.sliced.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collects leaf gradients after [`Graph::backward`].
    pub fn gradients(&mut self) -> Gradients<T> {
        let mut out = BTreeMap::new();
        for (name, &leaf) in &self.leaves {
            if let Some(grad) = self.graph.take_grad(leaf) {
                out.insert(
                    name.clone(),
                    ParamGrad {
                        grad,
                        extents: self.active[name].clone(),
                    },
                );
            }
        }
        out
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_bcast(y, b)
    }

    fn layernorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.layernorm(x, g, b, T::lit(LN_EPS))
    }

    /// `[rows·len, heads·hd]` -> `[rows·heads, len, hd]`.
    fn split_heads(&mut self, x: Var, rows: usize, len: usize, heads: usize, hd: usize) -> Result<Var> {
        let x = self.graph.reshape(x, &[rows, len, heads, hd])?;
        let x = self.graph.permute(x, &[0, 2, 1, 3])?;
        self.graph.reshape(x, &[rows * heads, len, hd])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        x: Var,
        rows: usize,
        len: usize,
        heads: usize,
        hd: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(x, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
        let k = self.linear(x, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
        let v = self.linear(x, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
        let q = self.split_heads(q, rows, len, heads, hd)?;
        let k = self.split_heads(k, rows, len, heads, hd)?;
        let v = self.split_heads(v, rows, len, heads, hd)?;
        let scores = self.graph.bmm(q, k, true)?;
        let mut scores = self.graph.scale(scores, T::lit(1.0 / (hd as f64).sqrt()))?;
        if causal {
            let mask = Tensor::from_fn(&[len, len], |i| {
                if i % len > i / len {
                    T::lit(MASKED)
                } else {
                    T::zero()
                }
            });
            let mask = self.graph.constant(mask);
            scores = self.graph.add_bcast(scores, mask)?;
        }
        let probs = self.graph.softmax(scores)?;
        let ctx = self.graph.bmm(probs, v, false)?;
        let ctx = self.graph.reshape(ctx, &[rows, heads, len, hd])?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[rows * len, heads * hd])?;
        self.linear(ctx, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))
    }

    /// Pre-norm transformer block on `x: [rows·len, width]`. `ln` picks the
    /// layernorm sites (`("ln1", "ln2")`, or the per-modality pair in shared blocks).
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        prefix: &str,
        x: Var,
        rows: usize,
        len: usize,
        heads: usize,
        hd: usize,
        causal: bool,
        ln: (&str, &str),
    ) -> Result<Var> {
        let h = self.layernorm(x, &format!("{prefix}.{}", ln.0))?;
        let a = self.attention(prefix, h, rows, len, heads, hd, causal)?;
        let x = self.graph.add(x, a)?;
        let h = self.layernorm(x, &format!("{prefix}.{}", ln.1))?;
        let h = self.linear(h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let h = self.graph.gelu(h)?;
        let h = self.linear(h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
        self.graph.add(x, h)
    }

    /// Head on pooled states; reads only the leading rows matching their width.
    fn finish(&mut self, pooled: Var, ln: &str, proj: &str) -> Result<Var> {
        let width = self.graph.shape(pooled)[1];
        let head = |s: &mut Self, name: String| -> Result<Var> {
            let v = s.param(&name)?;
            let mut extents = s.graph.shape(v).to_vec();
            extents[0] = width;
            s.graph.prefix(v, &extents)
        };
        let g = head(self, format!("{ln}.gain"))?;
        let b = head(self, format!("{ln}.bias"))?;
        let w = head(self, proj.to_string())?;
        let h = self.graph.layernorm(pooled, g, b, T::lit(LN_EPS))?;
        let e = self.graph.matmul(h, w)?;
        if self.opts.normalize {
            self.graph.l2_normalize(e)
        } else {
            Ok(e)
        }
    }

    /// Image embeddings `[N, embed_dim]` from `images: [N, 3, S, S]`.
    pub fn encode_image(&mut self, images: &Tensor<T>) -> Result<Var> {
        let spec = self.view.spec.clone();
        let s = spec.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "encode_image",
                format!("expected [N, 3, {s}, {s}], got {shape:?}"),
            ));
        }
        let n = shape[0];
        let c = spec.stem_channels;
        let mut x = self.graph.constant(images.clone());
        if c > 3 {
            let pad = self.graph.constant(Tensor::zeros(&[n, c - 3, s, s]));
            x = self.graph.concat(&[x, pad], 1)?;
        }
        for k in 0..spec.conv_layers_img - 1 {
            let w = self.param(&format!("img.stem.{k}.weight"))?;
            let y = self.graph.conv2d(x, w, 1, 1)?;
            let y = self.graph.gelu(y)?;
            x = self.graph.add(x, y)?;
        }
        let w = self.param("img.patch.weight")?;
        let d = spec.width_img();
        let grid = spec.grid();
        let tokens = grid * grid;
        let x = self.graph.conv2d(x, w, spec.patch_size, 0)?;
        let x = self.graph.reshape(x, &[n, d, tokens])?;
        let x = self.graph.permute(x, &[0, 2, 1])?;

        let cls = self.param("img.cls")?;
        let cls = self.graph.reshape(cls, &[1, d])?;
        let cls = self.graph.gather_rows(cls, &vec![0; n])?;
        let cls = self.graph.reshape(cls, &[n, 1, d])?;
        let x = self.graph.concat(&[cls, x], 1)?;
        let pos = self.param("img.pos")?;
        let x = self.graph.add_bcast(x, pos)?;
        let len = tokens + 1;
        let mut x = self.graph.reshape(x, &[n * len, d])?;

        for i in 0..spec.blocks_img {
            x = self.block(&format!("img.block.{i}"), x, n, len, spec.heads_img, spec.head_dim_img, false, ("ln1", "ln2"))?;
        }
        for i in 0..spec.blocks_shared {
            x = self.block(
                &format!("shared.block.{i}"),
                x,
                n,
                len,
                spec.heads_img,
                spec.head_dim_img,
                false,
                ("ln1_img", "ln2_img"),
            )?;
        }
        let rows: Vec<usize> = (0..n).map(|i| i * len).collect();
        let pooled = self.graph.gather_rows(x, &rows)?;
        self.finish(pooled, "img.ln_post", "img.proj")
    }

    /// Text embeddings `[N, embed_dim]`, pooled at each row's end-of-text token.
    pub fn encode_text(&mut self, tokens: &TokenBatch) -> Result<Var> {
        let spec = self.view.spec.clone();
        let (n, len) = (tokens.rows, tokens.len);
        if len == 0 || len > spec.max_text_len {
            return Err(Error::Input(format!(
                "text length {len} outside 1..={}",
                spec.max_text_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                spec.vocab_size
            )));
        }
        let eos = tokens.eos_positions()?;
        let dt = spec.width_txt();
        let table = self.param("txt.tok")?;
        let x = self.graph.gather_rows(table, &tokens.ids)?;
        let x = self.graph.reshape(x, &[n, len, dt])?;
        let pos = self.param("txt.pos")?;
        let pos = self.graph.prefix(pos, &[len, dt])?;
        let x = self.graph.add_bcast(x, pos)?;
        let mut x = self.graph.reshape(x, &[n * len, dt])?;
        for i in 0..spec.blocks_txt {
            x = self.block(&format!("txt.block.{i}"), x, n, len, spec.heads_txt, spec.head_dim_txt, true, ("ln1", "ln2"))?;
        }
        if spec.blocks_shared > 0 {
            let adapter = self.param("txt.adapter")?;
            x = self.graph.matmul(x, adapter)?;
            for i in 0..spec.blocks_shared {
                x = self.block(
                    &format!("shared.block.{i}"),
                    x,
                    n,
                    len,
                    spec.heads_img,
                    spec.head_dim_img,
                    true,
                    ("ln1_txt", "ln2_txt"),
                )?;
            }
        }
        let rows: Vec<usize> = eos.iter().enumerate().map(|(i, &p)| i * len + p).collect();
        let pooled = self.graph.gather_rows(x, &rows)?;
        self.finish(pooled, "txt.ln_final", "txt.proj")
    }

    /// Scalar temperature node.
    pub fn temperature(&mut self) -> Result<Var> {
        match self.opts.temperature {
            Temperature::Fixed(t) => Ok(self.graph.constant(Tensor::scalar(T::lit(t)))),
            Temperature::Learned => {
                let ls = self.param("logit_scale")?;
                let t = self.graph.exp(ls)?;
                self.graph.clamp_max(t, T::lit(MAX_TEMPERATURE))
            }
        }
    }

    /// `s[i, j] = temperature · ⟨image_i, text_j⟩`.
    pub fn similarity(&mut self, images: Var, texts: Var) -> Result<Var> {
        let t = self.temperature()?;
        similarity_matrix(&mut self.graph, images, texts, t)
    }
}

/// `s[i, j] = temperature · ⟨a_i, b_j⟩` on a graph; `temperature` is a one-element node.
pub fn similarity_matrix<T: Real>(g: &mut Graph<T>, a: Var, b: Var, temperature: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("similarity_matrix", format!("{sa:?} vs {sb:?}")));
    }
    let bt = g.transpose(b)?;
    let s = g.matmul(a, bt)?;
    g.scale_by(s, temperature)
}

/// Value-only [`similarity_matrix`] on plain tensors.
pub fn similarity_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let a = g.constant(a.clone());
    let b = g.constant(b.clone());
    let t = g.constant(Tensor::scalar(temperature));
    let s = similarity_matrix(&mut g, a, b, t)?;
    Ok(g.value(s).clone())
}

/// Evaluation-mode embeddings for a whole batch.
pub fn embed_images<T: Real>(view: ModelView<'_, T>, opts: ForwardOptions, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::new(view, opts, false);
    let v = s.encode_image(images)?;
    Ok(s.graph.value(v).clone())
}

pub fn embed_texts<T: Real>(view: ModelView<'_, T>, opts: ForwardOptions, tokens: &TokenBatch) -> Result<Tensor<T>> {
    let mut s = Session::new(view, opts, false);
    let v = s.encode_text(tokens)?;
    Ok(s.graph.value(v).clone())
}
