use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use umnmt_tensor::{
    AttentionLayout, Graph, ParamId, ParamStore, Real, Shape, Tensor, TensorError, Var,
    LAYER_NORM_EPS,
};

use super::config::{Gates, ModelConfig};
use super::weights::{build_weights, Affine, AttnIds, FfnIds, LnIds, WeightIds};
use crate::corpus::{ImageFeatureGrid, Lang, TokenId, TokenSeq, BOS, EOS};
use crate::error::{Error, Result};

/// Dropout switch threaded through a forward pass.
pub enum Dropout<'a> {
    Off,
    On { p: Real, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    pub fn apply(&mut self, g: &Graph, x: Var) -> Result<Var> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { p, rng } => Ok(g.dropout(x, *p, &mut **rng)?),
        }
    }
}

/// Stacked encoder states of a batch; rows `segments[i]` belong to item `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub states: Var,
    pub segments: Vec<Range<usize>>,
}

impl Encoded {
    /// Item `i` owns `lengths[i]` consecutive rows of `states`.
    pub fn from_lengths(states: Var, lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            segments.push(start..start + n);
            start += n;
        }
        Self { states, segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Cross-attention keys and values of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerMemory {
    pub text_kv: (Var, Var),
    pub image_kv: Option<(Var, Var)>,
    /// Text-to-image keys/values (text rows) and image-to-text keys/values
    /// (image rows).
    pub composed_kv: Option<((Var, Var), (Var, Var))>,
}

/// Everything the decoder of `lang` reads from the encoders, computed once
/// per batch.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub lang: Lang,
    pub gates: Gates,
    pub text_segments: Vec<Range<usize>>,
    pub image_segments: Option<Vec<Range<usize>>>,
    pub layers: Vec<LayerMemory>,
}

impl DecoderMemory {
    pub fn len(&self) -> usize {
        self.text_segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_segments.is_empty()
    }
}

/// Per-layer handles to the cross-attention probability nodes.
#[derive(Debug, Clone)]
pub struct CrossTrace {
    pub text: Var,
    pub image: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Var,
    pub segments: Vec<Range<usize>>,
    pub cross: Vec<CrossTrace>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: WeightIds,
    positions: Tensor,
}

fn sinusoid_table(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let rate = (10000f64).powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            t.row_mut(pos)[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

fn layout(heads: usize, q: &[Range<usize>], k: &[Range<usize>]) -> AttentionLayout {
    AttentionLayout::new(heads, q.to_vec(), k.to_vec())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, ids) = build_weights(&config)?;
        let positions = sinusoid_table(config.max_len, config.d_model);
        Ok(Self {
            config,
            params,
            ids,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn p(&self, g: &Graph, id: ParamId) -> Result<Var> {
        Ok(g.param(&self.params, id)?)
    }

    pub(crate) fn affine(&self, g: &Graph, x: Var, a: Affine) -> Result<Var> {
        let y = g.matmul(x, self.p(g, a.w)?)?;
        Ok(g.add_row(y, self.p(g, a.b)?)?)
    }

    fn layer_norm(&self, g: &Graph, x: Var, ln: LnIds) -> Result<Var> {
        Ok(g.layer_norm_rows(x, self.p(g, ln.g)?, self.p(g, ln.b)?, LAYER_NORM_EPS)?)
    }

    pub(crate) fn ffn(&self, g: &Graph, x: Var, f: FfnIds) -> Result<Var> {
        let h = g.relu(self.affine(g, x, f.up)?)?;
        self.affine(g, h, f.down)
    }

    fn self_attention(
        &self,
        g: &Graph,
        x: Var,
        a: &AttnIds,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        let q = self.affine(g, x, a.q)?;
        let k = self.affine(g, x, a.k)?;
        let v = self.affine(g, x, a.v)?;
        let out = g.attention(q, k, v, layout)?;
        self.affine(g, out, a.o)
    }

    /// Scaled token embeddings plus fixed sinusoidal positions.
    fn embed(&self, g: &Graph, lang: Lang, ids: &[TokenId], positions: &[usize]) -> Result<Var> {
        let vocab = self.config.vocab_size(lang);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} outside the {lang} vocabulary of {vocab}"
            )));
        }
        let table = self.p(g, self.ids.lang(lang).emb)?;
        let e = g.embedding_lookup(table, ids)?;
        let e = g.scale(e, (self.config.d_model as Real).sqrt())?;
        let rows: Vec<&[Real]> = positions.iter().map(|&p| self.positions.row(p)).collect();
        let pos = g.constant(Tensor::from_rows(&rows)?)?;
        Ok(g.add(e, pos)?)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encodes `BOS ++ ids ++ EOS` for every sentence of `lang`.
    pub fn encode_text(
        &self,
        g: &Graph,
        seqs: &[&TokenSeq],
        lang: Lang,
        drop: &mut Dropout<'_>,
    ) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::Data("nothing to encode".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.lang != lang {
                return Err(Error::Data(format!(
                    "{} sentence given to the {lang} encoder",
                    s.lang
                )));
            }
            let n = s.len() + 2;
            self.check_len(n)?;
            ids.push(BOS);
            ids.extend_from_slice(&s.ids);
            ids.push(EOS);
            positions.extend(0..n);
            lengths.push(n);
        }
        let stack = self.ids.lang(lang);
        let mut x = self.embed(g, lang, &ids, &positions)?;
        x = drop.apply(g, x)?;
        let enc = Encoded::from_lengths(x, &lengths);
        let lay = layout(self.config.n_heads, &enc.segments, &enc.segments);
        for block in &stack.enc {
            let h = self.layer_norm(g, x, block.ln1)?;
            let a = self.self_attention(g, h, &block.attn, &lay)?;
            x = g.add(x, drop.apply(g, a)?)?;
            let h = self.layer_norm(g, x, block.ln2)?;
            let f = self.ffn(g, h, block.ffn)?;
            x = g.add(x, drop.apply(g, f)?)?;
        }
        let states = self.layer_norm(g, x, stack.enc_ln)?;
        Ok(Encoded {
            states,
            segments: enc.segments,
        })
    }

    /// Projects frozen feature grids to `k_img x d_model` states each.
    pub fn encode_image(&self, g: &Graph, grids: &[&ImageFeatureGrid]) -> Result<Encoded> {
        let ids = self
            .ids
            .image
            .ok_or_else(|| Error::Modality("model was built without the image pathway".into()))?;
        if grids.is_empty() {
            return Err(Error::Data("nothing to encode".into()));
        }
        let c = &self.config;
        for grid in grids {
            if grid.d_img() != c.d_img || grid.k() != c.k_img {
                return Err(TensorError::Shape {
                    op: "encode_image",
                    left: Shape::new(grid.k(), grid.d_img()),
                    right: Shape::new(c.k_img, c.d_img),
                }
                .into());
            }
        }
        let mut data = Vec::with_capacity(grids.len() * c.k_img * c.d_img);
        for grid in grids {
            data.extend_from_slice(grid.data());
        }
        let feats = g.constant(Tensor::new(grids.len() * c.k_img, c.d_img, data)?)?;
        let h = self.affine(g, feats, ids.proj)?;
        let states = self.layer_norm(g, h, ids.ln)?;
        Ok(Encoded::from_lengths(states, &vec![c.k_img; grids.len()]))
    }

    /// Precomputes the cross-attention keys and values that the `lang`
    /// decoder needs under `gates`.
    pub fn decoder_memory(
        &self,
        g: &Graph,
        lang: Lang,
        text: &Encoded,
        image: Option<&Encoded>,
        gates: Gates,
    ) -> Result<DecoderMemory> {
        let image = match (gates.wants_image(), image) {
            (true, None) => {
                return Err(Error::Modality(
                    "image attention requested without an image".into(),
                ))
            }
            (true, Some(img)) => {
                if img.len() != text.len() {
                    return Err(Error::Modality(format!(
                        "{} images for {} sentences",
                        img.len(),
                        text.len()
                    )));
                }
                Some(img)
            }
            (false, _) => None,
        };
        let heads = self.config.n_heads;
        let d = self.config.d_model;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for block in &self.ids.lang(lang).dec {
            let cross = &block.cross;
            let tk = self.affine(g, text.states, cross.text.k)?;
            let tv = self.affine(g, text.states, cross.text.v)?;
            let mut image_kv = None;
            let mut composed_kv = None;
            if let Some(img) = image {
                let missing =
                    || Error::Modality("model was built without the image pathway".into());
                let ik = self.affine(g, img.states, cross.img_k.ok_or_else(missing)?)?;
                let iv = self.affine(g, img.states, cross.img_v.ok_or_else(missing)?)?;
                if gates.image {
                    image_kv = Some((ik, iv));
                }
                if gates.composed {
                    let comp = cross.composed.ok_or_else(missing)?;
                    let split = |kv: Var| -> Result<(Var, Var)> {
                        Ok((g.slice_cols(kv, 0, d)?, g.slice_cols(kv, d, d)?))
                    };
                    let qe = self.affine(g, text.states, comp.q_txt)?;
                    let te =
                        g.attention(qe, ik, iv, &layout(heads, &text.segments, &img.segments))?;
                    let ei = split(self.ffn(g, te, comp.ffn_ei)?)?;
                    let qi = self.affine(g, img.states, comp.q_img)?;
                    let ti =
                        g.attention(qi, tk, tv, &layout(heads, &img.segments, &text.segments))?;
                    let ie = split(self.ffn(g, ti, comp.ffn_ie)?)?;
                    composed_kv = Some((ei, ie));
                }
            }
            layers.push(LayerMemory {
                text_kv: (tk, tv),
                image_kv,
                composed_kv,
            });
        }
        Ok(DecoderMemory {
            lang,
            gates,
            text_segments: text.segments.clone(),
            image_segments: image.map(|i| i.segments.clone()),
            layers,
        })
    }

    /// Gated multi-source attention of decoder layer `layer`.
    ///
    /// `items[j]` names the memory item that query segment `j` reads. The
    /// text term is always present; the image term and the two composed
    /// terms are added only when their gates are open. Heads are summed
    /// term-wise, then one output projection is applied.
    pub fn controllable_context(
        &self,
        g: &Graph,
        memory: &DecoderMemory,
        layer: usize,
        queries: Var,
        query_segments: &[Range<usize>],
        items: &[usize],
    ) -> Result<(Var, CrossTrace)> {
        let heads = self.config.n_heads;
        let cross = &self.ids.lang(memory.lang).dec[layer].cross;
        let mem = &memory.layers[layer];
        let text_keys: Vec<Range<usize>> = items
            .iter()
            .map(|&i| memory.text_segments[i].clone())
            .collect();
        let q = self.affine(g, queries, cross.text.q)?;
        let text_layout = layout(heads, query_segments, &text_keys);
        let text = g.attention(q, mem.text_kv.0, mem.text_kv.1, &text_layout)?;
        let mut ctx = text;
        let mut image_trace = None;
        if memory.gates.wants_image() {
            let img_segments = memory.image_segments.as_ref().ok_or_else(|| {
                Error::Modality("image attention requested without an image".into())
            })?;
            let img_keys: Vec<Range<usize>> =
                items.iter().map(|&i| img_segments[i].clone()).collect();
            let img_layout = layout(heads, query_segments, &img_keys);
            if let Some((k, v)) = mem.image_kv {
                let a = g.attention(q, k, v, &img_layout)?;
                image_trace = Some(a);
                ctx = g.add(ctx, a)?;
            }
            if let Some(((kei, vei), (kie, vie))) = mem.composed_kv {
                ctx = g.add(ctx, g.attention(q, kei, vei, &text_layout)?)?;
                ctx = g.add(ctx, g.attention(q, kie, vie, &img_layout)?)?;
            }
        }
        let out = self.affine(g, ctx, cross.text.o)?;
        Ok((
            out,
            CrossTrace {
                text,
                image: image_trace,
            },
        ))
    }

    /// Teacher-forced decoding: `inputs[i]` (starting with BOS) is decoded
    /// against memory item `i`; returns one logits row per input token.
    pub fn decode(
        &self,
        g: &Graph,
        memory: &DecoderMemory,
        inputs: &[&[TokenId]],
        drop: &mut Dropout<'_>,
    ) -> Result<DecodeOutput> {
        if inputs.len() != memory.len() {
            return Err(Error::Data(format!(
                "{} decoder inputs for {} memory items",
                inputs.len(),
                memory.len()
            )));
        }
        let lang = memory.lang;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::new();
        for s in inputs {
            if s.is_empty() {
                return Err(Error::Data("decoder input must start with BOS".into()));
            }
            self.check_len(s.len())?;
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            lengths.push(s.len());
        }
        let stack = self.ids.lang(lang);
        let mut x = self.embed(g, lang, &ids, &positions)?;
        x = drop.apply(g, x)?;
        let segments = Encoded::from_lengths(x, &lengths).segments;
        let items: Vec<usize> = (0..inputs.len()).collect();
        let causal = layout(self.config.n_heads, &segments, &segments).causal();
        let mut cross = Vec::with_capacity(stack.dec.len());
        for (l, block) in stack.dec.iter().enumerate() {
            let h = self.layer_norm(g, x, block.ln1)?;
            let a = self.self_attention(g, h, &block.self_attn, &causal)?;
            x = g.add(x, drop.apply(g, a)?)?;
            let h = self.layer_norm(g, x, block.ln2)?;
            let (c, trace) = self.controllable_context(g, memory, l, h, &segments, &items)?;
            cross.push(trace);
            x = g.add(x, drop.apply(g, c)?)?;
            let h = self.layer_norm(g, x, block.ln3)?;
            let f = self.ffn(g, h, block.ffn)?;
            x = g.add(x, drop.apply(g, f)?)?;
        }
        let h = self.layer_norm(g, x, stack.dec_ln)?;
        let logits = self.affine(g, h, stack.out)?;
        Ok(DecodeOutput {
            logits,
            segments,
            cross,
        })
    }

    /// Self-attention keys/values cache for incremental decoding.
    pub fn new_cache(&self, items: usize) -> DecodeCache {
        DecodeCache {
            layers: vec![vec![(Vec::new(), Vec::new()); items]; self.config.n_layers],
            lengths: vec![0; items],
        }
    }

    /// Feeds one more token for each item in `active` and returns the
    /// next-token logits (one row per active item). Keys and values of
    /// earlier tokens come from `cache`.
    pub fn decode_step(
        &self,
        g: &Graph,
        memory: &DecoderMemory,
        cache: &mut DecodeCache,
        active: &[usize],
        tokens: &[TokenId],
    ) -> Result<Var> {
        if active.len() != tokens.len() || active.is_empty() {
            return Err(Error::Data("one token per active item is required".into()));
        }
        let d = self.config.d_model;
        let positions: Vec<usize> = active.iter().map(|&i| cache.lengths[i]).collect();
        for &p in &positions {
            self.check_len(p + 1)?;
        }
        let stack = self.ids.lang(memory.lang);
        let mut x = self.embed(g, memory.lang, tokens, &positions)?;
        let query_segments: Vec<Range<usize>> = (0..active.len()).map(|j| j..j + 1).collect();
        for (l, block) in stack.dec.iter().enumerate() {
            let h = self.layer_norm(g, x, block.ln1)?;
            let q = self.affine(g, h, block.self_attn.q)?;
            let k_new = self.affine(g, h, block.self_attn.k)?;
            let v_new = self.affine(g, h, block.self_attn.v)?;
            let (k_rows, v_rows) = (g.value(k_new).clone(), g.value(v_new).clone());
            let mut k_parts = Vec::with_capacity(2 * active.len());
            let mut v_parts = Vec::with_capacity(2 * active.len());
            let mut key_segments = Vec::with_capacity(active.len());
            let mut start = 0;
            for (j, &item) in active.iter().enumerate() {
                let (kc, vc) = &mut cache.layers[l][item];
                let prefix = kc.len() / d;
                if prefix > 0 {
                    k_parts.push(g.constant(Tensor::new(prefix, d, kc.clone())?)?);
                    v_parts.push(g.constant(Tensor::new(prefix, d, vc.clone())?)?);
                }
                k_parts.push(g.slice_rows(k_new, j, 1)?);
                v_parts.push(g.slice_rows(v_new, j, 1)?);
                kc.extend_from_slice(k_rows.row(j));
                vc.extend_from_slice(v_rows.row(j));
                key_segments.push(start..start + prefix + 1);
                start += prefix + 1;
            }
            let k = g.concat_rows(&k_parts)?;
            let v = g.concat_rows(&v_parts)?;
            let lay = layout(self.config.n_heads, &query_segments, &key_segments).causal();
            let a = g.attention(q, k, v, &lay)?;
            let a = self.affine(g, a, block.self_attn.o)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, x, block.ln2)?;
            let (c, _) = self.controllable_context(g, memory, l, h, &query_segments, active)?;
            x = g.add(x, c)?;
            let h = self.layer_norm(g, x, block.ln3)?;
            let f = self.ffn(g, h, block.ffn)?;
            x = g.add(x, f)?;
        }
        for &item in active {
            cache.lengths[item] += 1;
        }
        let h = self.layer_norm(g, x, stack.dec_ln)?;
        self.affine(g, h, stack.out)
    }
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    layers: Vec<Vec<(Vec<Real>, Vec<Real>)>>,
    lengths: Vec<usize>,
}
