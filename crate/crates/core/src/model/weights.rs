use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use umnmt_tensor::{ParamId, ParamStore, Tensor};

use super::config::ModelConfig;
use crate::corpus::Lang;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FfnIds {
    pub up: Affine,
    pub down: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIds {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub o: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ComposedIds {
    pub q_txt: Affine,
    pub q_img: Affine,
    pub ffn_ei: FfnIds,
    pub ffn_ie: FfnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct CrossIds {
    pub text: AttnIds,
    pub img_k: Option<Affine>,
    pub img_v: Option<Affine>,
    pub composed: Option<ComposedIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross: CrossIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LangIds {
    pub emb: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub enc_ln: LnIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_ln: LnIds,
    pub out: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ImageIds {
    pub proj: Affine,
    pub ln: LnIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct WeightIds {
    pub x: LangIds,
    pub y: LangIds,
    pub image: Option<ImageIds>,
}

impl WeightIds {
    pub fn lang(&self, lang: Lang) -> &LangIds {
        match lang {
            Lang::X => &self.x,
            Lang::Y => &self.y,
        }
    }
}

/// Seed derived from the model seed and a parameter name, so a tensor's
/// initial value does not depend on which other tensors exist.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub(crate) fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn tensor(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        if let Ok(id) = self.store.id(name) {
            return Ok(id);
        }
        let mut t = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::full(rows, cols, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::new(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
                )?
            }
        };
        round_f32(&mut t);
        Ok(self.store.add(name, t)?)
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
        Ok(Affine {
            w: self.tensor(
                &format!("{name}.w"),
                fan_in,
                fan_out,
                Init::Normal((fan_in as f64).powf(-0.5)),
            )?,
            b: self.tensor(&format!("{name}.b"), 1, fan_out, Init::Zeros)?,
        })
    }

    fn ln(&mut self, name: &str, d: usize) -> Result<LnIds> {
        Ok(LnIds {
            g: self.tensor(&format!("{name}.g"), 1, d, Init::Ones)?,
            b: self.tensor(&format!("{name}.b"), 1, d, Init::Zeros)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize, d_out: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            up: self.affine(&format!("{name}.up"), d, d_ff)?,
            down: self.affine(&format!("{name}.down"), d_ff, d_out)?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            q: self.affine(&format!("{name}.q"), d, d)?,
            k: self.affine(&format!("{name}.k"), d, d)?,
            v: self.affine(&format!("{name}.v"), d, d)?,
            o: self.affine(&format!("{name}.o"), d, d)?,
        })
    }
}

/// Prefix of block `layer` of `stack` ("enc" or "dec") for `lang`; leading
/// blocks resolve to the same shared name for both languages.
pub(crate) fn block_prefix(cfg: &ModelConfig, stack: &str, lang: Lang, layer: usize) -> String {
    if layer < cfg.n_shared {
        format!("{stack}.shared.{layer}")
    } else {
        format!("{stack}.{lang}.{layer}")
    }
}

fn build_lang(b: &mut Builder<'_>, cfg: &ModelConfig, lang: Lang) -> Result<LangIds> {
    let d = cfg.d_model;
    let emb = b.tensor(
        &format!("emb.{lang}"),
        cfg.vocab_size(lang),
        d,
        Init::Normal((d as f64).powf(-0.5)),
    )?;
    let mut enc = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = block_prefix(cfg, "enc", lang, l);
        enc.push(EncLayerIds {
            ln1: b.ln(&format!("{p}.ln1"), d)?,
            attn: b.attn(&format!("{p}.self"), d)?,
            ln2: b.ln(&format!("{p}.ln2"), d)?,
            ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff, d)?,
        });
    }
    let enc_ln = b.ln(&format!("enc.{lang}.ln_f"), d)?;
    let mut dec = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = block_prefix(cfg, "dec", lang, l);
        let (img_k, img_v, composed) = if cfg.image_pathway {
            (
                Some(b.affine(&format!("{p}.cross.img_k"), d, d)?),
                Some(b.affine(&format!("{p}.cross.img_v"), d, d)?),
                Some(ComposedIds {
                    q_txt: b.affine(&format!("{p}.cross.comp.q_txt"), d, d)?,
                    q_img: b.affine(&format!("{p}.cross.comp.q_img"), d, d)?,
                    ffn_ei: b.ffn(&format!("{p}.cross.comp.ffn_ei"), d, cfg.d_ff, 2 * d)?,
                    ffn_ie: b.ffn(&format!("{p}.cross.comp.ffn_ie"), d, cfg.d_ff, 2 * d)?,
                }),
            )
        } else {
            (None, None, None)
        };
        dec.push(DecLayerIds {
            ln1: b.ln(&format!("{p}.ln1"), d)?,
            self_attn: b.attn(&format!("{p}.self"), d)?,
            ln2: b.ln(&format!("{p}.ln2"), d)?,
            cross: CrossIds {
                text: b.attn(&format!("{p}.cross"), d)?,
                img_k,
                img_v,
                composed,
            },
            ln3: b.ln(&format!("{p}.ln3"), d)?,
            ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff, d)?,
        });
    }
    let dec_ln = b.ln(&format!("dec.{lang}.ln_f"), d)?;
    let out = b.affine(&format!("out.{lang}"), d, cfg.vocab_size(lang))?;
    Ok(LangIds {
        emb,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out,
    })
}

pub(crate) fn build_weights(cfg: &ModelConfig) -> Result<(ParamStore, WeightIds)> {
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        seed: cfg.init_seed,
    };
    let x = build_lang(&mut b, cfg, Lang::X)?;
    let y = build_lang(&mut b, cfg, Lang::Y)?;
    let image = if cfg.image_pathway {
        Some(ImageIds {
            proj: b.affine("img.proj", cfg.d_img, cfg.d_model)?,
            ln: b.ln("img.ln", cfg.d_model)?,
        })
    } else {
        None
    };
    Ok((store, WeightIds { x, y, image }))
}

/// True for tensors that belong to the image encoder or to attention over
/// image features.
pub fn is_image_param(name: &str) -> bool {
    name.starts_with("img.") || name.contains(".cross.img_") || name.contains(".cross.comp.")
}
