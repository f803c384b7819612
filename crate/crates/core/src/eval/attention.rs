use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;
use umnmt_tensor::{Graph, Real, Tensor};

use crate::corpus::{ImageFeatureGrid, TokenId, TokenSeq, Vocab, BOS};
use crate::error::{Error, Result};
use crate::model::{Dropout, Gates, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Text,
    Image,
}

/// Head-averaged cross-attention of one decoder layer: row `t` is the
/// distribution used while emitting target token `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub kind: AttentionKind,
    pub target: Vec<TokenId>,
    pub weights: Tensor,
    pub grid_side: Option<usize>,
}

impl AttentionMap {
    /// Text map without the BOS and EOS columns, rows renormalized.
    pub fn trimmed(&self) -> Tensor {
        if self.kind != AttentionKind::Text || self.weights.cols() <= 2 {
            return self.weights.clone();
        }
        let cols = self.weights.cols() - 2;
        let mut out = Tensor::zeros(self.weights.rows(), cols);
        for r in 0..self.weights.rows() {
            let src = &self.weights.row(r)[1..=cols];
            let z: Real = src.iter().sum();
            for (o, v) in out.row_mut(r).iter_mut().zip(src) {
                *o = if z > 0.0 { v / z } else { 0.0 };
            }
        }
        out
    }

    /// Weights rescaled to [0, 1] over the whole map.
    pub fn normalized(&self) -> Tensor {
        let d = self.weights.data();
        let lo = d.iter().copied().fold(Real::INFINITY, Real::min);
        let hi = d.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let span = hi - lo;
        let data = d
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 1.0 })
            .collect();
        Tensor::new(self.weights.rows(), self.weights.cols(), data).expect("same shape")
    }

    /// Row `t` of an image map laid out as `grid_side x grid_side`.
    pub fn grid(&self, row: usize, values: &Tensor) -> Vec<Vec<Real>> {
        match self.grid_side {
            Some(side) => values.row(row).chunks(side).map(<[Real]>::to_vec).collect(),
            None => vec![values.row(row).to_vec()],
        }
    }

    /// Source index with the largest weight for each target token.
    pub fn argmax_per_row(&self) -> Vec<usize> {
        (0..self.weights.rows())
            .map(|r| crate::model::argmax(self.weights.row(r)))
            .collect()
    }
}

fn head_average(weights: &[Tensor], rows: usize) -> Tensor {
    let mut avg = Tensor::zeros(rows, weights[0].cols());
    for w in weights {
        for r in 0..rows {
            for (a, v) in avg.row_mut(r).iter_mut().zip(w.row(r)) {
                *a += v;
            }
        }
    }
    for v in avg.data_mut() {
        *v /= weights.len() as Real;
    }
    avg
}

/// Replays the decoder on `target` and records cross-attention per layer:
/// a text map always, an image map when an image is given and the image
/// gate is open.
pub fn extract_attention(
    model: &Model,
    source: &TokenSeq,
    image: Option<&ImageFeatureGrid>,
    target: &TokenSeq,
) -> Result<Vec<AttentionMap>> {
    if target.lang != source.lang.other() {
        return Err(Error::Data("target must be in the other language".into()));
    }
    let gates = match image {
        Some(_) => model.config().gates_for(crate::corpus::Modality::TextImage),
        None => Gates::TEXT_ONLY,
    };
    let g = Graph::no_grad();
    let text = model.encode_text(&g, &[source], source.lang, &mut Dropout::Off)?;
    let enc_img = match image {
        Some(img) if gates.wants_image() => Some(model.encode_image(&g, &[img])?),
        _ => None,
    };
    let memory = model.decoder_memory(&g, target.lang, &text, enc_img.as_ref(), gates)?;
    let mut input = vec![BOS];
    input.extend_from_slice(&target.ids);
    let out = model.decode(&g, &memory, &[&input], &mut Dropout::Off)?;
    let rows = target.len();
    let side = image.map(|i| i.grid_side());
    let mut maps = Vec::new();
    for (layer, trace) in out.cross.iter().enumerate() {
        let text_w = g.attention_weights(trace.text).expect("attention node");
        maps.push(AttentionMap {
            layer,
            kind: AttentionKind::Text,
            target: target.ids.clone(),
            weights: head_average(&text_w, rows),
            grid_side: None,
        });
        if let Some(var) = trace.image {
            let w = g.attention_weights(var).expect("attention node");
            maps.push(AttentionMap {
                layer,
                kind: AttentionKind::Image,
                target: target.ids.clone(),
                weights: head_average(&w, rows),
                grid_side: side,
            });
        }
    }
    Ok(maps)
}

/// JSON-lines export, one object per target token and map.
pub fn write_attention_jsonl<W: Write>(
    mut w: W,
    maps: &[AttentionMap],
    vocab: &Vocab,
    sentence: usize,
) -> Result<()> {
    for map in maps {
        let norm = map.normalized();
        for (t, &tok) in map.target.iter().enumerate() {
            let line = json!({
                "sentence": sentence,
                "position": t,
                "token": vocab.token(tok).unwrap_or("<unk>"),
                "layer": map.layer,
                "kind": map.kind,
                "rows": map.grid(t, &map.weights),
                "normalized": map.grid(t, &norm),
                "grid_side": map.grid_side,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(kind: AttentionKind, rows: usize, cols: usize, data: Vec<Real>) -> AttentionMap {
        AttentionMap {
            layer: 0,
            kind,
            target: vec![0; rows],
            weights: Tensor::new(rows, cols, data).unwrap(),
            grid_side: (kind == AttentionKind::Image).then_some(2),
        }
    }

    #[test]
    fn trimmed_drops_boundary_columns_and_renormalizes() {
        let m = map(AttentionKind::Text, 1, 4, vec![0.5, 0.1, 0.3, 0.1]);
        let t = m.trimmed();
        assert_eq!(t.cols(), 2);
        assert!((t.row(0)[0] - 0.25).abs() < 1e-12);
        assert!((t.row(0)[1] - 0.75).abs() < 1e-12);
        let img = map(AttentionKind::Image, 1, 4, vec![0.25; 4]);
        assert_eq!(img.trimmed(), img.weights);
    }

    #[test]
    fn normalized_spans_unit_interval() {
        let m = map(AttentionKind::Text, 2, 2, vec![0.2, 0.4, 0.6, 1.0]);
        let n = m.normalized();
        for (v, e) in n.data().iter().zip([0.0, 0.25, 0.5, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let flat = map(AttentionKind::Text, 1, 2, vec![0.5, 0.5]);
        assert_eq!(flat.normalized().data(), &[1.0, 1.0]);
    }

    #[test]
    fn grid_and_argmax_follow_layout() {
        let m = map(AttentionKind::Image, 1, 4, vec![0.1, 0.2, 0.6, 0.1]);
        assert_eq!(m.grid(0, &m.weights), vec![vec![0.1, 0.2], vec![0.6, 0.1]]);
        assert_eq!(m.argmax_per_row(), vec![2]);
    }

    #[test]
    fn head_average_is_elementwise_mean() {
        let a = Tensor::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(head_average(&[a, b], 1).data(), &[0.5, 0.5]);
    }
}
