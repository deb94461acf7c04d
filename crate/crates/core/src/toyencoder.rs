//! Causal multi-head self-attention text encoder with an out-projection and
//! a skip connection per layer, plus the averaged (`T'`) and BOS-renormalised
//! (`T`) self-attention matrices derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{softmax_rows, Mat, RngStream};

/// Token layout: BOS at 0, EOS at `s - 1`, optional group labels marking
/// tokens that belong together (e.g. an attribute and its object).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    len: usize,
    groups: Vec<Option<u32>>,
}

impl TokenSeq {
    pub fn new(len: usize) -> Result<Self> {
        Self::with_groups(vec![None; len])
    }

    pub fn with_groups(groups: Vec<Option<u32>>) -> Result<Self> {
        let len = groups.len();
        if len < 3 {
            return Err(Error::Argument(format!(
                "token sequence needs BOS, EOS and at least one token, got length {len}"
            )));
        }
        if groups[0].is_some() || groups[len - 1].is_some() {
            return Err(Error::Argument("BOS/EOS cannot carry a group label".into()));
        }
        let mut ids: Vec<u32> = groups.iter().flatten().copied().collect();
        ids.sort_unstable();
        for id in ids.iter() {
            if ids.iter().filter(|x| *x == id).count() < 2 {
                return Err(Error::Argument(format!(
                    "group {id} labels a single token; groups need >= 2"
                )));
            }
        }
        Ok(Self { len, groups })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bos_index(&self) -> usize {
        0
    }

    pub fn eos_index(&self) -> usize {
        self.len - 1
    }

    pub fn is_special(&self, i: usize) -> bool {
        i == self.bos_index() || i == self.eos_index()
    }

    pub fn group(&self, i: usize) -> Option<u32> {
        self.groups[i]
    }

    pub fn groups(&self) -> &[Option<u32>] {
        &self.groups
    }

    /// Pairs `(i, j)`, `i < j`, sharing a group label.
    pub fn bound_pairs(&self) -> Vec<(usize, usize)> {
        self.labelled_pairs(true)
    }

    /// Pairs `(i, j)`, `i < j`, both labelled but in different groups.
    pub fn unbound_pairs(&self) -> Vec<(usize, usize)> {
        self.labelled_pairs(false)
    }

    fn labelled_pairs(&self, same: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.len {
            for j in i + 1..self.len {
                if let (Some(a), Some(b)) = (self.groups[i], self.groups[j]) {
                    if (a == b) == same {
                        out.push((i, j));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadWeights {
    /// Bilinear score form, `d_model x d_model`.
    pub w_en: Mat,
    /// Value projection, `head_dim x d_model`.
    pub w_v: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub heads: Vec<HeadWeights>,
    /// Output projection, `d_model x d_model`.
    pub w_out: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderParams {
    pub num_heads: usize,
    pub head_dim: usize,
    pub layers: Vec<EncoderLayer>,
    /// Added to every logit that targets the BOS position.
    pub sink_bias: f64,
    pub causal: bool,
}

impl EncoderParams {
    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn zeros(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        let d = num_heads * head_dim;
        let layers = (0..num_layers)
            .map(|_| EncoderLayer {
                heads: (0..num_heads)
                    .map(|_| HeadWeights {
                        w_en: Mat::zeros(d, d),
                        w_v: Mat::zeros(head_dim, d),
                    })
                    .collect(),
                w_out: Mat::zeros(d, d),
            })
            .collect();
        Self {
            num_heads,
            head_dim,
            layers,
            sink_bias: 0.0,
            causal: true,
        }
    }

    /// Gaussian weights with the given entry scales.
    pub fn random(
        rng: &mut RngStream,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        score_scale: f64,
        value_scale: f64,
    ) -> Self {
        let d = num_heads * head_dim;
        let mut p = Self::zeros(num_layers, num_heads, head_dim);
        for layer in &mut p.layers {
            for head in &mut layer.heads {
                head.w_en = rng.normal_mat(d, d, score_scale);
                head.w_v = rng.normal_mat(head_dim, d, value_scale);
            }
            layer.w_out = rng.normal_mat(d, d, 1.0 / (d as f64).sqrt());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.layers.is_empty() || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Shape(
                "encoder needs >= 1 layer, head and dim".into(),
            ));
        }
        if !(self.sink_bias >= 0.0) || !self.sink_bias.is_finite() {
            return Err(Error::Argument(format!(
                "sink_bias must be finite and >= 0, got {}",
                self.sink_bias
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != self.num_heads {
                return Err(Error::Shape(format!(
                    "layer {l} has {} heads, expected {}",
                    layer.heads.len(),
                    self.num_heads
                )));
            }
            if layer.w_out.shape() != (d, d) {
                return Err(Error::Shape(format!("layer {l} W_out is not {d}x{d}")));
            }
            layer.w_out.ensure_finite("encoder W_out")?;
            for (h, head) in layer.heads.iter().enumerate() {
                if head.w_en.shape() != (d, d) {
                    return Err(Error::Shape(format!(
                        "layer {l} head {h} W_en is not {d}x{d}"
                    )));
                }
                if head.w_v.shape() != (self.head_dim, d) {
                    return Err(Error::Shape(format!(
                        "layer {l} head {h} W_v is not {}x{d}",
                        self.head_dim
                    )));
                }
                head.w_en.ensure_finite("encoder W_en")?;
                head.w_v.ensure_finite("encoder W_v")?;
            }
        }
        Ok(())
    }
}

/// Everything produced by one encoder pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextEncoding {
    pub seq: TokenSeq,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Final embeddings `k`, `s x d_model`.
    pub k: Mat,
    /// Per-(layer, head) attention, layer-major.
    pub t_stack: Vec<Mat>,
    /// Per-(layer, head) head outputs `o`, `s x head_dim`, layer-major.
    pub o_stack: Vec<Mat>,
    /// Input of every layer (`e` for layer 0 is the initial embedding).
    pub layer_inputs: Vec<Mat>,
    pub t_prime: Mat,
    pub t_renorm: Mat,
}

impl TextEncoding {
    pub fn t(&self, layer: usize, head: usize) -> &Mat {
        &self.t_stack[layer * self.num_heads + head]
    }

    pub fn o(&self, layer: usize, head: usize) -> &Mat {
        &self.o_stack[layer * self.num_heads + head]
    }

    pub fn sink_ratio(&self) -> Result<SinkRatios> {
        sink_ratio(self)
    }
}

pub fn encode(params: &EncoderParams, embeddings0: &Mat, seq: &TokenSeq) -> Result<TextEncoding> {
    params.validate()?;
    let s = seq.len();
    let d = params.d_model();
    if embeddings0.shape() != (s, d) {
        return Err(Error::Shape(format!(
            "initial embeddings are {}x{}, expected {s}x{d}",
            embeddings0.rows(),
            embeddings0.cols()
        )));
    }
    embeddings0.ensure_finite("initial embeddings")?;

    let mut e = embeddings0.clone();
    let mut t_stack = Vec::with_capacity(params.layers.len() * params.num_heads);
    let mut o_stack = Vec::with_capacity(t_stack.capacity());
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut concat = Mat::zeros(s, d);
        for (h, head) in layer.heads.iter().enumerate() {
            let mut logits = e.matmul(&head.w_en)?.matmul_t(&e)?;
            if params.sink_bias != 0.0 {
                for i in 0..s {
                    logits[(i, seq.bos_index())] += params.sink_bias;
                }
            }
            let t = softmax_rows(&logits, params.causal)?;
            let values = e.matmul_t(&head.w_v)?;
            let o = t.matmul(&values)?;
            for i in 0..s {
                concat.row_mut(i)[h * params.head_dim..(h + 1) * params.head_dim]
                    .copy_from_slice(o.row(i));
            }
            t_stack.push(t);
            o_stack.push(o);
        }
        let next = e.add(&concat.matmul_t(&layer.w_out)?)?;
        next.ensure_finite("encoder layer output")?;
        layer_inputs.push(std::mem::replace(&mut e, next));
    }

    let t_prime = average_mats(&t_stack)?;
    let t_renorm = renormalize(&t_prime, seq)?;
    Ok(TextEncoding {
        seq: seq.clone(),
        num_layers: params.layers.len(),
        num_heads: params.num_heads,
        k: e,
        t_stack,
        o_stack,
        layer_inputs,
        t_prime,
        t_renorm,
    })
}

fn average_mats(stack: &[Mat]) -> Result<Mat> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty attention stack".into()))?;
    let mut acc = Mat::zeros(first.rows(), first.cols());
    for m in stack {
        acc.add_assign(m)?;
    }
    Ok(acc.scale(1.0 / stack.len() as f64))
}

/// Entrywise mean over every layer and head.
pub fn average_self_attention(enc: &TextEncoding) -> Result<Mat> {
    average_mats(&enc.t_stack)
}

/// Drops the BOS column and renormalises each row over columns `1..=i`.
/// Row 0 has an empty window and stays zero.
pub fn renormalize(t_prime: &Mat, seq: &TokenSeq) -> Result<Mat> {
    let s = seq.len();
    if t_prime.shape() != (s, s) {
        return Err(Error::Shape(format!(
            "T' is {}x{}, expected {s}x{s}",
            t_prime.rows(),
            t_prime.cols()
        )));
    }
    let bos = seq.bos_index();
    let mut out = Mat::zeros(s, s);
    for i in bos + 1..s {
        let window = &t_prime.row(i)[bos + 1..=i];
        let denom: f64 = window.iter().sum();
        if denom < 1e-15 {
            return Err(Error::Degenerate(format!(
                "row {i} of T' has no mass outside BOS (denominator {denom:e})"
            )));
        }
        for (j, v) in window.iter().enumerate() {
            out[(i, bos + 1 + j)] = v / denom;
        }
    }
    Ok(out)
}

/// Sink ratios `eps_i = sum_{j != bos, j <= i} T_ij / T_i,bos`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SinkRatios {
    /// One vector of per-token ratios per (layer, head), layer-major.
    pub per_head: Vec<Vec<f64>>,
    /// Per-token mean over layers and heads.
    pub mean: Vec<f64>,
}

impl SinkRatios {
    /// Largest ratio over non-BOS tokens of the layer/head mean.
    pub fn max_mean(&self) -> f64 {
        self.mean.iter().skip(1).copied().fold(0.0, f64::max)
    }
}

pub fn sink_ratio_row(row: &[f64], i: usize) -> Result<f64> {
    let sink = row[0];
    if sink <= 0.0 {
        return Err(Error::Degenerate(format!(
            "row {i} puts no attention on BOS; sink ratio undefined"
        )));
    }
    Ok(row[1..=i].iter().sum::<f64>() / sink)
}

pub fn sink_ratio(enc: &TextEncoding) -> Result<SinkRatios> {
    if enc.t_stack.is_empty() {
        return Err(Error::Argument("no attention matrices recorded".into()));
    }
    let s = enc.seq.len();
    let per_head = enc
        .t_stack
        .iter()
        .map(|t| (0..s).map(|i| sink_ratio_row(t.row(i), i)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = per_head.len() as f64;
    let mean = (0..s)
        .map(|i| per_head.iter().map(|v| v[i]).sum::<f64>() / n)
        .collect();
    Ok(SinkRatios { per_head, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: usize) -> TokenSeq {
        TokenSeq::new(s).unwrap()
    }

    #[test]
    fn token_seq_validation() {
        assert!(TokenSeq::new(2).is_err());
        assert!(TokenSeq::with_groups(vec![None, Some(1), None]).is_err());
        assert!(TokenSeq::with_groups(vec![Some(1), Some(1), None]).is_err());
        let t = TokenSeq::with_groups(vec![None, Some(0), Some(0), None, Some(1), Some(1), None])
            .unwrap();
        assert_eq!(t.bound_pairs(), vec![(1, 2), (4, 5)]);
        assert_eq!(t.unbound_pairs(), vec![(1, 4), (1, 5), (2, 4), (2, 5)]);
        assert_eq!(t.eos_index(), 6);
    }

    #[test]
    fn zero_weights_give_uniform_causal_rows() {
        let p = EncoderParams::zeros(1, 1, 2);
        let e0 = RngStream::new(1, 0).normal_mat(3, 2, 1.0);
        let enc = encode(&p, &e0, &seq(3)).unwrap();
        let t = enc.t(0, 0);
        assert_eq!(t.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[0.5, 0.5, 0.0]);
        for v in t.row(2) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn skip_connection_only() {
        let mut p = EncoderParams::random(&mut RngStream::new(2, 0), 1, 2, 3, 0.5, 0.0);
        p.layers[0].w_out = Mat::identity(6);
        let e0 = RngStream::new(2, 1).normal_mat(5, 6, 1.0);
        let enc = encode(&p, &e0, &seq(5)).unwrap();
        assert_eq!(enc.k, e0);
    }

    #[test]
    fn strong_sink_bias_gives_small_ratio() {
        let mut p = EncoderParams::random(&mut RngStream::new(3, 0), 2, 2, 4, 0.1, 0.3);
        p.sink_bias = 20.0;
        let e0 = RngStream::new(3, 1).normal_mat(8, 8, 1.0);
        let enc = encode(&p, &e0, &seq(8)).unwrap();
        let eps = enc.sink_ratio().unwrap();
        for per_token in &eps.per_head {
            for v in per_token {
                assert!(*v < 0.05, "eps {v}");
            }
        }
    }

    #[test]
    fn sink_ratio_decreases_with_bias() {
        let base = EncoderParams::random(&mut RngStream::new(4, 0), 1, 2, 4, 0.2, 0.3);
        let e0 = RngStream::new(4, 1).normal_mat(7, 8, 1.0);
        let mut prev = f64::INFINITY;
        for bias in [0.0, 5.0, 10.0, 20.0] {
            let mut p = base.clone();
            p.sink_bias = bias;
            let enc = encode(&p, &e0, &seq(7)).unwrap();
            let eps = enc.sink_ratio().unwrap();
            let worst = eps.max_mean();
            assert!(worst < prev, "bias {bias}: {worst} !< {prev}");
            for (i, v) in eps.mean.iter().enumerate().skip(1) {
                // softmax oracle: adding b to the BOS logit divides the ratio by e^b
                let mut p0 = base.clone();
                p0.sink_bias = 0.0;
                let e_ref = encode(&p0, &e0, &seq(7)).unwrap().sink_ratio().unwrap();
                let expected: f64 = e_ref.per_head.iter().map(|r| r[i]).sum::<f64>()
                    / e_ref.per_head.len() as f64
                    * (-bias).exp();
                assert!((v - expected).abs() <= 1e-12 * expected.max(1e-300) + 1e-300);
            }
            prev = worst;
        }
    }

    #[test]
    fn sink_ratio_rows() {
        assert_eq!(sink_ratio_row(&[1.0, 0.0, 0.0], 2).unwrap(), 0.0);
        assert_eq!(sink_ratio_row(&[0.5, 0.25, 0.25], 2).unwrap(), 1.0);
        assert!(sink_ratio_row(&[0.0, 0.5, 0.5], 2).is_err());
    }

    #[test]
    fn renormalize_examples() {
        let s = seq(3);
        let t = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.7, 0.3, 0.0], [0.90, 0.06, 0.04]]).unwrap();
        let r = renormalize(&t, &s).unwrap();
        assert_eq!(r.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(r.row(1), &[0.0, 1.0, 0.0]);
        assert!((r[(2, 1)] - 0.6).abs() < 1e-15);
        assert!((r[(2, 2)] - 0.4).abs() < 1e-15);

        // all non-BOS mass on the diagonal
        let t = Mat::from_fn(4, 4, |i, j| {
            if j == 0 {
                0.8
            } else if i == j {
                0.2
            } else {
                0.0
            }
        });
        let r = renormalize(&t, &seq(4)).unwrap();
        for i in 1..4 {
            assert_eq!(r[(i, i)], 1.0);
        }

        // uniform rows
        let t = Mat::from_fn(5, 5, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
        let r = renormalize(&t, &seq(5)).unwrap();
        for i in 1..5 {
            for j in 1..=i {
                assert!((r[(i, j)] - 1.0 / i as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn renormalize_degenerate_row() {
        let t = Mat::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]).unwrap();
        let err = renormalize(&t, &seq(3)).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn average_examples() {
        let p = EncoderParams::random(&mut RngStream::new(5, 0), 1, 2, 2, 0.5, 0.5);
        let e0 = RngStream::new(5, 1).normal_mat(4, 4, 1.0);
        let enc = encode(&p, &e0, &seq(4)).unwrap();
        let avg = average_self_attention(&enc).unwrap();
        let manual = enc.t(0, 0).add(enc.t(0, 1)).unwrap().scale(0.5);
        assert!(avg.max_abs_diff(&manual) < 1e-15);

        let p1 = EncoderParams::random(&mut RngStream::new(5, 0), 1, 1, 2, 0.5, 0.5);
        let e1 = RngStream::new(5, 1).normal_mat(4, 2, 1.0);
        let enc = encode(&p1, &e1, &seq(4)).unwrap();
        assert_eq!(average_self_attention(&enc).unwrap(), enc.t_stack[0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = EncoderParams::zeros(1, 2, 2);
        assert!(matches!(
            encode(&p, &Mat::zeros(4, 3), &seq(4)),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn structural_invariants(seed in 0u64..10_000, s in 3usize..10, bias in 0.0f64..25.0) {
            let mut p = EncoderParams::random(&mut RngStream::new(seed, 0), 2, 2, 3, 0.3, 0.3);
            p.sink_bias = bias;
            let e0 = RngStream::new(seed, 1).normal_mat(s, 6, 1.0);
            let enc = encode(&p, &e0, &seq(s)).unwrap();
            for t in &enc.t_stack {
                for i in 0..s {
                    let total: f64 = t.row(i)[..=i].iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    for j in i + 1..s {
                        prop_assert_eq!(t[(i, j)], 0.0);
                    }
                }
            }
            for i in 1..s {
                let total: f64 = enc.t_renorm.row(i)[1..=i].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            let again = encode(&p, &e0, &seq(s)).unwrap();
            prop_assert_eq!(again.k.data(), enc.k.data());
        }
    }
}
