//! Cross-attention maps from latent-derived queries and text embeddings,
//! their head/layer average at a fixed resolution, Gaussian smoothing, and
//! the token-token similarity matrices `C` (cosine) and `S` (row-normalised
//! `C`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::io::{read_payload, write_atomic, write_tensor, TensorManifest};
use crate::numkit::{cosine, gaussian_blur_2d, softmax_rows, Mat, RngStream};

pub const STATE_FORMAT: &str = "tsam-cross-attn/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossLayer {
    /// Query grid is `grid_side x grid_side`, so `N_c = grid_side^2`.
    pub grid_side: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Per-head score form `q_dim x key_dim` with `Omega = q^T W_c k`.
    pub w_c: Vec<Mat>,
    /// Latent channels to query space, `q_dim x channels`.
    pub q_proj: Mat,
    /// Constant query offset (the query mean when the latent is centred).
    pub q_bias: Vec<f64>,
}

impl CrossLayer {
    pub fn n_queries(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn q_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossParams {
    pub layers: Vec<CrossLayer>,
    /// Averaging resolution `M`; only layers with `N_c == M` enter `A_avg`.
    pub m: usize,
    pub latent_side: usize,
    pub channels: usize,
    pub key_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossGeometry {
    pub latent_side: usize,
    pub channels: usize,
    pub key_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Grid side of each layer.
    pub layer_sides: [usize; 2],
    pub score_scale: f64,
}

impl Default for CrossGeometry {
    fn default() -> Self {
        Self {
            latent_side: 4,
            channels: 4,
            key_dim: 8,
            num_heads: 2,
            head_dim: 4,
            layer_sides: [4, 4],
            score_scale: 0.35,
        }
    }
}

impl CrossParams {
    /// Random layers with the given geometry; `M` is the latent resolution.
    pub fn random(rng: &mut RngStream, geo: &CrossGeometry) -> Self {
        let q_dim = geo.num_heads * geo.head_dim;
        let layers = geo
            .layer_sides
            .iter()
            .map(|&side| CrossLayer {
                grid_side: side,
                num_heads: geo.num_heads,
                head_dim: geo.head_dim,
                w_c: (0..geo.num_heads)
                    .map(|_| rng.normal_mat(q_dim, geo.key_dim, geo.score_scale))
                    .collect(),
                q_proj: rng.normal_mat(q_dim, geo.channels, 1.0 / (geo.channels as f64).sqrt()),
                q_bias: vec![0.0; q_dim],
            })
            .collect();
        Self {
            layers,
            m: geo.latent_side * geo.latent_side,
            latent_side: geo.latent_side,
            channels: geo.channels,
            key_dim: geo.key_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.layers.iter().any(|l| l.n_queries() == self.m) {
            return Err(Error::Config(format!(
                "no cross-attention layer has N_c = M = {}",
                self.m
            )));
        }
        if !is_square(self.m) {
            return Err(Error::Config(format!(
                "M = {} is not a perfect square",
                self.m
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let q_dim = layer.q_dim();
            if layer.w_c.len() != layer.num_heads {
                return Err(Error::Shape(format!("layer {l}: W_c count != heads")));
            }
            for w in &layer.w_c {
                if w.shape() != (q_dim, self.key_dim) {
                    return Err(Error::Shape(format!(
                        "layer {l}: W_c is {}x{}, expected {q_dim}x{}",
                        w.rows(),
                        w.cols(),
                        self.key_dim
                    )));
                }
            }
            if layer.q_proj.shape() != (q_dim, self.channels) || layer.q_bias.len() != q_dim {
                return Err(Error::Shape(format!("layer {l}: query projection shape")));
            }
            resample_operator(self.latent_side, layer.grid_side)?;
        }
        Ok(())
    }

    /// Number of layers at resolution `M`.
    pub fn layers_at_m(&self) -> impl Iterator<Item = (usize, &CrossLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.n_queries() == self.m)
    }
}

pub(crate) fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

/// Linear map from a `src_side^2` grid to a `dst_side^2` grid: average
/// pooling when shrinking, nearest-neighbour copy when growing.
pub fn resample_operator(src_side: usize, dst_side: usize) -> Result<Mat> {
    let (np, nq) = (src_side * src_side, dst_side * dst_side);
    if src_side == dst_side {
        return Ok(Mat::identity(np));
    }
    let mut r = Mat::zeros(nq, np);
    if src_side.is_multiple_of(dst_side) {
        let f = src_side / dst_side;
        let w = 1.0 / (f * f) as f64;
        for a in 0..dst_side {
            for b in 0..dst_side {
                for da in 0..f {
                    for db in 0..f {
                        r[(a * dst_side + b, (a * f + da) * src_side + b * f + db)] = w;
                    }
                }
            }
        }
    } else if dst_side.is_multiple_of(src_side) {
        let f = dst_side / src_side;
        for a in 0..dst_side {
            for b in 0..dst_side {
                r[(a * dst_side + b, (a / f) * src_side + b / f)] = 1.0;
            }
        }
    } else {
        return Err(Error::Shape(format!(
            "cannot resample a {src_side}x{src_side} latent to a {dst_side}x{dst_side} grid"
        )));
    }
    Ok(r)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadMap {
    pub layer: usize,
    pub head: usize,
    /// `N_c x s`, rows are distributions over tokens.
    pub map: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossAttnState {
    pub a_stack: Vec<HeadMap>,
    pub a_avg: Mat,
    pub a_smooth: Option<Mat>,
    pub c: Option<Mat>,
    pub s: Option<Mat>,
}

/// Which map the similarity is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    #[default]
    Smoothed,
    Raw,
}

/// Queries of one layer: `R z P^T + b`.
pub(crate) fn layer_queries(params: &CrossParams, layer: &CrossLayer, latent: &Mat) -> Result<Mat> {
    let r = resample_operator(params.latent_side, layer.grid_side)?;
    let mut q = r.matmul(latent)?.matmul_t(&layer.q_proj)?;
    for a in 0..q.rows() {
        for (v, b) in q.row_mut(a).iter_mut().zip(&layer.q_bias) {
            *v += b;
        }
    }
    Ok(q)
}

pub fn compute_maps(params: &CrossParams, latent: &Mat, k: &Mat) -> Result<CrossAttnState> {
    params.validate()?;
    let p = params.latent_side * params.latent_side;
    if latent.shape() != (p, params.channels) {
        return Err(Error::Shape(format!(
            "latent is {}x{}, expected {p}x{}",
            latent.rows(),
            latent.cols(),
            params.channels
        )));
    }
    if k.cols() != params.key_dim {
        return Err(Error::Shape(format!(
            "keys have dim {}, expected {}",
            k.cols(),
            params.key_dim
        )));
    }
    let s = k.rows();
    let mut a_stack = Vec::new();
    let mut a_avg = Mat::zeros(params.m, s);
    let mut count = 0usize;
    for (l, layer) in params.layers.iter().enumerate() {
        let q = layer_queries(params, layer, latent)?;
        for (h, w_c) in layer.w_c.iter().enumerate() {
            let logits = q.matmul(w_c)?.matmul_t(k)?;
            logits.ensure_finite("cross-attention logits")?;
            let map = softmax_rows(&logits, false)?;
            if layer.n_queries() == params.m {
                a_avg.add_assign(&map)?;
                count += 1;
            }
            a_stack.push(HeadMap {
                layer: l,
                head: h,
                map,
            });
        }
    }
    Ok(CrossAttnState {
        a_stack,
        a_avg: a_avg.scale(1.0 / count as f64),
        a_smooth: None,
        c: None,
        s: None,
    })
}

/// Blurs every token column of `maps` on its `sqrt(M) x sqrt(M)` grid.
pub fn smooth_columns(maps: &Mat, kernel_size: usize, sigma: f64) -> Result<Mat> {
    let m = maps.rows();
    if !is_square(m) {
        return Err(Error::Shape(format!("M = {m} is not a perfect square")));
    }
    let side = (m as f64).sqrt().round() as usize;
    let mut out = Mat::zeros(m, maps.cols());
    for j in 0..maps.cols() {
        let field = Mat::new(side, side, maps.col(j))?;
        let blurred = gaussian_blur_2d(&field, kernel_size, sigma)?;
        out.set_col(j, blurred.data());
    }
    Ok(out)
}

pub fn smooth(mut state: CrossAttnState, kernel_size: usize, sigma: f64) -> Result<CrossAttnState> {
    state.a_smooth = Some(smooth_columns(&state.a_avg, kernel_size, sigma)?);
    Ok(state)
}

/// Pairwise cosine similarity of the columns of `maps`, diagonal exactly 1.
pub fn cosine_matrix(maps: &Mat) -> Result<Mat> {
    let s = maps.cols();
    let cols: Vec<Vec<f64>> = (0..s).map(|j| maps.col(j)).collect();
    for (j, c) in cols.iter().enumerate() {
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate(format!(
                "token {j} has an all-zero attention map"
            )));
        }
    }
    let mut c = Mat::identity(s);
    for i in 0..s {
        for j in i + 1..s {
            let v = cosine(&cols[i], &cols[j])?;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// `S_ij = C_ij / sum_k C_ik`.
pub fn row_normalize(c: &Mat) -> Result<Mat> {
    let mut s = c.clone();
    for i in 0..s.rows() {
        let total: f64 = s.row(i).iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("row {i} of C sums to {total}")));
        }
        for v in s.row_mut(i) {
            *v /= total;
        }
    }
    Ok(s)
}

pub fn similarity(state: CrossAttnState) -> Result<CrossAttnState> {
    similarity_from(state, MapSource::Smoothed)
}

pub fn similarity_from(mut state: CrossAttnState, source: MapSource) -> Result<CrossAttnState> {
    let maps = match source {
        MapSource::Smoothed => state.a_smooth.as_ref().ok_or_else(|| {
            Error::Argument("similarity on smoothed maps requested before smoothing".into())
        })?,
        MapSource::Raw => &state.a_avg,
    };
    let c = cosine_matrix(maps)?;
    state.s = Some(row_normalize(&c)?);
    state.c = Some(c);
    Ok(state)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateManifest {
    pub format: String,
    pub tensors: Vec<TensorManifest>,
}

/// Writes every present matrix plus a `manifest.json` index into `dir`.
pub fn export_state(state: &CrossAttnState, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for hm in &state.a_stack {
        let name = format!("A_l{}_h{}", hm.layer, hm.head);
        write_tensor(dir, &name, &hm.map)?;
        let mut t = TensorManifest::for_mat(&name, &hm.map);
        t.layer = Some(hm.layer);
        t.head = Some(hm.head);
        tensors.push(t);
    }
    let mut push = |name: &str, m: Option<&Mat>| -> Result<()> {
        if let Some(m) = m {
            write_tensor(dir, name, m)?;
            tensors.push(TensorManifest::for_mat(name, m));
        }
        Ok(())
    };
    push("A_avg", Some(&state.a_avg))?;
    push("A_smooth", state.a_smooth.as_ref())?;
    push("C", state.c.as_ref())?;
    push("S", state.s.as_ref())?;
    let manifest = StateManifest {
        format: STATE_FORMAT.into(),
        tensors,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// CSV copies of `C` and `S` for plotting.
pub fn export_similarity_csv(state: &CrossAttnState, dir: &Path) -> Result<()> {
    use crate::numkit::io::mat_to_csv;
    if let Some(c) = &state.c {
        write_atomic(&dir.join("C.csv"), mat_to_csv(c).as_bytes())?;
    }
    if let Some(s) = &state.s {
        write_atomic(&dir.join("S.csv"), mat_to_csv(s).as_bytes())?;
    }
    Ok(())
}

fn ingest_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        field: field.into(),
        detail: detail.into(),
    }
}

fn check_row_stochastic(name: &str, m: &Mat) -> Result<()> {
    for (i, total) in m.row_sums().into_iter().enumerate() {
        if (total - 1.0).abs() > 1e-12 {
            return Err(ingest_err(
                name,
                format!("row {i} sums to {total}, expected 1"),
            ));
        }
    }
    if m.data().iter().any(|v| *v < 0.0) {
        return Err(ingest_err(name, "negative attention probability"));
    }
    Ok(())
}

/// Loads a state written by [`export_state`] (or produced elsewhere in the
/// same format) and enforces the invariants `compute_maps` guarantees.
pub fn import_maps(manifest_path: &Path) -> Result<CrossAttnState> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StateManifest = serde_json::from_str(&text)?;
    if manifest.format != STATE_FORMAT {
        return Err(ingest_err(
            "format",
            format!("expected {STATE_FORMAT:?}, got {:?}", manifest.format),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut a_stack = Vec::new();
    let (mut a_avg, mut a_smooth, mut c, mut s) = (None, None, None, None);
    for t in &manifest.tensors {
        let m = read_payload(base, t)?;
        match (t.name.as_str(), t.layer, t.head) {
            (_, Some(layer), Some(head)) => {
                check_row_stochastic(&t.name, &m)?;
                a_stack.push(HeadMap {
                    layer,
                    head,
                    map: m,
                });
            }
            ("A_avg", _, _) => {
                check_row_stochastic("A_avg", &m)?;
                a_avg = Some(m);
            }
            ("A_smooth", _, _) => a_smooth = Some(m),
            ("C", _, _) => c = Some(m),
            ("S", _, _) => s = Some(m),
            (other, _, _) => {
                return Err(ingest_err("name", format!("unknown tensor {other:?}")));
            }
        }
    }
    let a_avg = a_avg.ok_or_else(|| ingest_err("tensors", "missing A_avg"))?;
    let tokens = a_avg.cols();
    for hm in &a_stack {
        if hm.map.cols() != tokens {
            return Err(ingest_err(
                "cols",
                format!(
                    "A_l{}_h{} has {} tokens, A_avg has {tokens}",
                    hm.layer,
                    hm.head,
                    hm.map.cols()
                ),
            ));
        }
    }
    if let Some(sm) = &a_smooth {
        if sm.shape() != a_avg.shape() {
            return Err(ingest_err("A_smooth", "shape differs from A_avg"));
        }
    }
    if let Some(c) = &c {
        check_c(c, tokens)?;
    }
    if let Some(s) = &s {
        if s.shape() != (tokens, tokens) {
            return Err(ingest_err("S", "not s x s"));
        }
        for (i, total) in s.row_sums().into_iter().enumerate() {
            if (total - 1.0).abs() > 1e-12 {
                return Err(ingest_err("S", format!("row {i} sums to {total}")));
            }
        }
    }
    a_stack.sort_by_key(|hm| (hm.layer, hm.head));
    Ok(CrossAttnState {
        a_stack,
        a_avg,
        a_smooth,
        c,
        s,
    })
}

fn check_c(c: &Mat, tokens: usize) -> Result<()> {
    if c.shape() != (tokens, tokens) {
        return Err(ingest_err("C", "not s x s"));
    }
    for i in 0..tokens {
        if c[(i, i)] != 1.0 {
            return Err(ingest_err(
                "C",
                format!("diagonal entry {i} is {}", c[(i, i)]),
            ));
        }
        for j in 0..tokens {
            let v = c[(i, j)];
            if !(0.0..=1.0).contains(&v) || v != c[(j, i)] {
                return Err(ingest_err(
                    "C",
                    format!("entry ({i}, {j}) = {v} breaks symmetry or range"),
                ));
            }
        }
    }
    Ok(())
}

/// Mean of `C` over a set of token pairs.
pub fn mean_over_pairs(c: &Mat, pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().map(|&(i, j)| c[(i, j)]).sum::<f64>() / pairs.len() as f64
}
