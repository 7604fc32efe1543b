//! Scaled dot-product attention, multi-head attention, and the shifted-window
//! token partitioning used by every attention block in the model.
//!
//! Windowing follows the shifted-window scheme: cyclic shift by `s`, zero-pad
//! the grid on the right/bottom to a multiple of the window size, split into
//! non-overlapping `w x w` blocks, and undo all of it after attending. No
//! attention mask is applied across shifted boundaries at this scale.

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::rng::Rng;
use crate::tensor::ops::GATHER_PAD;
use crate::tensor::{ParamGroup, ParamStore, Tensor};
use std::rc::Rc;

// ── Window plan ──────────────────────────────────────────────────────

/// How to carve a token grid into attention windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowPlan {
    pub fn new(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<WindowPlan> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("WindowPlan: empty grid"));
        }
        if window == 0 {
            return Err(Error::invalid("WindowPlan: window size must be positive"));
        }
        if shift >= window {
            return Err(Error::invalid(format!(
                "WindowPlan: shift {shift} must be smaller than window {window}"
            )));
        }
        Ok(WindowPlan {
            grid_h,
            grid_w,
            window,
            shift,
        })
    }

    /// One unshifted window covering the whole grid.
    pub fn full(grid_h: usize, grid_w: usize) -> Result<WindowPlan> {
        WindowPlan::new(grid_h, grid_w, grid_h.max(grid_w), 0)
    }

    fn padded(&self) -> (usize, usize) {
        let round = |n: usize| n.div_ceil(self.window) * self.window;
        (round(self.grid_h), round(self.grid_w))
    }

    pub fn num_windows(&self) -> usize {
        let (ph, pw) = self.padded();
        (ph / self.window) * (pw / self.window)
    }

    pub fn window_tokens(&self) -> usize {
        self.window * self.window
    }

    /// Token index at each padded position, window-major then row-major
    /// within the window; `GATHER_PAD` marks padding. The cyclic shift is
    /// applied to the original grid before padding.
    pub fn partition_token_indices(&self) -> Vec<usize> {
        let (ph, pw) = self.padded();
        let (h, w, ws, s) = (self.grid_h, self.grid_w, self.window, self.shift);
        let mut idx = Vec::with_capacity(ph * pw);
        for wy in 0..ph / ws {
            for wx in 0..pw / ws {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let (y, x) = (wy * ws + iy, wx * ws + ix);
                        if y < h && x < w {
                            idx.push(((y + s) % h) * w + (x + s) % w);
                        } else {
                            idx.push(GATHER_PAD);
                        }
                    }
                }
            }
        }
        idx
    }

    /// For each original token, its position in the partitioned layout
    /// (window-major). Exact inverse of `partition_token_indices` on the
    /// non-padded entries.
    pub fn reverse_token_indices(&self) -> Vec<usize> {
        let (_, pw) = self.padded();
        let (h, w, ws, s) = (self.grid_h, self.grid_w, self.window, self.shift);
        let wins_per_row = pw / ws;
        let mut idx = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                // Position of token (y, x) after the cyclic shift. The shift
                // may exceed a small grid, so reduce it first.
                let py = (y + h - s % h) % h;
                let px = (x + w - s % w) % w;
                let win = (py / ws) * wins_per_row + px / ws;
                let within = (py % ws) * ws + px % ws;
                idx.push(win * ws * ws + within);
            }
        }
        idx
    }
}

/// Split a feature map into window token blocks (each `window² x channels`).
pub fn window_partition(f: &FeatureMap, plan: &WindowPlan) -> Result<Vec<Tensor>> {
    let (gh, gw) = f.grid();
    if (gh, gw) != (plan.grid_h, plan.grid_w) {
        return Err(Error::shape(
            "window_partition",
            format!("{}x{} grid", plan.grid_h, plan.grid_w),
            format!("{gh}x{gw}"),
        ));
    }
    let c = f.channels();
    let token_idx = plan.partition_token_indices();
    let wt = plan.window_tokens();
    let mut windows = Vec::with_capacity(plan.num_windows());
    for chunk in token_idx.chunks_exact(wt) {
        let mut elems = Vec::with_capacity(wt * c);
        for &t in chunk {
            if t == GATHER_PAD {
                elems.extend(std::iter::repeat_n(GATHER_PAD, c));
            } else {
                elems.extend((0..c).map(|j| t * c + j));
            }
        }
        let idx: Rc<[usize]> = elems.into();
        windows.push(f.tensor().gather_elems(idx, &[wt, c])?);
    }
    Ok(windows)
}

/// Invert [`window_partition`]: reassemble original token order, dropping
/// padding. The blocks may have been transformed but must keep their shape.
pub fn window_reverse(windows: &[Tensor], plan: &WindowPlan, f_grid: (usize, usize)) -> Result<FeatureMap> {
    if windows.len() != plan.num_windows() {
        return Err(Error::shape(
            "window_reverse",
            format!("{} windows", plan.num_windows()),
            format!("{}", windows.len()),
        ));
    }
    let c = windows[0].shape()[1];
    let stacked = Tensor::concat_rows(windows)?;
    let token_idx = plan.reverse_token_indices();
    let mut elems = Vec::with_capacity(token_idx.len() * c);
    for &t in &token_idx {
        elems.extend((0..c).map(|j| t * c + j));
    }
    let idx: Rc<[usize]> = elems.into();
    let out = stacked.gather_elems(idx, &[token_idx.len(), c])?;
    FeatureMap::new(out, f_grid.0, f_grid.1)
}

// ── Scaled dot-product attention ─────────────────────────────────────

/// `out = softmax(Q·Kᵀ/√d_k)·V`. Both the output and the weight matrix are
/// returned so one attention map can be reused across value streams.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q[nq x d], K[nk x d], got Q{qs:?}"),
            format!("K{ks:?}"),
        ));
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("V with {} rows", ks[0]),
            format!("V{vs:?}"),
        ));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let weights = q.matmul_nt(k)?.scale(scale).softmax_rows()?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

// ── Multi-head attention ─────────────────────────────────────────────

/// Two-layer MLP with ReLU, the non-linear block after every attention step.
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Mlp> {
        Ok(Mlp {
            w1: store.register(&format!("{prefix}.w1"), init_linear(d_in, hidden, rng), group)?,
            b1: store.register(&format!("{prefix}.b1"), init_bias(d_in, hidden, rng), group)?,
            w2: store.register(&format!("{prefix}.w2"), init_linear(hidden, d_out, rng), group)?,
            b2: store.register(&format!("{prefix}.b2"), init_bias(hidden, d_out, rng), group)?,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Mlp> {
        Ok(Mlp {
            w1: store.get(&format!("{prefix}.w1"))?,
            b1: store.get(&format!("{prefix}.b1"))?,
            w2: store.get(&format!("{prefix}.w2"))?,
            b2: store.get(&format!("{prefix}.b2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?
            .add_row(&self.b1)?
            .relu()?
            .matmul(&self.w2)?
            .add_row(&self.b2)
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn init_linear(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

pub fn init_bias(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[fan_out], -bound, bound, rng)
}

/// Per-head projection matrices plus the output projection.
/// `heads * d_k == d_model` holds by construction.
pub struct AttentionWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
}

impl AttentionWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<AttentionWeights> {
        let (wq, wk) = Self::init_qk(store, prefix, d_model, heads, group, rng)?;
        Self::init_vo(store, prefix, wq, wk, d_model, heads, group, rng)
    }

    /// Register just the Q/K projections, for streams that share them.
    pub fn init_qk(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let d_k = head_dim(d_model, heads)?;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(store.register(
                &format!("{prefix}.wq{h}"),
                init_head_proj(d_model, d_k, rng),
                group,
            )?);
            wk.push(store.register(
                &format!("{prefix}.wk{h}"),
                init_head_proj(d_model, d_k, rng),
                group,
            )?);
        }
        Ok((wq, wk))
    }

    /// Register V projections and the output projection around existing Q/K
    /// handles (shared-map streams reuse one Q/K set across value streams).
    #[allow(clippy::too_many_arguments)]
    pub fn init_vo(
        store: &mut ParamStore,
        prefix: &str,
        wq: Vec<Tensor>,
        wk: Vec<Tensor>,
        d_model: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<AttentionWeights> {
        let d_k = head_dim(d_model, heads)?;
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wv.push(store.register(
                &format!("{prefix}.wv{h}"),
                init_head_proj(d_model, d_k, rng),
                group,
            )?);
        }
        let wo = store.register(
            &format!("{prefix}.wo"),
            init_linear(heads * d_k, d_model, rng),
            group,
        )?;
        Ok(AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            heads,
            d_k,
            d_model,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, d_model: usize, heads: usize) -> Result<AttentionWeights> {
        Self::bind_shared_qk(store, prefix, prefix, d_model, heads)
    }

    pub fn bind_shared_qk(
        store: &ParamStore,
        qk_prefix: &str,
        vo_prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<AttentionWeights> {
        let d_k = head_dim(d_model, heads)?;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(store.get(&format!("{qk_prefix}.wq{h}"))?);
            wk.push(store.get(&format!("{qk_prefix}.wk{h}"))?);
            wv.push(store.get(&format!("{vo_prefix}.wv{h}"))?);
        }
        let wo = store.get(&format!("{vo_prefix}.wo"))?;
        Ok(AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            heads,
            d_k,
            d_model,
        })
    }
}

fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "attention: d_model {d_model} not divisible into {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

fn init_head_proj(d_model: usize, d_k: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (d_model as f64).sqrt();
    Tensor::uniform(&[d_model, d_k], -bound, bound, rng)
}

/// The per-window, per-head attention weights of one multi-head call.
/// Reusing a map skips the Q/K projections and the softmax entirely.
pub struct AttentionMap {
    /// `windows x heads` weight matrices, each `n_q_window x n_k_window`.
    pub windows: Vec<Vec<Tensor>>,
}

impl AttentionMap {
    fn check_layout(&self, n_windows: usize, heads: usize) -> Result<()> {
        if self.windows.len() != n_windows || self.windows.iter().any(|h| h.len() != heads) {
            return Err(Error::shape(
                "multi_head_attention",
                format!("shared map with {n_windows} windows x {heads} heads"),
                format!("{} windows", self.windows.len()),
            ));
        }
        Ok(())
    }
}

/// Windowed multi-head attention.
///
/// Queries are carved into windows by `plan`. Keys/values use the same
/// partition when their grid matches the query grid; otherwise (merged
/// styles, mismatched resolutions) every query window attends over the full
/// key set. Passing `shared` reuses a previously computed attention map on
/// the new values.
pub fn multi_head_attention(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    weights: &AttentionWeights,
    plan: &WindowPlan,
    shared: Option<&AttentionMap>,
) -> Result<(FeatureMap, AttentionMap)> {
    let d = weights.d_model;
    for (name, f) in [("Q", q), ("K", k), ("V", v)] {
        if f.channels() != d {
            return Err(Error::shape(
                "multi_head_attention",
                format!("{name} width {d}"),
                format!("{}", f.channels()),
            ));
        }
    }
    if k.tokens() != v.tokens() {
        return Err(Error::shape(
            "multi_head_attention",
            format!("K and V token counts to match ({})", k.tokens()),
            format!("{}", v.tokens()),
        ));
    }

    let q_windows = window_partition(q, plan)?;
    let kv_windowed = k.grid() == q.grid();
    let (k_windows, v_windows) = if kv_windowed {
        (window_partition(k, plan)?, window_partition(v, plan)?)
    } else {
        (vec![k.tensor().clone()], vec![v.tensor().clone()])
    };

    if let Some(map) = shared {
        map.check_layout(q_windows.len(), weights.heads)?;
    }

    let mut out_windows = Vec::with_capacity(q_windows.len());
    let mut map_windows = Vec::with_capacity(q_windows.len());
    for (wi, qw) in q_windows.iter().enumerate() {
        let kv_i = if kv_windowed { wi } else { 0 };
        let kw = &k_windows[kv_i];
        let vw = &v_windows[kv_i];
        let mut heads = Vec::with_capacity(weights.heads);
        let mut maps = Vec::with_capacity(weights.heads);
        for h in 0..weights.heads {
            let vh = vw.matmul(&weights.wv[h])?;
            let (out_h, map_h) = match shared {
                Some(m) => {
                    let w = &m.windows[wi][h];
                    let ws = w.shape();
                    if ws != vec![qw.shape()[0], vh.shape()[0]] {
                        return Err(Error::shape(
                            "multi_head_attention",
                            format!("shared weights [{} x {}]", qw.shape()[0], vh.shape()[0]),
                            format!("{ws:?}"),
                        ));
                    }
                    (w.matmul(&vh)?, w.clone())
                }
                None => {
                    let qh = qw.matmul(&weights.wq[h])?;
                    let kh = kw.matmul(&weights.wk[h])?;
                    scaled_dot_attention(&qh, &kh, &vh)?
                }
            };
            heads.push(out_h);
            maps.push(map_h);
        }
        let concat = Tensor::concat_cols(&heads)?;
        out_windows.push(concat.matmul(&weights.wo)?);
        map_windows.push(maps);
    }

    let out = window_reverse(&out_windows, plan, q.grid())?;
    Ok((out, AttentionMap { windows: map_windows }))
}
