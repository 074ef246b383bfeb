//! Decoder-only transformer predicting ε per token, with attention limited
//! to the tokens of one view and adaLN-Zero conditioning shared by every
//! view of a field.

use rand::Rng;

use crate::conditioning::Condition;
use crate::diffusion::{FieldQuery, NoisePredictor};
use crate::error::{Error, Result};
use crate::field::{embed_timestep, DEFAULT_TIME_EMBED_DIM};
use crate::numerics::tensor::shape_str;
use crate::numerics::{layer_norm, Bound, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::scalar::{cst, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreNetConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub token_dim: usize,
    /// Length of the coordinate embedding concatenated to each token.
    pub coord_dim: usize,
    pub cond_dim: usize,
    /// Rows of the learned null condition.
    pub cond_tokens: usize,
    pub time_dim: usize,
    /// Zero-initialized gates on both residual branches.
    pub ada_gate: bool,
    /// Largest n_views·Z accepted for one field.
    pub max_tokens: usize,
}

impl ScoreNetConfig {
    /// depth 4, width 128, 4 heads; condition tokens 16 × 64.
    pub fn desk(token_dim: usize, coord_dim: usize) -> Self {
        ScoreNetConfig {
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            token_dim,
            coord_dim,
            cond_dim: 64,
            cond_tokens: 16,
            time_dim: DEFAULT_TIME_EMBED_DIM,
            ada_gate: true,
            max_tokens: 4096,
        }
    }

    /// DiT-XL sizes: depth 28, width 1152, 16 heads; condition tokens 256 × 4096.
    pub fn paper(token_dim: usize, coord_dim: usize) -> Self {
        ScoreNetConfig {
            depth: 28,
            width: 1152,
            heads: 16,
            mlp_ratio: 4,
            token_dim,
            coord_dim,
            cond_dim: 4096,
            cond_tokens: 256,
            time_dim: DEFAULT_TIME_EMBED_DIM,
            ada_gate: true,
            max_tokens: 8192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("token_dim", self.token_dim),
            ("cond_dim", self.cond_dim),
            ("cond_tokens", self.cond_tokens),
            ("time_dim", self.time_dim),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("score net {name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time_dim {} must be even", self.time_dim)));
        }
        Ok(())
    }

    /// Regressed vectors per block: shift, scale (and gate) for both branches.
    pub fn chunks_per_block(&self) -> usize {
        if self.ada_gate {
            6
        } else {
            4
        }
    }
}

/// Scale and shift (plus optional gate) applied after a LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLNParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub gate: Option<Vec<T>>,
}

/// `(1 + γ)·LayerNorm(x) + β` over the channels of `x` [R × W].
pub fn ada_layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<Tensor<T>> {
    let (_, w) = x.dims2()?;
    if gamma.len() != w || beta.len() != w {
        return Err(Error::shape(
            "ada_layer_norm",
            w,
            format!("gamma {} / beta {}", gamma.len(), beta.len()),
        ));
    }
    let mut out = layer_norm(x, 1, cst(LAYER_NORM_EPS))?;
    for row in out.data_mut().chunks_mut(w) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (T::one() + g) * *v + b;
        }
    }
    Ok(out)
}

/// One field for [`ScoreNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct FieldInput<'a, T> {
    /// [n·Z × token_dim]
    pub noisy: &'a Tensor<T>,
    /// [n·Z × coord_dim]
    pub coords: &'a Tensor<T>,
    pub views: usize,
    pub t: usize,
    pub cond: Condition<'a, T>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    input: Linear,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    null: ParamId,
    blocks: Vec<Block>,
    final_ada: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct ScoreNet<T> {
    cfg: ScoreNetConfig,
    params: ParamStore<T>,
    ids: Ids,
}

fn xavier<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(vec![fan_in, fan_out], -a, a, rng)
}

fn add_linear<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Linear {
    let w = if zero {
        Tensor::zeros(vec![fan_in, fan_out])
    } else {
        xavier(fan_in, fan_out, rng)
    };
    Linear {
        w: p.add(format!("{name}.w"), w),
        b: p.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, l: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p[l.w])?;
    tape.add_row_bias(y, p[l.b])
}

/// `(1 + γ)·LN(x) + β` with γ, β given per row group.
fn ada_ln<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm(x, 1, cst(LAYER_NORM_EPS))?;
    let scaled = tape.mul_group(n, gamma)?;
    let y = tape.add(n, scaled)?;
    tape.add_group(y, beta)
}

impl<T: Scalar> ScoreNet<T> {
    /// Xavier-uniform linear layers; adaLN heads, the output layer and the
    /// null condition start at zero.
    pub fn new<R: Rng + ?Sized>(cfg: ScoreNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut p = ParamStore::new();
        let input = add_linear(&mut p, "input", cfg.token_dim + cfg.coord_dim, w, false, rng);
        let time1 = add_linear(&mut p, "time.0", cfg.time_dim, w, false, rng);
        let time2 = add_linear(&mut p, "time.1", w, w, false, rng);
        let cond = add_linear(&mut p, "cond", cfg.cond_dim, w, false, rng);
        let null = p.add("null_cond", Tensor::zeros(vec![cfg.cond_tokens, cfg.cond_dim]));
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                ada: add_linear(
                    &mut p,
                    &format!("block{i}.ada"),
                    w,
                    cfg.chunks_per_block() * w,
                    true,
                    rng,
                ),
                qkv: add_linear(&mut p, &format!("block{i}.qkv"), w, 3 * w, false, rng),
                proj: add_linear(&mut p, &format!("block{i}.proj"), w, w, false, rng),
                mlp1: add_linear(&mut p, &format!("block{i}.mlp.0"), w, cfg.mlp_ratio * w, false, rng),
                mlp2: add_linear(&mut p, &format!("block{i}.mlp.1"), cfg.mlp_ratio * w, w, false, rng),
            })
            .collect();
        let final_ada = add_linear(&mut p, "final.ada", w, 2 * w, true, rng);
        let out = add_linear(&mut p, "final.out", w, cfg.token_dim, true, rng);
        Ok(ScoreNet {
            cfg,
            params: p,
            ids: Ids {
                input,
                time1,
                time2,
                cond,
                null,
                blocks,
                final_ada,
                out,
            },
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn null_param(&self) -> ParamId {
        self.ids.null
    }

    /// Two-layer SiLU MLP on the sinusoidal embedding of each `t`, [F × W].
    pub fn timestep_mlp(&self, tape: &mut Tape<T>, p: &Bound, ts: &[usize]) -> Result<Var> {
        let dim = self.cfg.time_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(embed_timestep(t, dim)?.into_iter().map(T::of_f64));
        }
        let emb = tape.constant(Tensor::new(vec![ts.len(), dim], data)?)?;
        let h = linear(tape, p, self.ids.time1, emb)?;
        let h = tape.silu(h)?;
        linear(tape, p, self.ids.time2, h)
    }

    /// Mean-pooled, layer-normalized condition through one linear layer and
    /// SiLU, [F × W].
    pub fn condition_mlp(&self, tape: &mut Tape<T>, p: &Bound, conds: &[Condition<'_, T>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(conds.len());
        for c in conds {
            let row = match c {
                Condition::Embedding(e) => {
                    if e.dim() != self.cfg.cond_dim {
                        return Err(Error::shape(
                            "condition_mlp",
                            format!("cond_dim {}", self.cfg.cond_dim),
                            shape_str(e.tokens.shape()),
                        ));
                    }
                    tape.constant(e.pooled())?
                }
                Condition::Null => tape.mean_rows(p[self.ids.null], self.cfg.cond_tokens)?,
            };
            rows.push(row);
        }
        let pooled = tape.concat_rows(&rows)?;
        let pooled = tape.layer_norm(pooled, 1, cst(LAYER_NORM_EPS))?;
        let h = linear(tape, p, self.ids.cond, pooled)?;
        tape.silu(h)
    }

    fn check_fields(&self, fields: &[FieldInput<'_, T>]) -> Result<usize> {
        if fields.is_empty() {
            return Err(Error::invalid("forward needs at least one field"));
        }
        let mut z = None;
        for f in fields {
            let (rows, d) = f.noisy.dims2()?;
            if d != self.cfg.token_dim {
                return Err(Error::shape(
                    "ScoreNet::forward",
                    format!("token_dim {}", self.cfg.token_dim),
                    d,
                ));
            }
            if f.coords.shape() != [rows, self.cfg.coord_dim] {
                return Err(Error::shape(
                    "ScoreNet::forward",
                    format!("[{rows}x{}]", self.cfg.coord_dim),
                    shape_str(f.coords.shape()),
                ));
            }
            if f.views == 0 || rows % f.views != 0 {
                return Err(Error::invalid(format!(
                    "{rows} tokens do not split into {} views",
                    f.views
                )));
            }
            if rows > self.cfg.max_tokens {
                return Err(Error::invalid(format!(
                    "field has {rows} tokens, above max_tokens {}",
                    self.cfg.max_tokens
                )));
            }
            let zf = rows / f.views;
            if *z.get_or_insert(zf) != zf {
                return Err(Error::invalid("fields in one batch must share tokens per view"));
            }
        }
        Ok(z.expect("at least one field"))
    }

    /// ε prediction for every token of every field, stacked [Σ n·Z × D].
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, fields: &[FieldInput<'_, T>]) -> Result<Var> {
        let z = self.check_fields(fields)?;
        let cfg = &self.cfg;
        let w = cfg.width;
        let in_dim = cfg.token_dim + cfg.coord_dim;
        let total_rows: usize = fields.iter().map(|f| f.noisy.shape()[0]).sum();
        let mut data = Vec::with_capacity(total_rows * in_dim);
        for f in fields {
            for (tok, crd) in f
                .noisy
                .data()
                .chunks(cfg.token_dim)
                .zip(f.coords.data().chunks(cfg.coord_dim))
            {
                data.extend_from_slice(tok);
                data.extend_from_slice(crd);
            }
        }
        let x_in = tape.constant(Tensor::new(vec![total_rows, in_dim], data)?)?;
        let mut x = linear(tape, p, self.ids.input, x_in)?;

        let ts: Vec<usize> = fields.iter().map(|f| f.t).collect();
        let conds: Vec<Condition<'_, T>> = fields.iter().map(|f| f.cond).collect();
        let temb = self.timestep_mlp(tape, p, &ts)?;
        let cemb = self.condition_mlp(tape, p, &conds)?;
        let h = tape.add(temb, cemb)?;
        let h = tape.silu(h)?;

        // Per-field modulation broadcast to row groups: directly when every
        // field has the same view count, else through a field-to-view map.
        let uniform = fields.iter().all(|f| f.views == fields[0].views);
        let total_views: usize = fields.iter().map(|f| f.views).sum();
        let spread = if uniform {
            None
        } else {
            let mut s = vec![T::zero(); total_views * fields.len()];
            let mut row = 0;
            for (fi, f) in fields.iter().enumerate() {
                for _ in 0..f.views {
                    s[row * fields.len() + fi] = T::one();
                    row += 1;
                }
            }
            Some(tape.constant(Tensor::new(vec![total_views, fields.len()], s)?)?)
        };
        let modulation = |tape: &mut Tape<T>, l: Linear| -> Result<Var> {
            let m = linear(tape, p, l, h)?;
            match spread {
                Some(s) => tape.matmul(s, m),
                None => Ok(m),
            }
        };
        let groups = total_rows / z;

        for b in &self.ids.blocks {
            let m = modulation(tape, b.ada)?;
            let chunk = |tape: &mut Tape<T>, i: usize| tape.slice_cols(m, i * w, w);
            let (shift1, scale1, shift2, scale2) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?, chunk(tape, 3)?);
            let gates = if cfg.ada_gate {
                Some((chunk(tape, 4)?, chunk(tape, 5)?))
            } else {
                None
            };

            let a = ada_ln(tape, x, scale1, shift1)?;
            let qkv = linear(tape, p, b.qkv, a)?;
            let att = tape.grouped_attention(qkv, groups, cfg.heads)?;
            let mut o = linear(tape, p, b.proj, att)?;
            if let Some((g1, _)) = gates {
                o = tape.mul_group(o, g1)?;
            }
            x = tape.add(x, o)?;

            let a = ada_ln(tape, x, scale2, shift2)?;
            let hdn = linear(tape, p, b.mlp1, a)?;
            let hdn = tape.gelu(hdn)?;
            let mut o = linear(tape, p, b.mlp2, hdn)?;
            if let Some((_, g2)) = gates {
                o = tape.mul_group(o, g2)?;
            }
            x = tape.add(x, o)?;
        }

        let m = modulation(tape, self.ids.final_ada)?;
        let shift = tape.slice_cols(m, 0, w)?;
        let scale = tape.slice_cols(m, w, w)?;
        let x = ada_ln(tape, x, scale, shift)?;
        linear(tape, p, self.ids.out, x)
    }

    /// Inference forward; one output tensor per field.
    pub fn predict(&self, fields: &[FieldInput<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false)?;
        let out = self.forward(&mut tape, &p, fields)?;
        let all = tape.value(out);
        let d = self.cfg.token_dim;
        let mut offset = 0;
        fields
            .iter()
            .map(|f| {
                let n = f.noisy.numel();
                let t = Tensor::new(vec![n / d, d], all.data()[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect()
    }

    /// The regressed adaLN parameters for one field: two per block
    /// (attention, MLP) followed by the final layer's.
    pub fn ada_params(&self, t: usize, cond: Condition<'_, T>) -> Result<Vec<AdaLNParams<T>>> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false)?;
        let temb = self.timestep_mlp(&mut tape, &p, &[t])?;
        let cemb = self.condition_mlp(&mut tape, &p, &[cond])?;
        let h = tape.add(temb, cemb)?;
        let h = tape.silu(h)?;
        let w = self.cfg.width;
        let mut out = Vec::new();
        for b in &self.ids.blocks {
            let m = linear(&mut tape, &p, b.ada, h)?;
            let v = tape.value(m).data();
            let part = |i: usize| v[i * w..(i + 1) * w].to_vec();
            for branch in 0..2 {
                out.push(AdaLNParams {
                    beta: part(2 * branch),
                    gamma: part(2 * branch + 1),
                    gate: self.cfg.ada_gate.then(|| part(4 + branch)),
                });
            }
        }
        let m = linear(&mut tape, &p, self.ids.final_ada, h)?;
        let v = tape.value(m).data();
        out.push(AdaLNParams {
            beta: v[..w].to_vec(),
            gamma: v[w..2 * w].to_vec(),
            gate: None,
        });
        Ok(out)
    }
}

impl<T: Scalar> NoisePredictor<T> for ScoreNet<T> {
    fn predict_noise(&self, queries: &[FieldQuery<'_, T>], t: usize) -> Result<Vec<Tensor<T>>> {
        let fields: Vec<FieldInput<'_, T>> = queries
            .iter()
            .map(|q| FieldInput {
                noisy: q.noisy,
                coords: q.coords,
                views: q.views,
                t,
                cond: q.cond,
            })
            .collect();
        self.predict(&fields)
    }
}
