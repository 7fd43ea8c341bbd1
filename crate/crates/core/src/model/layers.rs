//! Forward building blocks recorded on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::layout::{AttentionIds, ConvIds, EncoderBranchIds, LinearIds, NormIds};
use crate::params::ParamVars;
use crate::scalar::Scalar;

/// conv3 → ReLU → conv → ReLU → conv, with kernel sizes taken from the ids.
pub fn conv_stack<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, ids: &[ConvIds; 3], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, c) in ids.iter().enumerate() {
        h = tape.conv2d(h, pv.var(c.weight), pv.var(c.bias))?;
        if i + 1 < ids.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, ids: &LinearIds, x: Var) -> Result<Var> {
    tape.linear(x, pv.var(ids.weight), pv.var(ids.bias))
}

pub fn norm<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, ids: &NormIds, x: Var, eps: T) -> Result<Var> {
    tape.layer_norm(x, pv.var(ids.gain), pv.var(ids.bias), eps)
}

fn check_tiling(c: usize, h: usize, w: usize, p: usize, n: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 || c * h * w != n {
        return Err(Error::invalid(format!(
            "cannot tile {c}×{h}×{w} ({n} values) into {p}×{p} patches"
        )));
    }
    Ok(())
}

/// Source offsets for [`patchify`]: tiles in row-major order, and inside a
/// token the element `ch·p² + dy·p + dx`.
pub fn patchify_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        index.push((ch * h + ty * p + dy) * w + tx * p + dx);
                    }
                }
            }
        }
    }
    index
}

/// Inverse permutation of [`patchify_index`].
pub fn unpatchify_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let forward = patchify_index(c, h, w, p);
    let mut index = vec![0; forward.len()];
    for (seq_pos, &src) in forward.iter().enumerate() {
        index[src] = seq_pos;
    }
    index
}

/// `[C×H×W] → [(H/p)(W/p) × p²C]`.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, x: Var, p: usize) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3("patchify")?;
    check_tiling(c, h, w, p, c * h * w)?;
    tape.gather(x, patchify_index(c, h, w, p), &[(h / p) * (w / p), p * p * c])
}

/// `[(H/p)(W/p) × p²C] → [C×H×W]`.
pub fn unpatchify<T: Scalar>(tape: &mut Tape<T>, seq: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let (t, d) = tape.value(seq).dims2("unpatchify")?;
    check_tiling(c, h, w, p, t * d)?;
    if d != p * p * c {
        return Err(Error::shape("unpatchify", &[t, d], &[c, h, w]));
    }
    tape.gather(seq, unpatchify_index(c, h, w, p), &[c, h, w])
}

/// Multi-head scaled dot-product attention with `K = V = kv` and no
/// projections: head `j` uses columns `[j·D/h, (j+1)·D/h)` of both inputs.
/// Returns the concatenated head outputs and each head's weight matrix.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, kv: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let (_, d) = tape.value(q).dims2("attend")?;
    let (_, dk) = tape.value(kv).dims2("attend")?;
    if d != dk {
        return Err(Error::shape("attend", tape.shape(q), tape.shape(kv)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("token dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for j in 0..heads {
        let (qh, kh) = if heads == 1 {
            (q, kv)
        } else {
            (tape.slice_cols(q, j * dh, dh)?, tape.slice_cols(kv, j * dh, dh)?)
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(a, kh)?);
        weights.push(a);
    }
    let z = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((z, weights))
}

/// Cross-attention block: `Q = LN_q(query)`, `K = V = [Q; LN_kv(other)]`,
/// result `Linear(attend(Q, K) + Q)`. With `other = None` it is plain
/// self-attention over `Q`.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ids: &AttentionIds,
    query: Var,
    other: Option<Var>,
    heads: usize,
    eps: T,
) -> Result<(Var, Vec<Var>)> {
    let q = norm(tape, pv, &ids.ln_q, query, eps)?;
    let kv = match (other, &ids.ln_kv) {
        (Some(o), Some(ln)) => {
            if tape.shape(o)[1..] != tape.shape(q)[1..] {
                return Err(Error::shape("cross_attention", tape.shape(q), tape.shape(o)));
            }
            let o = norm(tape, pv, ln, o, eps)?;
            tape.concat_rows(q, o)?
        }
        (None, None) => q,
        _ => return Err(Error::invalid("cross-attention inputs do not match the parameter layout")),
    };
    let (z, weights) = attend(tape, q, kv, heads)?;
    let r = tape.add(z, q)?;
    Ok((linear(tape, pv, &ids.out, r)?, weights))
}

/// One branch of a cross transformer encoder:
/// align to the other branch's token dim, attend, feed-forward with a
/// residual, then map back to the branch's own dim.
pub fn encoder_branch<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ids: &EncoderBranchIds,
    own: Var,
    other: Option<Var>,
    heads: usize,
    eps: T,
) -> Result<(Var, Vec<Var>)> {
    let zlp = linear(tape, pv, &ids.align, own)?;
    let (ca, weights) = cross_attention(tape, pv, &ids.attn, zlp, other, heads, eps)?;
    let zca = tape.add(ca, zlp)?;
    let n = norm(tape, pv, &ids.ln_ffn, zca, eps)?;
    let f = linear(tape, pv, &ids.ffn1, n)?;
    let f = tape.relu(f);
    let f = linear(tape, pv, &ids.ffn2, f)?;
    let r = tape.add(f, zca)?;
    Ok((linear(tape, pv, &ids.exit, r)?, weights))
}
