//! Silhouette/SMPL fusion `S·(I + M)` over square feature maps, followed by
//! max pooling over time.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// `(B, C, T, H', W') -> (B, C, T, Hmax, Hmax)`, zeros bottom/right.
pub fn pad_to_square<S: Real>(tape: &mut Tape<S>, e: Var) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 5 {
        return Err(Error::validation(format!("silhouette features must be 5-D, got {s:?}")));
    }
    let side = s[3].max(s[4]);
    if s[3] == s[4] {
        return Ok(e);
    }
    Ok(tape.pad2(e, side, side)?)
}

/// `(B, T, D') -> (B, 1, T, Hmax, Hmax)`, row-major per frame.
pub fn smpl_to_matrix<S: Real>(tape: &mut Tape<S>, e: Var, side: usize) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 3 || s[2] != side * side {
        return Err(Error::validation(format!(
            "SMPL embedding {s:?} cannot form a {side}x{side} matrix: fusion needs D' = Hmax² = {}",
            side * side
        )));
    }
    Ok(tape.reshape(e, &[s[0], 1, s[1], side, side])?)
}

/// Repeats the unit channel axis `c` times.
pub fn broadcast_channels<S: Real>(tape: &mut Tape<S>, m: Var, c: usize) -> Result<Var> {
    let mut s = tape.shape(m).to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::validation(format!("expected (B, 1, T, H, H), got {s:?}")));
    }
    if c == 1 {
        return Ok(m);
    }
    s[1] = c;
    Ok(tape.broadcast_to(m, &s)?)
}

/// Per `(b, c, t)` slice: `S·(I + M)`. `m` may keep a unit channel axis,
/// in which case the product broadcasts it over channels.
pub fn fuse<S: Real>(tape: &mut Tape<S>, s: Var, m: Var) -> Result<Var> {
    let (ss, sm) = (tape.shape(s).to_vec(), tape.shape(m).to_vec());
    let n = ss.len();
    let channel_ok = n == 5 && sm.len() == 5 && (sm[1] == 1 || sm[1] == ss[1]);
    let rest_ok = sm.len() == n && sm.iter().zip(&ss).enumerate().all(|(i, (a, b))| i == 1 || a == b);
    if !(ss == sm || channel_ok && rest_ok) || n < 2 || ss[n - 1] != ss[n - 2] {
        return Err(Error::validation(format!("fuse needs equal square operands, got {ss:?} and {sm:?}")));
    }
    let eye = tape.constant(Tensor::eye(ss[n - 1]));
    let im = tape.add(m, eye)?;
    Ok(tape.matmul(s, im)?)
}

/// Elementwise max over the T axis: `(B, C, T, H, H) -> (B, C, H, H)`.
pub fn temporal_pool<S: Real>(tape: &mut Tape<S>, e: Var) -> Result<Var> {
    let s = tape.shape(e);
    if s.len() != 5 {
        return Err(Error::validation(format!("expected (B, C, T, H, H), got {s:?}")));
    }
    Ok(tape.max_axis(e, 2)?)
}
