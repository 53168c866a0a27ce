//! Variable-rate objectives:
//!
//! ```text
//! L2   = Σ_B mean_n ‖x − x̄_B‖₂
//! L_MS = −Σ_B MS-SSIM(x, x̄_B)
//! L    = 2·L2 + L_MS
//! ```

use crate::error::{contract_err, Result};
use crate::metrics::{ms_ssim_tape, MsSsimConfig};
use crate::tensor::{Real, Tape, Var};

fn check<T: Real>(tape: &Tape<T>, x: Var, recons: &[Var]) -> Result<()> {
    if recons.is_empty() {
        return contract_err("loss needs at least one reconstruction");
    }
    if recons.iter().any(|&r| tape.shape(r) != tape.shape(x)) {
        return contract_err("reconstruction shape differs from the input");
    }
    Ok(())
}

/// Sum over reconstructions of the batch-mean Euclidean distance.
pub fn loss_l2<T: Real>(tape: &mut Tape<T>, x: Var, recons: &[Var]) -> Result<Var> {
    check(tape, x, recons)?;
    let n = tape.shape(x)[0] as f64;
    let mut acc: Option<Var> = None;
    for &r in recons {
        let d = tape.sub(x, r)?;
        let d2 = tape.square(d);
        let per = tape.sum_per_sample(d2);
        let norm = tape.sqrt(per);
        let s = tape.sum(norm);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / n))
}

/// Negative sum over reconstructions of the image-and-channel mean MS-SSIM.
pub fn loss_msssim<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    recons: &[Var],
    cfg: &MsSsimConfig,
) -> Result<Var> {
    check(tape, x, recons)?;
    let mut acc: Option<Var> = None;
    for &r in recons {
        let s = ms_ssim_tape(tape, x, r, cfg)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), -1.0))
}

/// Handles to the loss terms of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossParts {
    pub total: Var,
    pub l2: Var,
    pub msssim: Var,
}

/// `2·L2 + L_MS`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    recons: &[Var],
    cfg: &MsSsimConfig,
) -> Result<LossParts> {
    let l2 = loss_l2(tape, x, recons)?;
    let msssim = loss_msssim(tape, x, recons, cfg)?;
    let twice = tape.scale(l2, 2.0);
    let total = tape.add(twice, msssim)?;
    Ok(LossParts { total, l2, msssim })
}
