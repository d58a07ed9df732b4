//! Cycled view projection: `X′ = F(X)`, `X″ = F′(X′)` with two-layer MLPs,
//! and the L1 cycle loss between `X` and `X″`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::real::Real;
use crate::tensor::{Tape, Var};

/// How a `[C, h, w]` map is fed to the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvpMode {
    /// One vector of length `C·h·w`.
    Flatten,
    /// `C` rows of length `h·w` sharing one spatial MLP.
    Spatial,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CvpVars {
    pub fwd: MlpVars,
    /// Cycled projection; `None` disables the cycle.
    pub bwd: Option<MlpVars>,
}

/// Linear → ReLU → Linear on the rows of `x`.
pub fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row_bias(h, p.b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, p.w2)?;
    tape.add_row_bias(y, p.b2)
}

fn project<T: Real>(tape: &mut Tape<T>, x: Var, p: &MlpVars, mode: CvpMode) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    let rows = match mode {
        CvpMode::Flatten => tape.reshape(x, &[1, c * h * w])?,
        CvpMode::Spatial => tape.reshape(x, &[c, h * w])?,
    };
    let y = mlp(tape, rows, p)?;
    tape.reshape(y, &[c, h, w])
}

/// Returns `(X′, X″)`; `X″` is `None` when `p.bwd` is absent.
pub fn cvp_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &CvpVars, mode: CvpMode) -> Result<(Var, Option<Var>)> {
    let x1 = project(tape, x, &p.fwd, mode)?;
    let x2 = match &p.bwd {
        Some(bwd) => Some(project(tape, x1, bwd, mode)?),
        None => None,
    };
    Ok((x1, x2))
}

/// Mean absolute difference between the front-view features and their
/// cycled reconstruction.
pub fn cycle_loss<T: Real>(tape: &mut Tape<T>, x: Var, cycled: Var) -> Result<Var> {
    tape.l1_loss(x, cycled)
}
